#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "hcl/autodiff.hpp"
#include "hcl/gradcheck.hpp"
#include "hcl/hyperconv.hpp"
#include "hcl/ops.hpp"
#include "hcl/serialize.hpp"
#include "json.hpp"

namespace hcl {

enum class Backbone { UNet, Flat };
enum class ConvKind { Standard, Hyper };

/// Declarative description of a segmentation network.
struct ArchitectureSpec {
  Backbone backbone = Backbone::UNet;
  ConvKind conv_kind = ConvKind::Standard;
  int kernel_size = 3;
  std::size_t init_channels = 32;  // UNet width at full resolution
  std::vector<std::size_t> flat_channels{16, 32, 64, 128, 64, 32, 16};
  std::vector<int> flat_dilations{1, 2, 4, 8, 4, 2, 1};
  int convs_per_block = 2;
  int num_pools = 3;
  /// Template for every hyper-convolution; channels and kernel size are
  /// filled in per layer.
  HyperNetSpec hyper;
  std::size_t in_channels = 1;
  std::size_t out_classes = 1;
  double dropout_p = 0.5;

  void validate() const;
};

void to_json(nlohmann::json& j, const ArchitectureSpec& s);
void from_json(const nlohmann::json& j, ArchitectureSpec& s);

/// Parses a short name: unet<k>, hyperunet<k>[_nl<N>], flat, hyperflat[_nl<N>],
/// each optionally suffixed with _c<initChannels>. Hyper names default to N_L=4
/// (UNet) or N_L=7 (flat, which puts its size next to the dilated baseline).
ArchitectureSpec parse_spec_name(const std::string& name);

struct StandardConv {
  ad::Parameter weight;  // [Cout,Cin,k,k]
  ad::Parameter bias;    // [Cout]
};

/// One convolution of a network: either a plain kernel or a hyper-convolution.
class ConvLayer {
public:
  static ConvLayer standard(const std::string& name, std::size_t cin, std::size_t cout, int kernel, int dilation,
                            std::mt19937_64& rng);
  static ConvLayer hyper(const std::string& name, const HyperNetSpec& spec, int dilation, std::mt19937_64& rng);
  /// Wraps fixed kernel values (e.g. materialized from a hyper layer).
  static ConvLayer from_kernel(const std::string& name, Tensor kernel, Tensor bias, int dilation);

  const std::string& name() const noexcept { return name_; }
  int dilation() const noexcept { return dilation_; }
  int kernel_size() const;
  std::size_t in_channels() const;
  std::size_t out_channels() const;
  bool is_hyper() const noexcept { return std::holds_alternative<HyperConvLayer>(impl_); }
  const HyperConvLayer& as_hyper() const { return std::get<HyperConvLayer>(impl_); }

  ad::Var forward(ad::Graph& g, ad::Var x);
  /// Materialized kernel [Cout,Cin,k,k].
  Tensor kernel() const;
  const Tensor& bias() const;

  std::vector<ad::Parameter*> parameters();
  std::vector<const ad::Parameter*> parameters() const;
  std::size_t param_count() const;

private:
  ConvLayer(std::string name, int dilation, std::variant<StandardConv, HyperConvLayer> impl)
      : name_(std::move(name)), dilation_(dilation), impl_(std::move(impl)) {}

  std::string name_;
  int dilation_ = 1;
  std::variant<StandardConv, HyperConvLayer> impl_;
};

struct NormLayer {
  ad::Parameter gamma;
  ad::Parameter beta;
  BatchNormState state;
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

/// Built UNet or flat CNN. Convolutions are listed in forward order; every
/// one of them is followed by batch norm and ReLU. The final 1x1 convolution
/// is always a regular convolution followed by a sigmoid.
class Network {
public:
  explicit Network(ArchitectureSpec spec) : spec_(std::move(spec)) {}

  const ArchitectureSpec& spec() const noexcept { return spec_; }
  void set_dropout(double p);

  /// Per-pixel foreground probabilities [N,outClasses,H,W].
  ad::Var forward(ad::Graph& g, ad::Var input, Mode mode, std::mt19937_64& rng);
  /// Eval-mode inference without keeping gradients.
  Tensor predict(const Tensor& input);

  std::vector<ad::Parameter*> parameters();
  std::size_t param_count() const;

  /// Every convolution except the final 1x1, in forward order.
  const std::vector<ConvLayer>& convs() const noexcept { return convs_; }
  const std::vector<ConvLayer>& projections() const noexcept { return projections_; }
  const ConvLayer& final_conv() const { return final_.front(); }
  const std::vector<NormLayer>& norms() const noexcept { return norms_; }

  /// Copy in which each hyper-convolution is replaced by a regular
  /// convolution holding its generated kernel.
  Network materialized() const;

  /// Parameters plus batch-norm running statistics, by name.
  std::vector<NamedTensor> state() const;
  void load_state(const std::vector<NamedTensor>& state);

private:
  friend Network build_unet(const ArchitectureSpec&, std::mt19937_64&);
  friend Network build_flat_cnn(const ArchitectureSpec&, std::mt19937_64&);

  ad::Var conv_norm(ad::Graph& g, ad::Var x, std::size_t index, Mode mode, bool activate);
  ad::Var forward_unet(ad::Graph& g, ad::Var x, Mode mode, std::mt19937_64& rng);
  ad::Var forward_flat(ad::Graph& g, ad::Var x, Mode mode);

  ArchitectureSpec spec_;
  std::vector<ConvLayer> convs_;
  std::vector<NormLayer> norms_;        // one per entry of convs_
  std::vector<ConvLayer> projections_;  // flat residual shortcuts (1x1)
  std::vector<int> projection_of_block_;  // -1 when the shortcut is the identity
  std::vector<ConvLayer> final_;        // exactly one
};

Network build_unet(const ArchitectureSpec& spec, std::mt19937_64& rng);
Network build_flat_cnn(const ArchitectureSpec& spec, std::mt19937_64& rng);
Network build_network(const ArchitectureSpec& spec, std::mt19937_64& rng);

std::size_t param_count(const Network& net);

/// Receptive field in pixels by the size/jump recurrence. UNet: at the
/// bottleneck output. Flat: over the whole chain.
int receptive_field(const ArchitectureSpec& spec);

/// End-to-end finite-difference check of every parameter on a random
/// 1 x inChannels x size x size input with eval-mode norms and dropout off.
/// Biases and norm shifts are first set to small random values and the norm
/// running statistics are calibrated on a batch of random inputs, so that no
/// activation sits exactly on a ReLU kink. Entries within one step of a kink
/// are skipped (see check_parameter_gradients).
GradCheckReport check_network_gradients(Network& net, std::size_t size, double step, std::size_t per_param,
                                        std::uint64_t seed);

void save_checkpoint(const Network& net, const std::string& dir, DType dtype);
Network load_checkpoint(const std::string& dir);

}  // namespace hcl
