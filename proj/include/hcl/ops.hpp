#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "hcl/autodiff.hpp"
#include "hcl/tensor.hpp"

namespace hcl {

/// Arithmetic used inside convolution matrix products. Tensors always store
/// doubles; F32 trades the last digits of conv results for speed during
/// training. Gradient checks and oracles run in F64.
enum class Precision { F64, F32 };

Precision conv_precision() noexcept;
void set_conv_precision(Precision p) noexcept;

/// Restores the previous conv precision on scope exit.
class PrecisionScope {
public:
  explicit PrecisionScope(Precision p) : saved_(conv_precision()) { set_conv_precision(p); }
  ~PrecisionScope() { set_conv_precision(saved_); }
  PrecisionScope(const PrecisionScope&) = delete;
  PrecisionScope& operator=(const PrecisionScope&) = delete;

private:
  Precision saved_;
};

enum class Mode { Train, Eval };

// ---------------------------------------------------------------------------
// Pure tensor kernels.

/// Stride-1 convolution with zero "same" padding of (k-1)/2*dilation per side.
/// input [N,Cin,H,W], kernel [Cout,Cin,kh,kw] (odd kh, kw), bias [Cout] or empty.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int dilation = 1);

struct Conv2dGrads {
  Tensor input, kernel, bias;
};
Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& grad_out, int dilation,
                            bool need_input, bool need_kernel, bool need_bias);

struct PoolResult {
  Tensor output;
  std::vector<std::uint32_t> argmax;  // flat input index per output element
};
/// Non-overlapping 2x2 max pool; ties resolve to the first element in row-major order.
PoolResult maxpool2(const Tensor& input);
Tensor upsample_nearest2(const Tensor& input);
Tensor leaky_relu(const Tensor& x, double slope);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormState(std::size_t channels = 1)
      : running_mean(Shape{channels}, 0.0), running_var(Shape{channels}, 1.0) {}
};

// ---------------------------------------------------------------------------
// Differentiable graph operations.
namespace ad {

Var add(Graph& g, Var a, Var b);
Var sub(Graph& g, Var a, Var b);
Var mul(Graph& g, Var a, Var b);
Var scale(Graph& g, Var a, double s);
Var sum(Graph& g, Var a);
/// Sum of a*w for a constant weight tensor w. Handy as a generic test loss.
Var weighted_sum(Graph& g, Var a, const Tensor& w);

Var conv2d(Graph& g, Var input, Var kernel, Var bias, int dilation = 1);
Var maxpool2(Graph& g, Var input);
Var upsample_nearest2(Graph& g, Var input);
Var leaky_relu(Graph& g, Var x, double slope);
Var relu(Graph& g, Var x);
Var sigmoid(Graph& g, Var x);
/// Concatenate two [N,C,H,W] tensors along the channel axis.
Var concat_channels(Graph& g, Var a, Var b);

/// Per-channel batch normalization. Train mode normalizes with batch
/// statistics and updates `state`; eval mode uses the running statistics.
Var batchnorm2d(Graph& g, Var x, Var gamma, Var beta, BatchNormState& state, Mode mode);

/// Inverted dropout: zeroes with probability p, scales survivors by 1/(1-p).
Var dropout(Graph& g, Var x, double p, Mode mode, std::mt19937_64& rng);

/// x [M,K] * w [K,N] + b [N] (b may be an invalid Var).
Var linear(Graph& g, Var x, Var w, Var b);
/// Adds a vector [N] to every row of x [M,N].
Var add_row(Graph& g, Var x, Var row);
Var reshape(Graph& g, Var x, Shape shape);

Var mse(Graph& g, Var pred, const Tensor& target);

}  // namespace ad
}  // namespace hcl
