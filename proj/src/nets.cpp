#include "hcl/nets.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <regex>
#include <stdexcept>

namespace hcl {
namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// ArchitectureSpec

void ArchitectureSpec::validate() const {
  if (kernel_size < 1 || kernel_size % 2 == 0) throw std::invalid_argument("kernel_size must be odd and positive");
  if (convs_per_block < 1) throw std::invalid_argument("convs_per_block must be positive");
  if (in_channels == 0 || out_classes == 0) throw std::invalid_argument("channel counts must be positive");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw std::invalid_argument("dropout_p must lie in [0, 1)");
  if (backbone == Backbone::UNet) {
    if (num_pools < 0) throw std::invalid_argument("num_pools must be non-negative");
    if (init_channels == 0) throw std::invalid_argument("init_channels must be positive");
  } else {
    if (flat_channels.size() != flat_dilations.size())
      throw std::invalid_argument("flat_channels and flat_dilations must have equal length (" +
                                  std::to_string(flat_channels.size()) + " vs " +
                                  std::to_string(flat_dilations.size()) + ")");
    if (flat_channels.empty()) throw std::invalid_argument("flat network needs at least one block");
    for (auto d : flat_dilations)
      if (d < 1) throw std::invalid_argument("dilations must be positive");
    for (auto c : flat_channels)
      if (c == 0) throw std::invalid_argument("flat channel widths must be positive");
  }
}

void to_json(json& j, const ArchitectureSpec& s) {
  j = json{{"backbone", s.backbone == Backbone::UNet ? "unet" : "flat"},
           {"conv_kind", s.conv_kind == ConvKind::Standard ? "standard" : "hyper"},
           {"kernel_size", s.kernel_size},
           {"init_channels", s.init_channels},
           {"flat_channels", s.flat_channels},
           {"flat_dilations", s.flat_dilations},
           {"convs_per_block", s.convs_per_block},
           {"num_pools", s.num_pools},
           {"hyper",
            {{"hidden_widths", s.hyper.hidden_widths},
             {"last_width", s.hyper.last_width},
             {"leak_slope", s.hyper.leak_slope},
             {"normalized_coords", s.hyper.normalized_coords}}},
           {"in_channels", s.in_channels},
           {"out_classes", s.out_classes},
           {"dropout_p", s.dropout_p}};
}

void from_json(const json& j, ArchitectureSpec& s) {
  s = ArchitectureSpec{};
  if (j.contains("backbone")) {
    const auto b = j.at("backbone").get<std::string>();
    if (b == "unet")
      s.backbone = Backbone::UNet;
    else if (b == "flat")
      s.backbone = Backbone::Flat;
    else
      throw std::invalid_argument("unknown backbone '" + b + "'");
  }
  if (j.contains("conv_kind")) {
    const auto k = j.at("conv_kind").get<std::string>();
    if (k == "standard")
      s.conv_kind = ConvKind::Standard;
    else if (k == "hyper")
      s.conv_kind = ConvKind::Hyper;
    else
      throw std::invalid_argument("unknown conv_kind '" + k + "'");
  }
  s.kernel_size = j.value("kernel_size", s.kernel_size);
  s.init_channels = j.value("init_channels", s.init_channels);
  s.flat_channels = j.value("flat_channels", s.flat_channels);
  s.flat_dilations = j.value("flat_dilations", s.flat_dilations);
  s.convs_per_block = j.value("convs_per_block", s.convs_per_block);
  s.num_pools = j.value("num_pools", s.num_pools);
  if (j.contains("hyper")) {
    const auto& h = j.at("hyper");
    s.hyper.hidden_widths = h.value("hidden_widths", s.hyper.hidden_widths);
    s.hyper.last_width = h.value("last_width", s.hyper.last_width);
    s.hyper.leak_slope = h.value("leak_slope", s.hyper.leak_slope);
    s.hyper.normalized_coords = h.value("normalized_coords", s.hyper.normalized_coords);
  }
  s.in_channels = j.value("in_channels", s.in_channels);
  s.out_classes = j.value("out_classes", s.out_classes);
  s.dropout_p = j.value("dropout_p", s.dropout_p);
  s.validate();
}

ArchitectureSpec parse_spec_name(const std::string& name) {
  static const std::regex re(R"(^(unet|hyperunet|flat|hyperflat)(\d*)(?:_nl(\d+))?(?:_c(\d+))?$)");
  std::smatch m;
  if (!std::regex_match(name, m, re)) throw std::invalid_argument("unrecognized architecture name '" + name + "'");
  ArchitectureSpec s;
  const auto family = m[1].str();
  const bool hyper = family.starts_with("hyper");
  s.conv_kind = hyper ? ConvKind::Hyper : ConvKind::Standard;
  s.backbone = family.ends_with("unet") ? Backbone::UNet : Backbone::Flat;
  if (m[2].matched && !m[2].str().empty()) s.kernel_size = std::stoi(m[2].str());
  s.hyper.last_width = s.backbone == Backbone::UNet ? 4 : 7;
  if (m[3].matched) {
    if (!hyper) throw std::invalid_argument("'" + name + "': _nl only applies to hyper networks");
    s.hyper.last_width = std::stoul(m[3].str());
  }
  if (m[4].matched) s.init_channels = std::stoul(m[4].str());
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// ConvLayer

ConvLayer ConvLayer::standard(const std::string& name, std::size_t cin, std::size_t cout, int kernel, int dilation,
                              std::mt19937_64& rng) {
  const auto k = static_cast<std::size_t>(kernel);
  StandardConv conv{{name + ".weight", Tensor(Shape{cout, cin, k, k})}, {name + ".bias", Tensor(Shape{cout})}};
  const double bound = std::sqrt(6.0 / static_cast<double>(cin * k * k));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (auto& v : conv.weight.value.data()) v = u(rng);
  return ConvLayer(name, dilation, std::move(conv));
}

ConvLayer ConvLayer::hyper(const std::string& name, const HyperNetSpec& spec, int dilation, std::mt19937_64& rng) {
  return ConvLayer(name, dilation, init_hyperconv(spec, rng, name));
}

ConvLayer ConvLayer::from_kernel(const std::string& name, Tensor kernel, Tensor bias, int dilation) {
  require_rank(kernel, 4, "from_kernel");
  require_shape(bias, Shape{kernel.dim(0)}, "from_kernel bias");
  return ConvLayer(name, dilation, StandardConv{{name + ".weight", std::move(kernel)}, {name + ".bias", std::move(bias)}});
}

int ConvLayer::kernel_size() const {
  if (const auto* h = std::get_if<HyperConvLayer>(&impl_)) return h->spec().kernel_h;
  return static_cast<int>(std::get<StandardConv>(impl_).weight.value.dim(2));
}

std::size_t ConvLayer::in_channels() const {
  if (const auto* h = std::get_if<HyperConvLayer>(&impl_)) return h->spec().in_channels;
  return std::get<StandardConv>(impl_).weight.value.dim(1);
}

std::size_t ConvLayer::out_channels() const {
  if (const auto* h = std::get_if<HyperConvLayer>(&impl_)) return h->spec().out_channels;
  return std::get<StandardConv>(impl_).weight.value.dim(0);
}

ad::Var ConvLayer::forward(ad::Graph& g, ad::Var x) {
  if (auto* h = std::get_if<HyperConvLayer>(&impl_)) return h->forward(g, x, dilation_);
  auto& c = std::get<StandardConv>(impl_);
  const auto& xv = g.value(x);
  require_rank(xv, 4, name_.c_str());
  if (xv.dim(1) != c.weight.value.dim(1))
    throw ShapeError(name_ + ": expects " + std::to_string(c.weight.value.dim(1)) + " input channels, got " +
                     std::to_string(xv.dim(1)));
  return ad::conv2d(g, x, g.parameter(c.weight), g.parameter(c.bias), dilation_);
}

Tensor ConvLayer::kernel() const {
  if (const auto* h = std::get_if<HyperConvLayer>(&impl_)) return generate_kernel(*h);
  return std::get<StandardConv>(impl_).weight.value;
}

const Tensor& ConvLayer::bias() const {
  if (const auto* h = std::get_if<HyperConvLayer>(&impl_)) return h->out_bias.value;
  return std::get<StandardConv>(impl_).bias.value;
}

std::vector<ad::Parameter*> ConvLayer::parameters() {
  if (auto* h = std::get_if<HyperConvLayer>(&impl_)) return h->parameters();
  auto& c = std::get<StandardConv>(impl_);
  return {&c.weight, &c.bias};
}

std::vector<const ad::Parameter*> ConvLayer::parameters() const {
  if (const auto* h = std::get_if<HyperConvLayer>(&impl_)) return h->parameters();
  const auto& c = std::get<StandardConv>(impl_);
  return {&c.weight, &c.bias};
}

std::size_t ConvLayer::param_count() const {
  std::size_t n = 0;
  for (const auto* p : parameters()) n += p->value.size();
  return n;
}

// ---------------------------------------------------------------------------
// Builders

namespace {

NormLayer make_norm(const std::string& name, std::size_t channels) {
  return NormLayer{{name + ".gamma", Tensor(Shape{channels}, 1.0)},
                   {name + ".beta", Tensor(Shape{channels}, 0.0)},
                   BatchNormState(channels)};
}

ConvLayer make_conv(const ArchitectureSpec& spec, const std::string& name, std::size_t cin, std::size_t cout,
                    int kernel, int dilation, std::mt19937_64& rng) {
  if (spec.conv_kind == ConvKind::Standard) return ConvLayer::standard(name, cin, cout, kernel, dilation, rng);
  HyperNetSpec h = spec.hyper;
  h.in_channels = cin;
  h.out_channels = cout;
  // Dilated kernels become dense kernels covering the same extent.
  const int dense = dilation * (kernel - 1) + 1;
  h.kernel_h = h.kernel_w = dense;
  return ConvLayer::hyper(name, h, 1, rng);
}

}  // namespace

Network build_unet(const ArchitectureSpec& spec, std::mt19937_64& rng) {
  spec.validate();
  if (spec.backbone != Backbone::UNet) throw std::invalid_argument("build_unet: spec backbone is not unet");
  Network net(spec);
  const int P = spec.num_pools;
  const int n = spec.convs_per_block;
  auto width = [&](int s) { return spec.init_channels << s; };
  auto add = [&](const std::string& name, std::size_t cin, std::size_t cout) {
    net.convs_.push_back(make_conv(spec, name, cin, cout, spec.kernel_size, 1, rng));
    net.norms_.push_back(make_norm(name + ".norm", cout));
  };

  std::size_t cin = spec.in_channels;
  for (int s = 0; s <= P; ++s) {
    const auto prefix = (s < P ? "enc" + std::to_string(s) : std::string("bottleneck"));
    for (int i = 0; i < n; ++i) {
      add(prefix + ".conv" + std::to_string(i), cin, width(s));
      cin = width(s);
    }
  }
  // Decoder: upsample, concat with the skip, first conv back to the skip
  // width, last conv down to the next finer width.
  for (int s = P - 1; s >= 0; --s) {
    const auto prefix = "dec" + std::to_string(s);
    const std::size_t out = s > 0 ? width(s - 1) : width(0);
    for (int i = 0; i < n; ++i) {
      const std::size_t in = i == 0 ? width(s) + cin : width(s);
      const std::size_t o = i == n - 1 ? out : width(s);
      add(prefix + ".conv" + std::to_string(i), in, o);
    }
    cin = out;
  }
  net.final_.push_back(ConvLayer::standard("final", cin, spec.out_classes, 1, 1, rng));
  return net;
}

Network build_flat_cnn(const ArchitectureSpec& spec, std::mt19937_64& rng) {
  spec.validate();
  if (spec.backbone != Backbone::Flat) throw std::invalid_argument("build_flat_cnn: spec backbone is not flat");
  Network net(spec);
  std::size_t cin = spec.in_channels;
  for (std::size_t b = 0; b < spec.flat_channels.size(); ++b) {
    const auto prefix = "block" + std::to_string(b);
    const auto width = spec.flat_channels[b];
    const int dilation = spec.flat_dilations[b];
    if (cin != width) {
      net.projection_of_block_.push_back(static_cast<int>(net.projections_.size()));
      net.projections_.push_back(ConvLayer::standard(prefix + ".shortcut", cin, width, 1, 1, rng));
    } else {
      net.projection_of_block_.push_back(-1);
    }
    for (int i = 0; i < spec.convs_per_block; ++i) {
      const auto name = prefix + ".conv" + std::to_string(i);
      net.convs_.push_back(make_conv(spec, name, i == 0 ? cin : width, width, spec.kernel_size, dilation, rng));
      net.norms_.push_back(make_norm(name + ".norm", width));
    }
    cin = width;
  }
  net.final_.push_back(ConvLayer::standard("final", cin, spec.out_classes, 1, 1, rng));
  return net;
}

Network build_network(const ArchitectureSpec& spec, std::mt19937_64& rng) {
  return spec.backbone == Backbone::UNet ? build_unet(spec, rng) : build_flat_cnn(spec, rng);
}

// ---------------------------------------------------------------------------
// Network

ad::Var Network::conv_norm(ad::Graph& g, ad::Var x, std::size_t index, Mode mode, bool activate) {
  auto& norm = norms_[index];
  x = convs_[index].forward(g, x);
  x = ad::batchnorm2d(g, x, g.parameter(norm.gamma), g.parameter(norm.beta), norm.state, mode);
  return activate ? ad::relu(g, x) : x;
}

void Network::set_dropout(double p) {
  if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("dropout_p must lie in [0, 1)");
  spec_.dropout_p = p;
}

ad::Var Network::forward(ad::Graph& g, ad::Var input, Mode mode, std::mt19937_64& rng) {
  const auto& x = g.value(input);
  require_rank(x, 4, "network input");
  if (x.dim(1) != spec_.in_channels)
    throw ShapeError("network expects " + std::to_string(spec_.in_channels) + " input channels, got " +
                     std::to_string(x.dim(1)));
  ad::Var out = spec_.backbone == Backbone::UNet ? forward_unet(g, input, mode, rng) : forward_flat(g, input, mode);
  out = final_.front().forward(g, out);
  return ad::sigmoid(g, out);
}

ad::Var Network::forward_unet(ad::Graph& g, ad::Var x, Mode mode, std::mt19937_64& rng) {
  const int P = spec_.num_pools;
  const auto div = std::size_t{1} << P;
  const auto& xv = g.value(x);
  if (xv.dim(2) % div || xv.dim(3) % div)
    throw ShapeError("unet input " + shape_str(xv.shape()) + ": spatial size must be divisible by " +
                     std::to_string(div));
  const auto n = static_cast<std::size_t>(spec_.convs_per_block);
  std::size_t k = 0;
  std::vector<ad::Var> skips;
  for (int s = 0; s < P; ++s) {
    for (std::size_t i = 0; i < n; ++i) x = conv_norm(g, x, k++, mode, true);
    skips.push_back(x);
    x = ad::maxpool2(g, x);
  }
  for (std::size_t i = 0; i < n; ++i) x = conv_norm(g, x, k++, mode, true);
  x = ad::dropout(g, x, spec_.dropout_p, mode, rng);
  for (int s = P - 1; s >= 0; --s) {
    x = ad::upsample_nearest2(g, x);
    x = ad::concat_channels(g, skips[static_cast<std::size_t>(s)], x);
    for (std::size_t i = 0; i < n; ++i) x = conv_norm(g, x, k++, mode, true);
  }
  return x;
}

ad::Var Network::forward_flat(ad::Graph& g, ad::Var x, Mode mode) {
  const auto n = static_cast<std::size_t>(spec_.convs_per_block);
  std::size_t k = 0;
  for (std::size_t b = 0; b < spec_.flat_channels.size(); ++b) {
    const int proj = projection_of_block_[b];
    const ad::Var shortcut = proj >= 0 ? projections_[static_cast<std::size_t>(proj)].forward(g, x) : x;
    ad::Var h = x;
    for (std::size_t i = 0; i < n; ++i) h = conv_norm(g, h, k++, mode, i + 1 < n);
    x = ad::relu(g, ad::add(g, h, shortcut));
  }
  return x;
}

Tensor Network::predict(const Tensor& input) {
  ad::Graph g;
  std::mt19937_64 unused(0);
  return g.value(forward(g, g.constant(input), Mode::Eval, unused));
}

std::vector<ad::Parameter*> Network::parameters() {
  std::vector<ad::Parameter*> ps;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    for (auto* p : convs_[i].parameters()) ps.push_back(p);
    ps.push_back(&norms_[i].gamma);
    ps.push_back(&norms_[i].beta);
  }
  for (auto& proj : projections_)
    for (auto* p : proj.parameters()) ps.push_back(p);
  for (auto* p : final_.front().parameters()) ps.push_back(p);
  return ps;
}

std::size_t Network::param_count() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < convs_.size(); ++i)
    n += convs_[i].param_count() + norms_[i].gamma.value.size() + norms_[i].beta.value.size();
  for (const auto& proj : projections_) n += proj.param_count();
  return n + final_.front().param_count();
}

std::size_t param_count(const Network& net) { return net.param_count(); }

Network Network::materialized() const {
  Network copy = *this;
  for (auto& conv : copy.convs_)
    if (conv.is_hyper()) conv = ConvLayer::from_kernel(conv.name(), conv.kernel(), conv.bias(), conv.dilation());
  return copy;
}

std::vector<NamedTensor> Network::state() const {
  std::vector<NamedTensor> out;
  auto add_conv = [&out](const ConvLayer& c) {
    for (const auto* p : c.parameters()) out.push_back({p->name, p->value});
  };
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    add_conv(convs_[i]);
    const auto& n = norms_[i];
    out.push_back({n.gamma.name, n.gamma.value});
    out.push_back({n.beta.name, n.beta.value});
    const auto base = n.gamma.name.substr(0, n.gamma.name.size() - std::string(".gamma").size());
    out.push_back({base + ".running_mean", n.state.running_mean});
    out.push_back({base + ".running_var", n.state.running_var});
  }
  for (const auto& p : projections_) add_conv(p);
  add_conv(final_.front());
  return out;
}

void Network::load_state(const std::vector<NamedTensor>& state) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& t : state) by_name[t.name] = &t.value;
  auto assign = [&by_name](const std::string& name, Tensor& dst) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint is missing tensor '" + name + "'");
    require_shape(*it->second, dst.shape(), name.c_str());
    dst = *it->second;
  };
  for (auto* p : parameters()) assign(p->name, p->value);
  for (auto& n : norms_) {
    const auto base = n.gamma.name.substr(0, n.gamma.name.size() - std::string(".gamma").size());
    assign(base + ".running_mean", n.state.running_mean);
    assign(base + ".running_var", n.state.running_var);
  }
}

// ---------------------------------------------------------------------------
// Receptive field

int receptive_field(const ArchitectureSpec& spec) {
  spec.validate();
  long rf = 1, jump = 1;
  auto conv = [&](int kernel, int dilation) { rf += static_cast<long>(dilation) * (kernel - 1) * jump; };
  if (spec.backbone == Backbone::UNet) {
    for (int s = 0; s <= spec.num_pools; ++s) {
      for (int i = 0; i < spec.convs_per_block; ++i) conv(spec.kernel_size, 1);
      if (s < spec.num_pools) {
        rf += jump;  // 2x2 pool, stride 2
        jump *= 2;
      }
    }
  } else {
    for (auto d : spec.flat_dilations)
      for (int i = 0; i < spec.convs_per_block; ++i) {
        if (spec.conv_kind == ConvKind::Hyper)
          conv(d * (spec.kernel_size - 1) + 1, 1);
        else
          conv(spec.kernel_size, d);
      }
  }
  return static_cast<int>(rf);
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const Network& net, const std::string& dir, DType dtype) {
  fs::create_directories(fs::path(dir) / "tensors");
  json manifest;
  manifest["spec"] = net.spec();
  manifest["dtype"] = dtype_name(dtype);
  manifest["tensors"] = json::array();
  for (const auto& t : net.state()) {
    save_tensor(fs::path(dir) / "tensors" / t.name, t.value, dtype);
    manifest["tensors"].push_back({{"name", t.name}, {"file", "tensors/" + t.name}});
  }
  std::ofstream out(fs::path(dir) / "manifest.json", std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint manifest in " + dir);
  out << manifest.dump(2) << '\n';
}

Network load_checkpoint(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw std::runtime_error("no checkpoint manifest in " + dir);
  json manifest;
  in >> manifest;
  const auto spec = manifest.at("spec").get<ArchitectureSpec>();
  std::mt19937_64 rng(0);
  Network net = build_network(spec, rng);
  std::vector<NamedTensor> state;
  for (const auto& entry : manifest.at("tensors"))
    state.push_back({entry.at("name").get<std::string>(), load_tensor(fs::path(dir) / entry.at("file").get<std::string>())});
  net.load_state(state);
  return net;
}

GradCheckReport check_network_gradients(Network& net, std::size_t size, double step, std::size_t per_param,
                                        std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto random = [&](Shape s) {
    Tensor t(std::move(s));
    for (auto& v : t.data()) v = gauss(rng);
    return t;
  };
  const double saved_p = net.spec().dropout_p;
  net.set_dropout(0.0);
  // Zero shifts put ReLU inputs of all-zero patches exactly on the kink.
  for (auto* p : net.parameters())
    if (p->name.ends_with("bias") || p->name.ends_with("beta"))
      for (auto& v : p->value.data()) v = 0.1 * gauss(rng);
  const std::size_t cin = net.spec().in_channels;
  const Tensor x = random(Shape{1, cin, size, size});
  const Tensor w = random(Shape{1, net.spec().out_classes, size, size});
  std::mt19937_64 drop(0);
  // Statistics of a single sample are degenerate at the coarsest level.
  const Tensor calib = random(Shape{8, cin, size, size});
  for (int i = 0; i < 60; ++i) {
    ad::Graph g;
    net.forward(g, g.constant(calib), Mode::Train, drop);
  }
  auto report = check_parameter_gradients(
      [&](ad::Graph& g) { return ad::weighted_sum(g, net.forward(g, g.constant(x), Mode::Eval, drop), w); },
      net.parameters(), step, per_param, rng, 1e-3);
  net.set_dropout(saved_p);
  return report;
}

}  // namespace hcl
