#include "hcl/hyperconv.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "hcl/ops.hpp"

namespace hcl {

CoordinateGrid make_coordinate_grid(int h, int w, bool normalized) {
  if (h < 1 || w < 1 || h % 2 == 0 || w % 2 == 0)
    throw std::invalid_argument("coordinate grid needs odd positive dimensions, got " + std::to_string(h) + "x" +
                                std::to_string(w));
  const auto H = static_cast<std::size_t>(h), W = static_cast<std::size_t>(w);
  CoordinateGrid grid{h, w, Tensor(Shape{2, H, W})};
  const int rh = (h - 1) / 2, rw = (w - 1) / 2;
  const double sh = normalized && rh > 0 ? 1.0 / rh : 1.0;
  const double sw = normalized && rw > 0 ? 1.0 / rw : 1.0;
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      grid.values[i * W + j] = (static_cast<int>(i) - rh) * sh;
      grid.values[H * W + i * W + j] = (static_cast<int>(j) - rw) * sw;
    }
  return grid;
}

void HyperNetSpec::validate() const {
  for (auto w : hidden_widths)
    if (w == 0) throw std::invalid_argument("hypernetwork hidden widths must be positive");
  if (last_width == 0) throw std::invalid_argument("hypernetwork N_L must be positive");
  if (in_channels == 0 || out_channels == 0) throw std::invalid_argument("hyperconv channel counts must be positive");
  if (kernel_h < 1 || kernel_w < 1 || kernel_h % 2 == 0 || kernel_w % 2 == 0)
    throw std::invalid_argument("hyperconv kernel dimensions must be odd and positive");
  if (leak_slope < 0) throw std::invalid_argument("leak slope must be non-negative");
}

std::size_t hyperconv_param_count(const HyperNetSpec& spec) {
  const auto widths = spec.layer_widths();
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) n += (widths[l] + 1) * widths[l + 1];
  n += (spec.last_width + 1) * spec.pairs();  // final projection
  n += spec.pairs();                           // pair offsets
  n += spec.out_channels;                      // output bias
  return n;
}

HyperConvLayer::HyperConvLayer(HyperNetSpec spec, const std::string& name) : spec_(spec) {
  spec_.validate();
  grid_ = make_coordinate_grid(spec_.kernel_h, spec_.kernel_w, spec_.normalized_coords);
  const auto widths = spec_.layer_widths();
  for (std::size_t l = 0; l < 4; ++l) {
    trunk_weights[l] = {name + ".trunk" + std::to_string(l) + ".weight", Tensor(Shape{widths[l], widths[l + 1]})};
    trunk_biases[l] = {name + ".trunk" + std::to_string(l) + ".bias", Tensor(Shape{widths[l + 1]})};
  }
  final_weight = {name + ".final.weight", Tensor(Shape{spec_.last_width, spec_.pairs()})};
  final_bias = {name + ".final.bias", Tensor(Shape{spec_.pairs()})};
  pair_offset = {name + ".pair_offset", Tensor(Shape{spec_.pairs()})};
  out_bias = {name + ".out_bias", Tensor(Shape{spec_.out_channels})};
}

std::vector<ad::Parameter*> HyperConvLayer::parameters() {
  std::vector<ad::Parameter*> ps;
  for (std::size_t l = 0; l < 4; ++l) {
    ps.push_back(&trunk_weights[l]);
    ps.push_back(&trunk_biases[l]);
  }
  ps.insert(ps.end(), {&final_weight, &final_bias, &pair_offset, &out_bias});
  return ps;
}

std::vector<const ad::Parameter*> HyperConvLayer::parameters() const {
  std::vector<const ad::Parameter*> ps;
  for (std::size_t l = 0; l < 4; ++l) {
    ps.push_back(&trunk_weights[l]);
    ps.push_back(&trunk_biases[l]);
  }
  ps.insert(ps.end(), {&final_weight, &final_bias, &pair_offset, &out_bias});
  return ps;
}

std::size_t HyperConvLayer::param_count() const {
  std::size_t n = 0;
  for (const auto* p : parameters()) n += p->value.size();
  return n;
}

namespace {

// [cells, Nout*Nin] network output -> [Nout, Nin, h, w] kernel.
ad::Var cells_to_kernel(ad::Graph& g, ad::Var cells, std::size_t nout, std::size_t nin, std::size_t h, std::size_t w) {
  const auto& v = g.value(cells);
  const std::size_t P = h * w, Q = nout * nin;
  Tensor k(Shape{nout, nin, h, w});
  for (std::size_t cell = 0; cell < P; ++cell)
    for (std::size_t q = 0; q < Q; ++q) k[q * P + cell] = v[cell * Q + q];
  return g.record("cells_to_kernel", {cells}, std::move(k), [P, Q](const ad::Graph&, std::size_t, const Tensor& go) {
    Tensor gc(Shape{P, Q});
    for (std::size_t cell = 0; cell < P; ++cell)
      for (std::size_t q = 0; q < Q; ++q) gc[cell * Q + q] = go[q * P + cell];
    return std::vector<Tensor>{std::move(gc)};
  });
}

// Runs the coordinate network over every grid cell. `leaf` turns a layer
// parameter into a graph node (trainable or constant).
template <typename Layer, typename Leaf>
ad::Var build_kernel(ad::Graph& g, Layer& layer, const CoordinateGrid& grid, Leaf&& leaf) {
  const auto& spec = layer.spec();
  const std::size_t P = grid.cells();
  Tensor coords(Shape{P, 2});
  for (std::size_t cell = 0; cell < P; ++cell) {
    coords[cell * 2] = grid.values[cell];
    coords[cell * 2 + 1] = grid.values[P + cell];
  }
  ad::Var h = g.constant(std::move(coords));
  for (std::size_t l = 0; l < 4; ++l) {
    h = ad::linear(g, h, leaf(layer.trunk_weights[l]), leaf(layer.trunk_biases[l]));
    h = ad::leaky_relu(g, h, spec.leak_slope);
  }
  h = ad::linear(g, h, leaf(layer.final_weight), leaf(layer.final_bias));
  h = ad::add_row(g, h, leaf(layer.pair_offset));
  return cells_to_kernel(g, h, spec.out_channels, spec.in_channels, static_cast<std::size_t>(grid.height),
                         static_cast<std::size_t>(grid.width));
}

void check_grid(const HyperNetSpec& spec, const CoordinateGrid& grid) {
  if (grid.height != spec.kernel_h || grid.width != spec.kernel_w)
    throw std::invalid_argument("generate_kernel: grid " + std::to_string(grid.height) + "x" +
                                std::to_string(grid.width) + " does not match layer kernel " +
                                std::to_string(spec.kernel_h) + "x" + std::to_string(spec.kernel_w));
}

}  // namespace

ad::Var HyperConvLayer::evaluate(ad::Graph& g, const CoordinateGrid& grid) {
  return build_kernel(g, *this, grid, [&g](ad::Parameter& p) { return g.parameter(p); });
}

ad::Var HyperConvLayer::generate_kernel(ad::Graph& g, const CoordinateGrid& grid) {
  check_grid(spec_, grid);
  return evaluate(g, grid);
}

ad::Var HyperConvLayer::forward(ad::Graph& g, ad::Var input, int dilation) {
  const auto& x = g.value(input);
  require_rank(x, 4, "hyperconv input");
  if (x.dim(1) != spec_.in_channels)
    throw ShapeError("hyperconv: layer expects " + std::to_string(spec_.in_channels) + " input channels, got " +
                     std::to_string(x.dim(1)));
  const auto kernel = generate_kernel(g);
  return ad::conv2d(g, input, kernel, g.parameter(out_bias), dilation);
}

Tensor trunk_features(const HyperConvLayer& layer, const CoordinateGrid& grid) {
  const auto widths = layer.spec().layer_widths();
  const std::size_t P = grid.cells();
  Tensor out(Shape{P, widths[4]});
  for (std::size_t cell = 0; cell < P; ++cell) {
    std::vector<double> h{grid.values[cell], grid.values[P + cell]};
    for (std::size_t l = 0; l < 4; ++l) {
      const auto& W = layer.trunk_weights[l].value;
      std::vector<double> next(widths[l + 1]);
      for (std::size_t o = 0; o < next.size(); ++o) {
        double z = layer.trunk_biases[l].value[o];
        for (std::size_t i = 0; i < h.size(); ++i) z += h[i] * W[i * next.size() + o];
        next[o] = z >= 0 ? z : layer.spec().leak_slope * z;
      }
      h = std::move(next);
    }
    std::copy(h.begin(), h.end(), out.ptr() + cell * widths[4]);
  }
  return out;
}

Tensor evaluate_kernel_function(const HyperConvLayer& layer, const CoordinateGrid& grid) {
  ad::Graph g;
  return g.value(build_kernel(g, layer, grid, [&g](const ad::Parameter& p) { return g.constant(p.value); }));
}

Tensor generate_kernel(const HyperConvLayer& layer, const CoordinateGrid& grid) {
  check_grid(layer.spec(), grid);
  return evaluate_kernel_function(layer, grid);
}

Tensor generate_kernel(const HyperConvLayer& layer) { return generate_kernel(layer, layer.grid()); }

Tensor hyperconv_forward(const HyperConvLayer& layer, const Tensor& input, int dilation) {
  require_rank(input, 4, "hyperconv input");
  if (input.dim(1) != layer.spec().in_channels)
    throw ShapeError("hyperconv: layer expects " + std::to_string(layer.spec().in_channels) +
                     " input channels, got " + std::to_string(input.dim(1)));
  return conv2d(input, generate_kernel(layer), layer.out_bias.value, dilation);
}

HyperConvLayer init_hyperconv(const HyperNetSpec& spec, std::mt19937_64& rng, const std::string& name) {
  HyperConvLayer layer(spec, name);
  const auto widths = spec.layer_widths();
  const double gain = 2.0 / (1.0 + spec.leak_slope * spec.leak_slope);
  for (std::size_t l = 0; l < 4; ++l) {
    const double fan_in = static_cast<double>(widths[l]);
    std::uniform_real_distribution<double> w(-std::sqrt(3.0 * gain / fan_in), std::sqrt(3.0 * gain / fan_in));
    std::uniform_real_distribution<double> b(-1.0 / std::sqrt(fan_in), 1.0 / std::sqrt(fan_in));
    for (auto& v : layer.trunk_weights[l].value.data()) v = w(rng);
    for (auto& v : layer.trunk_biases[l].value.data()) v = b(rng);
  }
  // Mean square of the last trunk features over the grid, so that the
  // generated kernel variance comes out at 2/fan_in.
  const auto& grid = layer.grid();
  const Tensor feats = trunk_features(layer, grid);
  double m2 = 0;
  for (double v : feats.data()) m2 += v * v;
  m2 /= static_cast<double>(grid.cells() * spec.last_width);
  const double var = 2.0 / (static_cast<double>(spec.last_width * static_cast<std::size_t>(spec.kernel_h) *
                                                static_cast<std::size_t>(spec.kernel_w) * spec.in_channels) *
                            std::max(m2, 1e-12));
  std::uniform_real_distribution<double> f(-std::sqrt(3.0 * var), std::sqrt(3.0 * var));
  for (auto& v : layer.final_weight.value.data()) v = f(rng);
  return layer;
}

}  // namespace hcl
