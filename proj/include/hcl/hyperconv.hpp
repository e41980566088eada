#pragma once

#include <array>
#include <cstddef>
#include <random>
#include <vector>

#include "hcl/autodiff.hpp"
#include "hcl/tensor.hpp"

namespace hcl {

/// Two-channel grid of kernel offsets: channel 0 holds the row offset,
/// channel 1 the column offset, and the center cell is (0,0).
struct CoordinateGrid {
  int height = 1;
  int width = 1;
  Tensor values;  // [2,h,w]

  std::size_t cells() const noexcept { return static_cast<std::size_t>(height) * static_cast<std::size_t>(width); }
};

/// Integer offsets in {-(h-1)/2..(h-1)/2} x {-(w-1)/2..(w-1)/2}. With
/// `normalized`, offsets are divided by their half-extent so they span [-1,1].
CoordinateGrid make_coordinate_grid(int h, int w, bool normalized = false);

/// Shape of the coordinate network that generates one layer's kernels:
/// 2 -> N1 -> N2 -> N3 -> N_L (leaky ReLU after each) -> Nin*Nout (linear).
struct HyperNetSpec {
  std::array<std::size_t, 3> hidden_widths{16, 16, 16};
  std::size_t last_width = 4;  // N_L
  double leak_slope = 0.1;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  int kernel_h = 3;
  int kernel_w = 3;
  bool normalized_coords = false;

  std::array<std::size_t, 5> layer_widths() const {
    return {2, hidden_widths[0], hidden_widths[1], hidden_widths[2], last_width};
  }
  std::size_t pairs() const noexcept { return in_channels * out_channels; }
  void validate() const;
};

/// Learnable scalars of one hyper-convolution. Does not depend on kernel_h or kernel_w.
std::size_t hyperconv_param_count(const HyperNetSpec& spec);

class HyperConvLayer {
public:
  /// All parameters zero.
  explicit HyperConvLayer(HyperNetSpec spec, const std::string& name = "hyper");

  const HyperNetSpec& spec() const noexcept { return spec_; }
  const CoordinateGrid& grid() const noexcept { return grid_; }

  std::array<ad::Parameter, 4> trunk_weights;  // [fan_in, fan_out]
  std::array<ad::Parameter, 4> trunk_biases;
  ad::Parameter final_weight;  // [N_L, Nin*Nout]
  ad::Parameter final_bias;    // [Nin*Nout]
  ad::Parameter pair_offset;   // [Nin*Nout], one scalar per (in,out) kernel slice
  ad::Parameter out_bias;      // [Nout]

  std::vector<ad::Parameter*> parameters();
  std::vector<const ad::Parameter*> parameters() const;
  std::size_t param_count() const;

  /// Evaluates the coordinate network on an arbitrary grid. Output is
  /// [Nout, Nin, grid.height, grid.width]; column q*Nin+c of the network output
  /// becomes kernel slice [q, c].
  ad::Var evaluate(ad::Graph& g, const CoordinateGrid& grid);
  /// Kernel for the layer's own geometry (grid must match kernel_h x kernel_w).
  ad::Var generate_kernel(ad::Graph& g, const CoordinateGrid& grid);
  ad::Var generate_kernel(ad::Graph& g) { return generate_kernel(g, grid_); }

  /// conv2d(input, generate_kernel(), out_bias, dilation).
  ad::Var forward(ad::Graph& g, ad::Var input, int dilation = 1);

private:
  HyperNetSpec spec_;
  CoordinateGrid grid_;
};

/// Last hidden layer of the coordinate network, one row per grid cell: [cells, N_L].
Tensor trunk_features(const HyperConvLayer& layer, const CoordinateGrid& grid);
/// Coordinate network evaluated on any grid, without a persistent graph.
Tensor evaluate_kernel_function(const HyperConvLayer& layer, const CoordinateGrid& grid);
/// Materialized kernel; the grid must match the layer geometry.
Tensor generate_kernel(const HyperConvLayer& layer, const CoordinateGrid& grid);
Tensor generate_kernel(const HyperConvLayer& layer);

Tensor hyperconv_forward(const HyperConvLayer& layer, const Tensor& input, int dilation = 1);

/// Trunk: fan-in scaled (He) uniform weights, uniform biases in +-1/sqrt(fan_in).
/// Final projection: uniform with variance 2/(N_L*h*w*Nin*m2), where m2 is the
/// mean square of the last trunk features over the grid, so generated
/// kernels start near the scale of a fan-in initialized kernel. Biases,
/// pair offsets and output bias start at zero.
HyperConvLayer init_hyperconv(const HyperNetSpec& spec, std::mt19937_64& rng, const std::string& name = "hyper");

}  // namespace hcl
