#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "hcl/hyperconv.hpp"
#include "hcl/nets.hpp"
#include "hcl/tensor.hpp"
#include "json.hpp"

namespace hcl {

/// Mean absolute 5-point Laplacian over the interior cells of a 2-D kernel
/// [h,w] (h,w >= 3). Border cells are not evaluated.
double kernel_laplacian(const Tensor& kernel2d);
/// Laplacian of every [out,in] slice of a [Cout,Cin,h,w] kernel, row-major.
std::vector<double> slice_laplacians(const Tensor& kernel);

struct LayerKernelStats {
  std::string name;
  bool hyper = false;
  int dilation = 1;
  Shape kernel_shape;
  double mean_abs_laplacian = 0.0;  // mean over the layer's slices
  std::vector<double> slice_laplacians;
};

struct KernelReport {
  std::vector<LayerKernelStats> layers;
  std::vector<Tensor> kernels;  // materialized, parallel to layers
  double network_mean = 0.0;    // mean of per-layer means
};

/// Covers every spatial convolution of the network (1x1 projections and the
/// final layer are excluded).
KernelReport network_kernel_report(const Network& net);
nlohmann::json to_json(const KernelReport& report);

/// Writes report.json, one tensor per layer under kernels/, one CSV per layer
/// under csv/ (a row per slice: out, in, laplacian, then the kernel values
/// row-major) and, when `images` is set, PGM mosaics of the first slices and
/// their Laplacian maps under images/.
void write_kernel_report(const KernelReport& report, const std::filesystem::path& dir, bool images);

/// Target kernels [Cout,Cin,k,k]: white noise smoothed by a Gaussian of the
/// given width, computed on a padded field so the crop is smooth everywhere,
/// then scaled to unit variance.
Tensor smoothed_random_kernels(std::size_t cout, std::size_t cin, int k, double sigma, std::mt19937_64& rng);

struct ReconstructConfig {
  std::size_t last_width = 4;  // N_L
  int steps = 5000;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

struct ReconstructResult {
  HyperConvLayer layer;
  double final_mse = 0.0;
  double relative_mse = 0.0;  // final_mse / variance of the target
};

/// Fits a freshly initialized hyper-convolution to a fixed kernel by Adam on
/// the mean squared error between generated and target kernel. The learning
/// rate follows a cosine decay to zero over the steps.
ReconstructResult reconstruct_kernel(const Tensor& target, const ReconstructConfig& cfg);

}  // namespace hcl
