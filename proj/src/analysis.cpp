#include "hcl/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <stdexcept>

#include <Eigen/Dense>

#include "hcl/ops.hpp"
#include "hcl/serialize.hpp"
#include "hcl/training.hpp"

namespace hcl {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

double stencil(const double* k, std::size_t w, std::size_t i, std::size_t j) {
  return k[(i - 1) * w + j] + k[(i + 1) * w + j] + k[i * w + j - 1] + k[i * w + j + 1] - 4.0 * k[i * w + j];
}

double slice_laplacian(const double* k, std::size_t h, std::size_t w) {
  double s = 0;
  for (std::size_t i = 1; i + 1 < h; ++i)
    for (std::size_t j = 1; j + 1 < w; ++j) s += std::abs(stencil(k, w, i, j));
  return s / static_cast<double>((h - 2) * (w - 2));
}

void write_pgm(const fs::path& path, std::size_t width, std::size_t height, const std::vector<unsigned char>& px) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P5\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
}

// Up to 8 slices (out = 0.., in = 0) side by side, kernel row on top and the
// Laplacian map below, each scaled symmetrically around mid gray.
void write_layer_mosaic(const fs::path& path, const Tensor& kernel) {
  constexpr std::size_t zoom = 8, gap = 2;
  const std::size_t cout = kernel.dim(0), cin = kernel.dim(1), h = kernel.dim(2), w = kernel.dim(3);
  const std::size_t count = std::min<std::size_t>(cout, 8);
  std::vector<std::vector<double>> kern(count), lap(count);
  double kmax = 1e-12, lmax = 1e-12;
  for (std::size_t q = 0; q < count; ++q) {
    const double* k = kernel.ptr() + q * cin * h * w;
    kern[q].assign(k, k + h * w);
    lap[q].assign(h * w, 0.0);
    for (std::size_t i = 1; i + 1 < h; ++i)
      for (std::size_t j = 1; j + 1 < w; ++j) lap[q][i * w + j] = stencil(k, w, i, j);
    for (double v : kern[q]) kmax = std::max(kmax, std::abs(v));
    for (double v : lap[q]) lmax = std::max(lmax, std::abs(v));
  }
  const std::size_t cell_w = w * zoom, cell_h = h * zoom;
  const std::size_t W = count * cell_w + (count + 1) * gap, H = 2 * cell_h + 3 * gap;
  std::vector<unsigned char> px(W * H, 0);
  auto paint = [&](const std::vector<double>& v, double vmax, std::size_t ox, std::size_t oy) {
    for (std::size_t y = 0; y < cell_h; ++y)
      for (std::size_t x = 0; x < cell_w; ++x) {
        const double val = v[(y / zoom) * w + x / zoom] / vmax;
        px[(oy + y) * W + ox + x] = static_cast<unsigned char>(std::lround(127.5 + 127.0 * std::clamp(val, -1.0, 1.0)));
      }
  };
  for (std::size_t q = 0; q < count; ++q) {
    const std::size_t ox = gap + q * (cell_w + gap);
    paint(kern[q], kmax, ox, gap);
    paint(lap[q], lmax, ox, 2 * gap + cell_h);
  }
  write_pgm(path, W, H, px);
}

std::string file_stem(const std::string& layer) {
  std::string s = layer;
  std::replace(s.begin(), s.end(), '/', '_');
  return s;
}

}  // namespace

double kernel_laplacian(const Tensor& k) {
  require_rank(k, 2, "kernel_laplacian input");
  if (k.dim(0) < 3 || k.dim(1) < 3)
    throw ShapeError("kernel_laplacian needs a kernel of at least 3x3, got " + shape_str(k.shape()));
  return slice_laplacian(k.ptr(), k.dim(0), k.dim(1));
}

std::vector<double> slice_laplacians(const Tensor& kernel) {
  require_rank(kernel, 4, "kernel");
  const std::size_t h = kernel.dim(2), w = kernel.dim(3);
  if (h < 3 || w < 3) throw ShapeError("Laplacian needs kernels of at least 3x3, got " + shape_str(kernel.shape()));
  const std::size_t slices = kernel.dim(0) * kernel.dim(1);
  std::vector<double> out(slices);
  for (std::size_t s = 0; s < slices; ++s) out[s] = slice_laplacian(kernel.ptr() + s * h * w, h, w);
  return out;
}

KernelReport network_kernel_report(const Network& net) {
  KernelReport r;
  for (const auto& conv : net.convs()) {
    LayerKernelStats st;
    st.name = conv.name();
    st.hyper = conv.is_hyper();
    st.dilation = conv.dilation();
    Tensor k = conv.kernel();
    st.kernel_shape = k.shape();
    st.slice_laplacians = slice_laplacians(k);
    double s = 0;
    for (double v : st.slice_laplacians) s += v;
    st.mean_abs_laplacian = s / static_cast<double>(st.slice_laplacians.size());
    r.network_mean += st.mean_abs_laplacian;
    r.layers.push_back(std::move(st));
    r.kernels.push_back(std::move(k));
  }
  if (!r.layers.empty()) r.network_mean /= static_cast<double>(r.layers.size());
  return r;
}

json to_json(const KernelReport& report) {
  json layers = json::array();
  for (const auto& l : report.layers)
    layers.push_back({{"name", l.name},
                      {"kind", l.hyper ? "hyper" : "standard"},
                      {"dilation", l.dilation},
                      {"kernel_shape", l.kernel_shape},
                      {"mean_abs_laplacian", l.mean_abs_laplacian}});
  return json{{"layers", layers}, {"network_mean_abs_laplacian", report.network_mean}};
}

void write_kernel_report(const KernelReport& report, const fs::path& dir, bool images) {
  fs::create_directories(dir / "kernels");
  fs::create_directories(dir / "csv");
  if (images) fs::create_directories(dir / "images");
  {
    std::ofstream out(dir / "report.json", std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + (dir / "report.json").string());
    out << to_json(report).dump(2) << '\n';
  }
  for (std::size_t i = 0; i < report.layers.size(); ++i) {
    const auto& layer = report.layers[i];
    const auto& k = report.kernels[i];
    const auto stem = file_stem(layer.name);
    save_tensor(dir / "kernels" / stem, k, DType::F64);

    std::ofstream csv(dir / "csv" / (stem + ".csv"), std::ios::trunc);
    if (!csv) throw std::runtime_error("cannot write CSV for layer " + layer.name);
    const std::size_t cin = k.dim(1), hw = k.dim(2) * k.dim(3);
    csv << "out,in,laplacian";
    for (std::size_t r = 0; r < k.dim(2); ++r)
      for (std::size_t c = 0; c < k.dim(3); ++c) csv << ",k" << r << '_' << c;
    csv << '\n' << std::setprecision(10);
    for (std::size_t s = 0; s < layer.slice_laplacians.size(); ++s) {
      csv << s / cin << ',' << s % cin << ',' << layer.slice_laplacians[s];
      for (std::size_t e = 0; e < hw; ++e) csv << ',' << k[s * hw + e];
      csv << '\n';
    }
    if (images) write_layer_mosaic(dir / "images" / (stem + ".pgm"), k);
  }
}

Tensor smoothed_random_kernels(std::size_t cout, std::size_t cin, int k, double sigma, std::mt19937_64& rng) {
  if (k < 1 || k % 2 == 0) throw std::invalid_argument("kernel size must be a positive odd number");
  if (!(sigma > 0)) throw std::invalid_argument("smoothing sigma must be positive");
  const int radius = static_cast<int>(std::ceil(3 * sigma));
  const int field = k + 2 * radius;
  std::vector<double> taps(static_cast<std::size_t>(2 * radius + 1));
  for (int t = -radius; t <= radius; ++t) taps[static_cast<std::size_t>(t + radius)] = std::exp(-0.5 * t * t / (sigma * sigma));
  std::normal_distribution<double> gauss(0.0, 1.0);
  const std::size_t kk = static_cast<std::size_t>(k);
  Tensor out(Shape{cout, cin, kk, kk});
  std::vector<double> noise(static_cast<std::size_t>(field * field));
  for (std::size_t s = 0; s < cout * cin; ++s) {
    for (auto& v : noise) v = gauss(rng);
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < k; ++j) {
        double acc = 0;
        for (int a = -radius; a <= radius; ++a)
          for (int b = -radius; b <= radius; ++b)
            acc += taps[static_cast<std::size_t>(a + radius)] * taps[static_cast<std::size_t>(b + radius)] *
                   noise[static_cast<std::size_t>((i + radius + a) * field + (j + radius + b))];
        out[s * kk * kk + static_cast<std::size_t>(i) * kk + static_cast<std::size_t>(j)] = acc;
      }
  }
  double mean = 0, var = 0;
  for (double v : out.data()) mean += v;
  mean /= static_cast<double>(out.size());
  for (double v : out.data()) var += (v - mean) * (v - mean);
  var /= static_cast<double>(out.size());
  const double scale = 1.0 / std::sqrt(var + 1e-300);
  for (auto& v : out.data()) v *= scale;
  return out;
}

namespace {

// Exact least-squares fit of the linear output layer to the target on the
// current trunk features. pair_offset is folded into final_bias.
void solve_output_layer(HyperConvLayer& layer, const Tensor& target) {
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Tensor feats = trunk_features(layer, layer.grid());
  const auto P = static_cast<Eigen::Index>(feats.dim(0)), L = static_cast<Eigen::Index>(feats.dim(1));
  const auto pairs = static_cast<Eigen::Index>(layer.spec().pairs());
  Mat A(P, L + 1), T(P, pairs);
  for (Eigen::Index c = 0; c < P; ++c) {
    for (Eigen::Index l = 0; l < L; ++l) A(c, l) = feats[static_cast<std::size_t>(c * L + l)];
    A(c, L) = 1.0;
    for (Eigen::Index q = 0; q < pairs; ++q) T(c, q) = target[static_cast<std::size_t>(q * P + c)];
  }
  const Mat beta = A.completeOrthogonalDecomposition().solve(T);
  for (Eigen::Index l = 0; l < L; ++l)
    for (Eigen::Index q = 0; q < pairs; ++q) layer.final_weight.value[static_cast<std::size_t>(l * pairs + q)] = beta(l, q);
  for (Eigen::Index q = 0; q < pairs; ++q) layer.final_bias.value[static_cast<std::size_t>(q)] = beta(L, q);
  layer.pair_offset.value.fill(0.0);
}

}  // namespace

ReconstructResult reconstruct_kernel(const Tensor& target, const ReconstructConfig& cfg) {
  require_rank(target, 4, "reconstruction target");
  if (target.dim(2) != target.dim(3)) throw ShapeError("reconstruction target kernels must be square");
  if (cfg.steps < 1) throw std::invalid_argument("reconstruction needs at least one step");
  if (!(cfg.learning_rate > 0)) throw std::invalid_argument("reconstruction learning rate must be positive");
  HyperNetSpec spec;
  spec.last_width = cfg.last_width;
  spec.out_channels = target.dim(0);
  spec.in_channels = target.dim(1);
  spec.kernel_h = spec.kernel_w = static_cast<int>(target.dim(2));
  std::mt19937_64 rng(cfg.seed);
  ReconstructResult r{init_hyperconv(spec, rng, "reconstruct"), 0.0, 0.0};

  PrecisionScope scope(Precision::F64);
  // Adam moves the trunk; the linear output layer is re-solved exactly before
  // every step.
  AdamState adam;
  std::vector<ad::Parameter*> params;
  for (auto& p : r.layer.trunk_weights) params.push_back(&p);
  for (auto& p : r.layer.trunk_biases) params.push_back(&p);
  for (int step = 0; step < cfg.steps; ++step) {
    solve_output_layer(r.layer, target);
    ad::Graph g;
    const ad::Var loss = ad::mse(g, r.layer.generate_kernel(g), target);
    const auto grads = g.backprop(loss);
    const double t = static_cast<double>(step) / static_cast<double>(cfg.steps);
    adam_step(params, grads, adam, cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * t)));
  }
  solve_output_layer(r.layer, target);
  const Tensor fitted = generate_kernel(r.layer);
  double mse = 0, mean = 0, var = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double d = fitted[i] - target[i];
    mse += d * d;
    mean += target[i];
  }
  mse /= static_cast<double>(target.size());
  mean /= static_cast<double>(target.size());
  for (double v : target.data()) var += (v - mean) * (v - mean);
  var /= static_cast<double>(target.size());
  if (!std::isfinite(mse)) throw NumericalError("kernel reconstruction diverged");
  r.final_mse = mse;
  r.relative_mse = var > 0 ? mse / var : mse;
  return r;
}

}  // namespace hcl
