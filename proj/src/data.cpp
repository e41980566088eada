#include "hcl/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "hcl/serialize.hpp"

namespace hcl {
namespace fs = std::filesystem;
using nlohmann::json;

void SyntheticDataConfig::validate() const {
  if (image_size < 8) throw std::invalid_argument("image_size must be at least 8");
  if (lesion_count_min < 1 || lesion_count_max < lesion_count_min)
    throw std::invalid_argument("lesion count range must satisfy 1 <= min <= max");
  if (lesion_radius_min <= 0 || lesion_radius_max < lesion_radius_min)
    throw std::invalid_argument("lesion radius range must satisfy 0 < min <= max");
  if (2.0 * lesion_radius_max >= static_cast<double>(image_size))
    throw std::invalid_argument("lesion radii must stay below image_size / 2");
  if (background_noise_sigma < 0) throw std::invalid_argument("background_noise_sigma must be non-negative");
}

void to_json(json& j, const SyntheticDataConfig& c) {
  j = json{{"image_size", c.image_size},
           {"num_train", c.num_train},
           {"num_val", c.num_val},
           {"num_test", c.num_test},
           {"lesion_count_range", {c.lesion_count_min, c.lesion_count_max}},
           {"lesion_radius_range", {c.lesion_radius_min, c.lesion_radius_max}},
           {"lesion_contrast", c.lesion_contrast},
           {"background_noise_sigma", c.background_noise_sigma},
           {"seed", c.seed}};
}

void from_json(const json& j, SyntheticDataConfig& c) {
  c = SyntheticDataConfig{};
  c.image_size = j.value("image_size", c.image_size);
  c.num_train = j.value("num_train", c.num_train);
  c.num_val = j.value("num_val", c.num_val);
  c.num_test = j.value("num_test", c.num_test);
  if (j.contains("lesion_count_range")) {
    const auto r = j.at("lesion_count_range").get<std::vector<int>>();
    if (r.size() != 2) throw std::invalid_argument("lesion_count_range needs two values");
    c.lesion_count_min = r[0];
    c.lesion_count_max = r[1];
  }
  if (j.contains("lesion_radius_range")) {
    const auto r = j.at("lesion_radius_range").get<std::vector<double>>();
    if (r.size() != 2) throw std::invalid_argument("lesion_radius_range needs two values");
    c.lesion_radius_min = r[0];
    c.lesion_radius_max = r[1];
  }
  c.lesion_contrast = j.value("lesion_contrast", c.lesion_contrast);
  c.background_noise_sigma = j.value("background_noise_sigma", c.background_noise_sigma);
  c.seed = j.value("seed", c.seed);
  c.validate();
}

namespace {

// Separable Gaussian blur with clamped borders.
std::vector<double> blur(const std::vector<double>& src, std::size_t n, double sigma) {
  const int radius = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> taps(static_cast<std::size_t>(2 * radius + 1));
  double norm = 0;
  for (int k = -radius; k <= radius; ++k) norm += taps[static_cast<std::size_t>(k + radius)] = std::exp(-0.5 * k * k / (sigma * sigma));
  for (auto& t : taps) t /= norm;
  const long N = static_cast<long>(n);
  auto clampi = [N](long v) { return std::clamp(v, 0L, N - 1); };
  std::vector<double> tmp(n * n), out(n * n);
  for (long y = 0; y < N; ++y)
    for (long x = 0; x < N; ++x) {
      double s = 0;
      for (int k = -radius; k <= radius; ++k) s += taps[static_cast<std::size_t>(k + radius)] * src[y * N + clampi(x + k)];
      tmp[y * N + x] = s;
    }
  for (long y = 0; y < N; ++y)
    for (long x = 0; x < N; ++x) {
      double s = 0;
      for (int k = -radius; k <= radius; ++k) s += taps[static_cast<std::size_t>(k + radius)] * tmp[clampi(y + k) * N + x];
      out[y * N + x] = s;
    }
  return out;
}

// Raw intensities are truncated to this window, then mapped to [0,1].
constexpr double kWindowLo = -0.1;
constexpr double kWindowHi = 1.1;
constexpr double kBackgroundLevel = 0.35;

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::string sample_name(const char* kind, std::size_t i) {
  std::ostringstream os;
  os << kind << '_' << std::setw(4) << std::setfill('0') << i;
  return os.str();
}

}  // namespace

Dataset generate_synthetic(const SyntheticDataConfig& cfg, std::size_t count, std::mt19937_64& rng) {
  cfg.validate();
  const std::size_t n = cfg.image_size;
  const double N = static_cast<double>(n);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> lesion_count(cfg.lesion_count_min, cfg.lesion_count_max);
  Dataset data;
  for (std::size_t s = 0; s < count; ++s) {
    std::vector<double> noise(n * n);
    for (auto& v : noise) v = gauss(rng);
    noise = blur(noise, n, 1.5);
    double ss = 0;
    for (double v : noise) ss += v * v;
    const double scale = cfg.background_noise_sigma / std::sqrt(ss / static_cast<double>(n * n) + 1e-12);

    std::vector<double> lesion(n * n, 0.0);
    Tensor mask(Shape{1, n, n});
    const int k = lesion_count(rng);
    for (int l = 0; l < k; ++l) {
      const double a = cfg.lesion_radius_min + (cfg.lesion_radius_max - cfg.lesion_radius_min) * unit(rng);
      const double b = cfg.lesion_radius_min + (cfg.lesion_radius_max - cfg.lesion_radius_min) * unit(rng);
      const double margin = std::max(a, b) + 1.0;
      const double cy = margin + (N - 1 - 2 * margin) * unit(rng);
      const double cx = margin + (N - 1 - 2 * margin) * unit(rng);
      const double theta = std::numbers::pi * unit(rng);
      const double contrast = cfg.lesion_contrast * (0.8 + 0.4 * unit(rng));
      const double ct = std::cos(theta), st = std::sin(theta);
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
          const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
          const double u = (ct * dx + st * dy) / a, v = (-st * dx + ct * dy) / b;
          const double rho = std::sqrt(u * u + v * v);
          // Soft edge: reaches half contrast at the boundary, ~1 px transition.
          const double profile = contrast / (1.0 + std::exp((rho - 1.0) * std::min(a, b) / 0.6));
          lesion[y * n + x] = std::max(lesion[y * n + x], profile);
          if (rho <= 1.0) mask[y * n + x] = 1.0;
        }
    }

    Tensor image(Shape{1, n, n});
    for (std::size_t i = 0; i < n * n; ++i) {
      const double raw = kBackgroundLevel + scale * noise[i] + lesion[i] + 0.5 * cfg.background_noise_sigma * gauss(rng);
      image[i] = (std::clamp(raw, kWindowLo, kWindowHi) - kWindowLo) / (kWindowHi - kWindowLo);
    }
    data.images.push_back(round_to_f32(std::move(image)));
    data.masks.push_back(std::move(mask));
  }
  return data;
}

SyntheticSplits generate_synthetic_splits(const SyntheticDataConfig& cfg) {
  std::mt19937_64 rng(cfg.seed);
  SyntheticSplits splits;
  splits.train = generate_synthetic(cfg, cfg.num_train, rng);
  splits.val = generate_synthetic(cfg, cfg.num_val, rng);
  splits.test = generate_synthetic(cfg, cfg.num_test, rng);
  return splits;
}

DatasetManifest write_dataset(const Dataset& data, const fs::path& dir, const std::string& config_hash,
                              const json& config) {
  if (data.empty()) throw std::invalid_argument("refusing to write an empty dataset");
  fs::create_directories(dir);
  DatasetManifest m;
  m.count = data.size();
  m.image_shape = data.images.front().shape();
  m.mask_shape = data.masks.front().shape();
  m.channels = m.image_shape.front();
  m.config_hash = config_hash;
  double s = 0, ss = 0, cnt = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto img = sample_name("image", i), msk = sample_name("mask", i);
    save_tensor(dir / img, data.images[i], DType::F32);
    save_tensor(dir / msk, data.masks[i], DType::F32);
    m.image_files.push_back(img);
    m.mask_files.push_back(msk);
    for (double v : data.images[i].data()) {
      s += v;
      ss += v * v;
      cnt += 1;
    }
  }
  m.intensity_mean = s / cnt;
  m.intensity_std = std::sqrt(std::max(0.0, ss / cnt - m.intensity_mean * m.intensity_mean));

  json samples = json::array();
  for (std::size_t i = 0; i < m.count; ++i) samples.push_back({{"image", m.image_files[i]}, {"mask", m.mask_files[i]}});
  write_json(dir / "manifest.json", json{{"count", m.count},
                                         {"image_shape", m.image_shape},
                                         {"mask_shape", m.mask_shape},
                                         {"channels", m.channels},
                                         {"samples", samples},
                                         {"normalization", {{"mean", m.intensity_mean}, {"std", m.intensity_std}}},
                                         {"config_hash", m.config_hash},
                                         {"config", config}});
  return m;
}

std::vector<DatasetManifest> gen_synthetic(const SyntheticDataConfig& cfg, const fs::path& dir) {
  const auto splits = generate_synthetic_splits(cfg);
  const json config = cfg;
  const auto hash = fnv1a_hex(config.dump());
  std::vector<DatasetManifest> out;
  const std::pair<const char*, const Dataset*> parts[] = {{"train", &splits.train}, {"val", &splits.val}, {"test", &splits.test}};
  for (const auto& [name, data] : parts)
    if (!data->empty()) out.push_back(write_dataset(*data, dir / name, hash, config));
  return out;
}

Dataset load_dataset(const fs::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw std::runtime_error("no manifest in " + dir.string());
  json m;
  {
    std::ifstream in(manifest_path);
    try {
      in >> m;
    } catch (const json::exception& e) {
      throw std::runtime_error("malformed manifest " + manifest_path.string() + ": " + e.what());
    }
  }
  const auto image_shape = m.at("image_shape").get<Shape>();
  const auto mask_shape = m.at("mask_shape").get<Shape>();
  const auto& samples = m.at("samples");
  if (samples.size() != m.at("count").get<std::size_t>())
    throw std::runtime_error(manifest_path.string() + ": sample list length does not match count");
  Dataset data;
  for (const auto& s : samples) {
    const auto img_name = s.at("image").get<std::string>();
    const auto msk_name = s.at("mask").get<std::string>();
    Tensor img, msk;
    try {
      img = load_tensor(dir / img_name);
      msk = load_tensor(dir / msk_name);
    } catch (const std::exception& e) {
      throw std::runtime_error(std::string("failed to load sample: ") + e.what());
    }
    if (img.shape() != image_shape)
      throw std::runtime_error((dir / img_name).string() + ": shape " + shape_str(img.shape()) +
                               " does not match manifest " + shape_str(image_shape));
    if (msk.shape() != mask_shape)
      throw std::runtime_error((dir / msk_name).string() + ": shape " + shape_str(msk.shape()) +
                               " does not match manifest " + shape_str(mask_shape));
    for (double v : msk.data())
      if (v != 0.0 && v != 1.0) throw std::runtime_error((dir / msk_name).string() + ": mask is not binary");
    data.images.push_back(std::move(img));
    data.masks.push_back(std::move(msk));
  }
  return data;
}

void stack_batch(const Dataset& data, const std::vector<std::size_t>& order, std::size_t first, std::size_t n,
                 Tensor& images, Tensor& masks) {
  const auto& is = data.images.at(order.at(first)).shape();
  const auto& ms = data.masks.at(order.at(first)).shape();
  images = Tensor(Shape{n, is[0], is[1], is[2]});
  masks = Tensor(Shape{n, ms[0], ms[1], ms[2]});
  const auto isz = shape_size(is), msz = shape_size(ms);
  for (std::size_t b = 0; b < n; ++b) {
    const auto idx = order.at(first + b);
    std::copy_n(data.images[idx].ptr(), isz, images.ptr() + b * isz);
    std::copy_n(data.masks[idx].ptr(), msz, masks.ptr() + b * msz);
  }
}

}  // namespace hcl
