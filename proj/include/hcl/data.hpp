#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "hcl/tensor.hpp"
#include "json.hpp"

namespace hcl {

/// In-memory segmentation split: images [C,H,W], masks [1,H,W] with values in {0,1}.
struct Dataset {
  std::vector<Tensor> images;
  std::vector<Tensor> masks;

  std::size_t size() const noexcept { return images.size(); }
  bool empty() const noexcept { return images.empty(); }
};

/// Procedural stand-in for lesion segmentation data: smoothed noise
/// background with bright soft-edged ellipses; the mask is the union of the
/// ellipse interiors.
struct SyntheticDataConfig {
  std::size_t image_size = 64;
  std::size_t num_train = 200;
  std::size_t num_val = 50;
  std::size_t num_test = 50;
  int lesion_count_min = 1;
  int lesion_count_max = 4;
  double lesion_radius_min = 3.0;
  double lesion_radius_max = 10.0;
  double lesion_contrast = 0.5;
  double background_noise_sigma = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const SyntheticDataConfig& c);
void from_json(const nlohmann::json& j, SyntheticDataConfig& c);

struct DatasetManifest {
  std::size_t count = 0;
  Shape image_shape;
  Shape mask_shape;
  std::size_t channels = 1;
  std::vector<std::string> image_files;
  std::vector<std::string> mask_files;
  double intensity_mean = 0.0;
  double intensity_std = 0.0;
  std::string config_hash;
};

/// `count` samples drawn from `rng`; image values are rounded to float32 so
/// they survive the on-disk format unchanged.
Dataset generate_synthetic(const SyntheticDataConfig& cfg, std::size_t count, std::mt19937_64& rng);

struct SyntheticSplits {
  Dataset train, val, test;
};
SyntheticSplits generate_synthetic_splits(const SyntheticDataConfig& cfg);

/// Writes train/, val/ and test/ split directories under `dir`, each holding
/// one tensor file pair per image and mask plus manifest.json.
std::vector<DatasetManifest> gen_synthetic(const SyntheticDataConfig& cfg, const std::filesystem::path& dir);

DatasetManifest write_dataset(const Dataset& data, const std::filesystem::path& dir, const std::string& config_hash,
                              const nlohmann::json& config);
/// Loads one split directory. Rejects missing files, shape mismatches and
/// non-binary masks with a message naming the offending file.
Dataset load_dataset(const std::filesystem::path& dir);

/// Stacks samples [first, first+n) of `order` into [n,C,H,W] / [n,1,H,W].
void stack_batch(const Dataset& data, const std::vector<std::size_t>& order, std::size_t first, std::size_t n,
                 Tensor& images, Tensor& masks);

}  // namespace hcl
