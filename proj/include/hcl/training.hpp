#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "hcl/autodiff.hpp"
#include "hcl/data.hpp"
#include "hcl/nets.hpp"
#include "hcl/ops.hpp"
#include "json.hpp"

namespace hcl {

/// Soft Dice loss 1 - (2*sum(p*g) + eps) / (sum(p^2) + sum(g^2) + eps).
/// Both inputs must lie in [0,1].
double soft_dice_loss(const Tensor& pred, const Tensor& target, double eps = 1e-5);
namespace ad {
Var soft_dice_loss(Graph& g, Var pred, const Tensor& target, double eps = 1e-5);
}

/// Hard Dice of pred thresholded at 0.5 against a binary target. Two empty
/// masks score 1.
double dice_score(const Tensor& pred, const Tensor& target);

struct AugmentConfig {
  bool enabled = true;
  double flip_probability = 0.5;
  double max_rotation_deg = 30.0;
  double scale_min = 0.9;
  double scale_max = 1.1;
};

struct GeometricTransform {
  bool flip_h = false;  // mirror columns
  bool flip_v = false;  // mirror rows
  double angle_deg = 0.0;
  double scale = 1.0;
};

GeometricTransform sample_transform(const AugmentConfig& cfg, std::mt19937_64& rng);

/// Applies flips, then rotation and scaling about the image centre. Images
/// [C,H,W] are resampled bilinearly, masks [1,H,W] by nearest neighbour and
/// stay binary. Pixels mapped from outside the image become zero. The
/// identity transform reproduces the inputs exactly.
std::pair<Tensor, Tensor> apply_transform(const Tensor& image, const Tensor& mask, const GeometricTransform& t);
std::pair<Tensor, Tensor> augment(const Tensor& image, const Tensor& mask, const AugmentConfig& cfg,
                                  std::mt19937_64& rng);

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<Tensor> m, v;
};

/// One Adam update of `params` with their gradients (missing ones count as
/// zero). Throws on a non-finite gradient before touching any parameter.
void adam_step(const std::vector<ad::Parameter*>& params, const ad::Gradients& grads, AdamState& state, double lr);
void adam_step(const std::vector<ad::Parameter*>& params, const std::vector<Tensor>& grads, AdamState& state,
               double lr);

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 8;
  int epochs = 50;
  double dropout_p = 0.5;
  AugmentConfig augment;
  std::uint64_t seed = 0;
  double dice_eps = 1e-5;
  /// Matrix-product precision inside convolutions while training.
  Precision precision = Precision::F64;
  /// Directory for the best checkpoint and history.csv; empty keeps
  /// everything in memory.
  std::string output_dir;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_dice = 0.0;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
  int best_epoch = -1;  // argmin of validation loss

  void write_csv(const std::filesystem::path& path) const;
};

struct TrainResult {
  std::vector<NamedTensor> best_state;
  TrainHistory history;
};

/// Minibatch Adam on soft Dice. Shuffling, augmentation and dropout draw
/// from generators seeded by cfg.seed, so a run is reproducible. Returns the
/// state with the lowest validation loss and loads it into `net`.
TrainResult train(Network& net, const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg,
                  const std::function<void(const EpochStats&)>& on_epoch = {});

struct EvalResult {
  double loss = 0.0;  // sample-weighted mean soft Dice loss over batches
  double dice = 0.0;  // mean per-sample hard Dice
};
EvalResult evaluate(Network& net, const Dataset& data, std::size_t batch_size = 8, double dice_eps = 1e-5);

}  // namespace hcl
