#include "hcl/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace hcl {
using nlohmann::json;

namespace {

void check_unit_range(const Tensor& t, const char* what) {
  for (double v : t.data())
    if (!(v >= 0.0 && v <= 1.0))
      throw std::invalid_argument(std::string("soft Dice ") + what + " has a value outside [0,1]: " + std::to_string(v));
}

struct DiceTerms {
  double inter = 0, denom = 0;
};

DiceTerms dice_terms(const Tensor& p, const Tensor& t) {
  DiceTerms d;
  for (std::size_t i = 0; i < p.size(); ++i) {
    d.inter += p[i] * t[i];
    d.denom += p[i] * p[i] + t[i] * t[i];
  }
  return d;
}

}  // namespace

double soft_dice_loss(const Tensor& pred, const Tensor& target, double eps) {
  require_shape(target, pred.shape(), "soft Dice target");
  check_unit_range(pred, "prediction");
  check_unit_range(target, "target");
  const auto d = dice_terms(pred, target);
  return 1.0 - (2.0 * d.inter + eps) / (d.denom + eps);
}

namespace ad {
Var soft_dice_loss(Graph& g, Var pred, const Tensor& target, double eps) {
  const Tensor& p = g.value(pred);
  const double loss = hcl::soft_dice_loss(p, target, eps);
  const auto d = dice_terms(p, target);
  return g.record("soft_dice", {pred}, Tensor(Shape{1}, loss),
                  [target, eps, d](const Graph& gr, std::size_t self, const Tensor& go) {
                    const Tensor& pv = gr.value(Var{gr.node(self).inputs[0]});
                    const double num = 2.0 * d.inter + eps, den = d.denom + eps;
                    Tensor gp(pv.shape());
                    const double s = go[0] / (den * den);
                    for (std::size_t i = 0; i < pv.size(); ++i) gp[i] = -s * (2.0 * target[i] * den - num * 2.0 * pv[i]);
                    return std::vector<Tensor>{std::move(gp)};
                  });
}
}  // namespace ad

double dice_score(const Tensor& pred, const Tensor& target) {
  require_shape(target, pred.shape(), "Dice target");
  double inter = 0, p_count = 0, t_count = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = pred[i] >= 0.5 ? 1.0 : 0.0;
    const double t = target[i] >= 0.5 ? 1.0 : 0.0;
    inter += p * t;
    p_count += p;
    t_count += t;
  }
  if (p_count + t_count == 0) return 1.0;
  return 2.0 * inter / (p_count + t_count);
}

GeometricTransform sample_transform(const AugmentConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  GeometricTransform t;
  t.flip_h = unit(rng) < cfg.flip_probability;
  t.flip_v = unit(rng) < cfg.flip_probability;
  t.angle_deg = cfg.max_rotation_deg * (2.0 * unit(rng) - 1.0);
  t.scale = cfg.scale_min + (cfg.scale_max - cfg.scale_min) * unit(rng);
  return t;
}

std::pair<Tensor, Tensor> apply_transform(const Tensor& image, const Tensor& mask, const GeometricTransform& t) {
  require_rank(image, 3, "augment image");
  require_shape(mask, Shape{1, image.dim(1), image.dim(2)}, "augment mask");
  if (!(t.scale > 0)) throw std::invalid_argument("augment scale must be positive");
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  const long Hl = static_cast<long>(H), Wl = static_cast<long>(W);
  const double cy = (static_cast<double>(H) - 1) / 2, cx = (static_cast<double>(W) - 1) / 2;
  const double rad = t.angle_deg * std::numbers::pi / 180.0;
  const double c = std::cos(rad), s = std::sin(rad);

  Tensor out_img(image.shape()), out_mask(mask.shape());
  auto pixel = [&](std::size_t ch, long y, long x) {
    if (y < 0 || y >= Hl || x < 0 || x >= Wl) return 0.0;
    return image[(ch * H + static_cast<std::size_t>(y)) * W + static_cast<std::size_t>(x)];
  };
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      // Inverse map: undo rotation and scale about the centre, then the flips.
      const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
      double sy = (c * dy - s * dx) / t.scale + cy;
      double sx = (s * dy + c * dx) / t.scale + cx;
      if (t.flip_v) sy = static_cast<double>(H) - 1 - sy;
      if (t.flip_h) sx = static_cast<double>(W) - 1 - sx;

      const double fy = std::floor(sy), fx = std::floor(sx);
      const long y0 = static_cast<long>(fy), x0 = static_cast<long>(fx);
      const double ay = sy - fy, ax = sx - fx;
      for (std::size_t ch = 0; ch < C; ++ch) {
        double v = (1 - ay) * (1 - ax) * pixel(ch, y0, x0);
        if (ax != 0) v += (1 - ay) * ax * pixel(ch, y0, x0 + 1);
        if (ay != 0) v += ay * (1 - ax) * pixel(ch, y0 + 1, x0);
        if (ay != 0 && ax != 0) v += ay * ax * pixel(ch, y0 + 1, x0 + 1);
        out_img[(ch * H + y) * W + x] = v;
      }
      const long ny = std::lround(sy), nx = std::lround(sx);
      const double m = (ny < 0 || ny >= Hl || nx < 0 || nx >= Wl) ? 0.0
                                                                   : mask[static_cast<std::size_t>(ny) * W + static_cast<std::size_t>(nx)];
      out_mask[y * W + x] = m >= 0.5 ? 1.0 : 0.0;
    }
  return {std::move(out_img), std::move(out_mask)};
}

std::pair<Tensor, Tensor> augment(const Tensor& image, const Tensor& mask, const AugmentConfig& cfg,
                                  std::mt19937_64& rng) {
  return apply_transform(image, mask, sample_transform(cfg, rng));
}

void adam_step(const std::vector<ad::Parameter*>& params, const std::vector<Tensor>& grads, AdamState& st,
               double lr) {
  if (grads.size() != params.size()) throw std::invalid_argument("adam_step: one gradient per parameter required");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() == 0) continue;
    require_shape(grads[i], params[i]->value.shape(), ("Adam gradient for " + params[i]->name).c_str());
    if (!grads[i].all_finite()) throw NumericalError("non-finite gradient for parameter " + params[i]->name);
  }
  if (st.m.empty()) {
    for (auto* p : params) {
      st.m.emplace_back(p->value.shape(), 0.0);
      st.v.emplace_back(p->value.shape(), 0.0);
    }
  }
  if (st.m.size() != params.size()) throw std::invalid_argument("adam_step: parameter list changed between steps");
  ++st.step;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i]->value;
    auto& m = st.m[i];
    auto& v = st.v[i];
    const bool has = grads[i].size() != 0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double g = has ? grads[i][j] : 0.0;
      m[j] = st.beta1 * m[j] + (1 - st.beta1) * g;
      v[j] = st.beta2 * v[j] + (1 - st.beta2) * g * g;
      w[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + st.eps);
    }
  }
}

void adam_step(const std::vector<ad::Parameter*>& params, const ad::Gradients& grads, AdamState& st, double lr) {
  std::vector<Tensor> g;
  g.reserve(params.size());
  for (auto* p : params) {
    const Tensor* t = grads.find(*p);
    g.push_back(t ? *t : Tensor{});
  }
  adam_step(params, g, st, lr);
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw std::invalid_argument("learning_rate must be positive");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (epochs < 1) throw std::invalid_argument("epochs must be at least 1");
  if (!(dropout_p >= 0 && dropout_p < 1)) throw std::invalid_argument("dropout_p must lie in [0, 1)");
  if (!(augment.scale_min > 0 && augment.scale_max >= augment.scale_min))
    throw std::invalid_argument("augmentation scale range is invalid");
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"learning_rate", c.learning_rate},
           {"batch_size", c.batch_size},
           {"epochs", c.epochs},
           {"dropout_p", c.dropout_p},
           {"augment",
            {{"enabled", c.augment.enabled},
             {"flip_probability", c.augment.flip_probability},
             {"max_rotation_deg", c.augment.max_rotation_deg},
             {"scale_range", {c.augment.scale_min, c.augment.scale_max}}}},
           {"seed", c.seed},
           {"dice_eps", c.dice_eps},
           {"precision", c.precision == Precision::F32 ? "f32" : "f64"},
           {"output_dir", c.output_dir}};
}

void from_json(const json& j, TrainConfig& c) {
  static const char* known[] = {"learning_rate", "batch_size", "epochs",    "dropout_p", "augment",
                                "seed",          "dice_eps",   "precision", "output_dir"};
  for (const auto& [key, _] : j.items())
    if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return key == k; }) == std::end(known))
      throw std::invalid_argument("unknown training config key '" + key + "'");
  c = TrainConfig{};
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.dropout_p = j.value("dropout_p", c.dropout_p);
  if (j.contains("augment")) {
    const auto& a = j.at("augment");
    c.augment.enabled = a.value("enabled", c.augment.enabled);
    c.augment.flip_probability = a.value("flip_probability", c.augment.flip_probability);
    c.augment.max_rotation_deg = a.value("max_rotation_deg", c.augment.max_rotation_deg);
    if (a.contains("scale_range")) {
      const auto r = a.at("scale_range").get<std::vector<double>>();
      if (r.size() != 2) throw std::invalid_argument("scale_range needs two values");
      c.augment.scale_min = r[0];
      c.augment.scale_max = r[1];
    }
  }
  c.seed = j.value("seed", c.seed);
  c.dice_eps = j.value("dice_eps", c.dice_eps);
  const auto prec = j.value("precision", std::string("f64"));
  if (prec == "f32")
    c.precision = Precision::F32;
  else if (prec == "f64")
    c.precision = Precision::F64;
  else
    throw std::invalid_argument("precision must be f32 or f64");
  c.output_dir = j.value("output_dir", c.output_dir);
  c.validate();
}

void TrainHistory::write_csv(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "epoch,train_loss,val_loss,val_dice\n" << std::setprecision(10);
  for (const auto& e : epochs) out << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.val_dice << '\n';
}

EvalResult evaluate(Network& net, const Dataset& data, std::size_t batch_size, double dice_eps) {
  if (data.empty()) throw std::invalid_argument("cannot evaluate on an empty dataset");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  EvalResult r;
  Tensor images, masks;
  for (std::size_t first = 0; first < data.size(); first += batch_size) {
    const std::size_t n = std::min(batch_size, data.size() - first);
    stack_batch(data, order, first, n, images, masks);
    const Tensor pred = net.predict(images);
    r.loss += soft_dice_loss(pred, masks, dice_eps) * static_cast<double>(n);
    const std::size_t per = pred.size() / n;
    for (std::size_t b = 0; b < n; ++b) {
      Tensor p(Shape{per}), t(Shape{per});
      std::copy_n(pred.ptr() + b * per, per, p.ptr());
      std::copy_n(masks.ptr() + b * per, per, t.ptr());
      r.dice += dice_score(p, t);
    }
  }
  r.loss /= static_cast<double>(data.size());
  r.dice /= static_cast<double>(data.size());
  return r;
}

TrainResult train(Network& net, const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg,
                  const std::function<void(const EpochStats&)>& on_epoch) {
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("training set is empty");
  if (val_set.empty()) throw std::invalid_argument("validation set is empty");
  net.set_dropout(cfg.dropout_p);

  std::mt19937_64 data_rng(cfg.seed);
  std::mt19937_64 dropout_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  AdamState adam;
  const auto params = net.parameters();
  TrainResult result;
  double best_loss = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), data_rng);
    double loss_sum = 0;
    std::size_t seen = 0;
    for (std::size_t first = 0, batch = 0; first < order.size(); first += cfg.batch_size, ++batch) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - first);
      Dataset chunk;
      for (std::size_t b = 0; b < n; ++b) {
        const auto idx = order[first + b];
        if (cfg.augment.enabled) {
          auto [img, msk] = augment(train_set.images[idx], train_set.masks[idx], cfg.augment, data_rng);
          chunk.images.push_back(std::move(img));
          chunk.masks.push_back(std::move(msk));
        } else {
          chunk.images.push_back(train_set.images[idx]);
          chunk.masks.push_back(train_set.masks[idx]);
        }
      }
      std::vector<std::size_t> local(n);
      std::iota(local.begin(), local.end(), 0);
      Tensor images, masks;
      stack_batch(chunk, local, 0, n, images, masks);
      try {
        PrecisionScope scope(cfg.precision);
        ad::Graph g;
        const ad::Var pred = net.forward(g, g.constant(std::move(images)), Mode::Train, dropout_rng);
        const ad::Var loss = ad::soft_dice_loss(g, pred, masks, cfg.dice_eps);
        const double lv = g.value(loss).item();
        if (!std::isfinite(lv)) throw NumericalError("loss is not finite");
        const auto grads = g.backprop(loss);
        adam_step(params, grads, adam, cfg.learning_rate);
        loss_sum += lv * static_cast<double>(n);
        seen += n;
      } catch (const NumericalError& e) {
        throw NumericalError("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(batch) + ": " + e.what());
      }
    }
    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = loss_sum / static_cast<double>(seen);
    {
      PrecisionScope scope(cfg.precision);
      const auto ev = evaluate(net, val_set, cfg.batch_size, cfg.dice_eps);
      stats.val_loss = ev.loss;
      stats.val_dice = ev.dice;
    }
    if (!std::isfinite(stats.val_loss))
      throw NumericalError("validation loss is not finite at epoch " + std::to_string(epoch));
    result.history.epochs.push_back(stats);
    if (stats.val_loss < best_loss) {
      best_loss = stats.val_loss;
      result.history.best_epoch = epoch;
      result.best_state = net.state();
      if (!cfg.output_dir.empty()) save_checkpoint(net, (std::filesystem::path(cfg.output_dir) / "best").string(), DType::F64);
    }
    if (on_epoch) on_epoch(stats);
  }
  net.load_state(result.best_state);
  if (!cfg.output_dir.empty()) result.history.write_csv(std::filesystem::path(cfg.output_dir) / "history.csv");
  return result;
}

}  // namespace hcl
