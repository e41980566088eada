#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hcl/analysis.hpp"
#include "hcl/data.hpp"
#include "hcl/gradcheck.hpp"
#include "hcl/hyperconv.hpp"
#include "hcl/nets.hpp"
#include "hcl/ops.hpp"
#include "hcl/serialize.hpp"
#include "hcl/training.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace hcl;

namespace {

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed config " + path + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

// Computation runs on the calling thread; the variable is validated so a
// malformed value is reported rather than ignored.
void check_thread_env() {
  if (const char* v = std::getenv("HCL_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(v, &end, 10);
    if (end == v || *end != '\0' || n < 1) throw std::runtime_error(std::string("HCL_THREADS must be a positive integer, got '") + v + "'");
  }
}

struct GenDataOpts {
  std::string out, config;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::size_t num_train = 0, num_val = 0, num_test = 0, image_size = 0;
};

int run_gen_data(const GenDataOpts& o) {
  SyntheticDataConfig cfg;
  if (!o.config.empty()) cfg = read_json(o.config).get<SyntheticDataConfig>();
  if (o.seed_set) cfg.seed = o.seed;
  if (o.num_train) cfg.num_train = o.num_train;
  if (o.num_val) cfg.num_val = o.num_val;
  if (o.num_test) cfg.num_test = o.num_test;
  if (o.image_size) cfg.image_size = o.image_size;
  cfg.validate();
  const auto manifests = gen_synthetic(cfg, o.out);
  for (const auto& m : manifests)
    std::cout << m.count << " samples, image " << shape_str(m.image_shape) << ", mean " << m.intensity_mean << '\n';
  return 0;
}

struct TrainOpts {
  std::string data, out, spec = "unet3", arch, config, precision;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int epochs = 0;
  double lr = 0;
  std::size_t batch = 0;
  bool quiet = false;
};

int run_train(const TrainOpts& o) {
  TrainConfig cfg;
  if (!o.config.empty()) cfg = read_json(o.config).get<TrainConfig>();
  if (o.seed_set) cfg.seed = o.seed;
  if (o.epochs) cfg.epochs = o.epochs;
  if (o.lr > 0) cfg.learning_rate = o.lr;
  if (o.batch) cfg.batch_size = o.batch;
  if (!o.precision.empty()) cfg.precision = o.precision == "f32" ? Precision::F32 : Precision::F64;
  cfg.output_dir = o.out;
  cfg.validate();

  ArchitectureSpec spec = o.arch.empty() ? parse_spec_name(o.spec) : read_json(o.arch).get<ArchitectureSpec>();
  const Dataset train_set = load_dataset(fs::path(o.data) / "train");
  const Dataset val_set = load_dataset(fs::path(o.data) / "val");
  std::mt19937_64 init_rng(cfg.seed);
  Network net = build_network(spec, init_rng);
  fs::create_directories(o.out);
  write_text(fs::path(o.out) / "config.json", json{{"train", cfg}, {"spec", spec}}.dump(2) + "\n");
  const auto result = train(net, train_set, val_set, cfg, [&](const EpochStats& e) {
    if (!o.quiet)
      std::cout << "epoch " << e.epoch << " train_loss " << e.train_loss << " val_loss " << e.val_loss << " val_dice "
                << e.val_dice << std::endl;
  });
  std::cout << "best epoch " << result.history.best_epoch << ", params " << net.param_count() << '\n';
  return 0;
}

int run_eval(const std::string& checkpoint, const std::string& data, std::size_t batch) {
  Network net = load_checkpoint(checkpoint);
  const Dataset ds = load_dataset(data);
  const auto r = evaluate(net, ds, batch);
  std::cout << json{{"samples", ds.size()}, {"loss", r.loss}, {"dice", r.dice}}.dump() << '\n';
  return 0;
}

int run_report(const std::string& specs, bool as_json) {
  json rows = json::array();
  for (const auto& name : split_list(specs)) {
    const ArchitectureSpec spec = parse_spec_name(name);
    std::mt19937_64 rng(0);
    const Network net = build_network(spec, rng);
    rows.push_back({{"spec", name}, {"params", param_count(net)}, {"receptive_field", receptive_field(spec)}});
  }
  if (rows.empty()) throw std::runtime_error("--spec needs at least one architecture name");
  if (as_json) {
    std::cout << rows.dump(2) << '\n';
    return 0;
  }
  std::cout << std::left << std::setw(24) << "spec" << std::right << std::setw(12) << "params" << std::setw(18)
            << "receptive_field" << '\n';
  for (const auto& r : rows)
    std::cout << std::left << std::setw(24) << r["spec"].get<std::string>() << std::right << std::setw(12)
              << r["params"].get<std::size_t>() << std::setw(18) << r["receptive_field"].get<int>() << '\n';
  return 0;
}

int run_analyze(const std::string& checkpoint, const std::string& out, bool pgm) {
  const Network net = load_checkpoint(checkpoint);
  const auto report = network_kernel_report(net);
  write_kernel_report(report, out, pgm);
  for (const auto& l : report.layers)
    std::cout << std::left << std::setw(20) << l.name << ' ' << l.mean_abs_laplacian << '\n';
  std::cout << "network mean " << report.network_mean << '\n';
  return 0;
}

struct ReconstructOpts {
  std::string checkpoint, layer, out, nl = "2,8,24";
  std::size_t cin = 16, cout_ = 16;
  int k = 5, steps = ReconstructConfig{}.steps;
  double lr = ReconstructConfig{}.learning_rate, sigma = 1.0;
  std::uint64_t seed = 0;
};

int run_reconstruct(const ReconstructOpts& o) {
  Tensor target;
  std::string source;
  if (!o.checkpoint.empty()) {
    const Network net = load_checkpoint(o.checkpoint);
    for (const auto& c : net.convs())
      if (c.name() == o.layer) target = c.kernel();
    if (target.size() == 0) throw std::runtime_error("checkpoint has no convolution named '" + o.layer + "'");
    source = o.checkpoint + ":" + o.layer;
  } else {
    std::mt19937_64 rng(o.seed);
    target = smoothed_random_kernels(o.cout_, o.cin, o.k, o.sigma, rng);
    source = "smoothed-random";
  }
  const double target_lap = [&] {
    const auto v = slice_laplacians(target);
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  }();
  json rows = json::array();
  for (const auto& item : split_list(o.nl)) {
    ReconstructConfig cfg;
    cfg.last_width = std::stoul(item);
    cfg.steps = o.steps;
    cfg.learning_rate = o.lr;
    cfg.seed = o.seed;
    const auto r = reconstruct_kernel(target, cfg);
    const auto lap = slice_laplacians(generate_kernel(r.layer));
    double s = 0;
    for (double x : lap) s += x;
    rows.push_back({{"nl", cfg.last_width},
                    {"mse", r.final_mse},
                    {"relative_mse", r.relative_mse},
                    {"laplacian", s / static_cast<double>(lap.size())}});
    std::cout << "N_L " << cfg.last_width << " mse " << r.final_mse << " relative " << r.relative_mse << std::endl;
  }
  const json report{{"source", source}, {"target_laplacian", target_lap}, {"results", rows}};
  if (!o.out.empty()) write_text(o.out, report.dump(2) + "\n");
  return 0;
}

int run_gradcheck(const std::string& layer, int k, std::size_t nl, double step, double tol, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto random = [&](Shape s) {
    Tensor t(std::move(s));
    for (auto& v : t.data()) v = gauss(rng);
    return t;
  };
  GradCheckReport params_report, input_report;
  if (layer == "hyperconv") {
    HyperNetSpec spec;
    spec.in_channels = 2;
    spec.out_channels = 3;
    spec.kernel_h = spec.kernel_w = k;
    spec.last_width = nl;
    HyperConvLayer h = init_hyperconv(spec, rng);
    // Nonzero offsets and biases so every parameter has a visible gradient.
    for (auto* p : h.parameters())
      for (auto& v : p->value.data()) v += 0.1 * gauss(rng);
    const Tensor x = random(Shape{2, 2, 7, 7});
    const Tensor w = random(Shape{2, 3, 7, 7});
    params_report = check_parameter_gradients(
        [&](ad::Graph& g) { return ad::weighted_sum(g, h.forward(g, g.constant(x)), w); }, h.parameters(), step, 64, rng);
    input_report =
        check_input_gradient([&](ad::Graph& g, ad::Var in) { return ad::weighted_sum(g, h.forward(g, in), w); }, x, step);
  } else if (layer == "conv2d") {
    ad::Parameter kern{"kernel", random(Shape{3, 2, static_cast<std::size_t>(k), static_cast<std::size_t>(k)})};
    ad::Parameter bias{"bias", random(Shape{3})};
    const Tensor x = random(Shape{2, 2, 7, 7});
    const Tensor w = random(Shape{2, 3, 7, 7});
    auto fwd = [&](ad::Graph& g, ad::Var in) {
      return ad::weighted_sum(g, ad::conv2d(g, in, g.parameter(kern), g.parameter(bias), 2), w);
    };
    params_report = check_parameter_gradients([&](ad::Graph& g) { return fwd(g, g.constant(x)); }, {&kern, &bias},
                                              step, 64, rng);
    input_report = check_input_gradient(fwd, x, step);
  } else if (layer == "hyperunet") {
    Network net = build_network(parse_spec_name("hyperunet" + std::to_string(k) + "_nl" + std::to_string(nl) + "_c4"), rng);
    params_report = check_network_gradients(net, 16, step, 4, seed);
  } else {
    throw std::runtime_error("unknown --layer '" + layer + "' (expected hyperconv, conv2d or hyperunet)");
  }
  const double worst = std::max(params_report.max_rel_error, input_report.max_rel_error);
  std::cout << "checked " << params_report.checked + input_report.checked << " entries";
  if (params_report.skipped) std::cout << " (" << params_report.skipped << " kink points skipped)";
  std::cout << ", max rel. error " << worst;
  if (!params_report.worst.empty()) std::cout << " (worst parameter entry " << params_report.worst << ")";
  std::cout << '\n';
  return worst < tol ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hyper-convolution networks: data, training and kernel analysis"};
  app.require_subcommand(1);

  GenDataOpts gd;
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic lesion segmentation dataset");
  gen->add_option("--out", gd.out, "Output directory")->required();
  gen->add_option("--config", gd.config, "SyntheticDataConfig JSON");
  gen->add_option("--seed", gd.seed, "Generator seed")->each([&](const std::string&) { gd.seed_set = true; });
  gen->add_option("--num-train", gd.num_train);
  gen->add_option("--num-val", gd.num_val);
  gen->add_option("--num-test", gd.num_test);
  gen->add_option("--image-size", gd.image_size);

  TrainOpts tr;
  auto* trn = app.add_subcommand("train", "Build a network and train it with soft Dice loss");
  trn->add_option("--data", tr.data, "Dataset root with train/ and val/")->required();
  trn->add_option("--out", tr.out, "Output directory")->required();
  trn->add_option("--spec", tr.spec, "Architecture name, e.g. unet5 or hyperunet5_nl4_c8");
  trn->add_option("--arch", tr.arch, "ArchitectureSpec JSON (overrides --spec)");
  trn->add_option("--config", tr.config, "TrainConfig JSON");
  trn->add_option("--seed", tr.seed)->each([&](const std::string&) { tr.seed_set = true; });
  trn->add_option("--epochs", tr.epochs);
  trn->add_option("--lr", tr.lr);
  trn->add_option("--batch-size", tr.batch);
  trn->add_option("--precision", tr.precision, "Convolution arithmetic")->check(CLI::IsMember({"f32", "f64"}));
  trn->add_flag("--quiet", tr.quiet);

  std::string ev_ckpt, ev_data;
  std::size_t ev_batch = 8;
  auto* evl = app.add_subcommand("eval", "Dice and loss of a checkpoint on one split");
  evl->add_option("--checkpoint", ev_ckpt)->required();
  evl->add_option("--data", ev_data, "Split directory")->required();
  evl->add_option("--batch-size", ev_batch);

  std::string rp_specs;
  bool rp_json = false;
  auto* rep = app.add_subcommand("report", "Parameter count and receptive field per architecture");
  rep->add_option("--spec", rp_specs, "Comma-separated architecture names")->required();
  rep->add_flag("--json", rp_json);

  std::string ak_ckpt, ak_out;
  bool ak_pgm = false;
  auto* ak = app.add_subcommand("analyze-kernels", "Kernel Laplacian report of a checkpoint");
  ak->add_option("--checkpoint", ak_ckpt)->required();
  ak->add_option("--out", ak_out)->required();
  ak->add_flag("--pgm", ak_pgm, "Also write PGM images of kernels and Laplacians");

  ReconstructOpts ro;
  auto* rec = app.add_subcommand("reconstruct", "Fit hyper-convolutions to fixed kernels over a range of N_L");
  rec->add_option("--checkpoint", ro.checkpoint, "Take the target from this checkpoint");
  rec->add_option("--layer", ro.layer, "Layer name inside the checkpoint");
  rec->add_option("--nl", ro.nl, "Comma-separated N_L values");
  rec->add_option("--cin", ro.cin);
  rec->add_option("--cout", ro.cout_);
  rec->add_option("--k", ro.k);
  rec->add_option("--sigma", ro.sigma, "Smoothing of the random target");
  rec->add_option("--steps", ro.steps);
  rec->add_option("--lr", ro.lr);
  rec->add_option("--seed", ro.seed);
  rec->add_option("--out", ro.out, "JSON results file");

  std::string gc_layer = "hyperconv";
  int gc_k = 3;
  std::size_t gc_nl = 4;
  double gc_step = 1e-5, gc_tol = 0.0;
  std::uint64_t gc_seed = 0;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of analytic gradients");
  gc->add_option("--layer", gc_layer)->check(CLI::IsMember({"hyperconv", "conv2d", "hyperunet"}));
  gc->add_option("--k", gc_k);
  gc->add_option("--nl", gc_nl);
  gc->add_option("--step", gc_step);
  gc->add_option("--tol", gc_tol, "Pass threshold (default 1e-4 for layers, 1e-3 end-to-end)");
  gc->add_option("--seed", gc_seed);

  CLI11_PARSE(app, argc, argv);

  try {
    check_thread_env();
    if (*gen) return run_gen_data(gd);
    if (*trn) return run_train(tr);
    if (*evl) return run_eval(ev_ckpt, ev_data, ev_batch);
    if (*rep) return run_report(rp_specs, rp_json);
    if (*ak) return run_analyze(ak_ckpt, ak_out, ak_pgm);
    if (*rec) {
      if (!ro.checkpoint.empty() && ro.layer.empty()) throw std::runtime_error("--checkpoint needs --layer");
      return run_reconstruct(ro);
    }
    if (*gc) {
      if (gc_tol <= 0) gc_tol = gc_layer == "hyperunet" ? 1e-3 : 1e-4;
      return run_gradcheck(gc_layer, gc_k, gc_nl, gc_step, gc_tol, gc_seed);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
