#include <cmath>
#include <random>

#include "doctest.h"
#include "hcl/nets.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace hcl;
using hcl::testing::formula_count;
using hcl::testing::random_tensor;

namespace {

Network build(const std::string& name, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  return build_network(parse_spec_name(name), rng);
}

bool within(std::size_t got, double target, double tol = 0.15) {
  return std::abs(static_cast<double>(got) - target) <= tol * target;
}

}  // namespace

TEST_SUITE("receptive field") {
  TEST_CASE("UNet and flat reference values") {
    CHECK(receptive_field(parse_spec_name("unet3")) == 68);
    CHECK(receptive_field(parse_spec_name("unet5")) == 128);
    CHECK(receptive_field(parse_spec_name("unet7")) == 188);
    CHECK(receptive_field(parse_spec_name("flat")) == 89);
    CHECK(receptive_field(parse_spec_name("hyperflat")) == 89);
    CHECK(receptive_field(parse_spec_name("hyperunet5_nl8")) == 128);
  }

  TEST_CASE("single conv") {
    ArchitectureSpec s = parse_spec_name("flat");
    s.flat_channels = {4};
    s.flat_dilations = {1};
    s.convs_per_block = 1;
    CHECK(receptive_field(s) == 3);
  }

  TEST_CASE("monotone in kernel size and dilation") {
    int prev = 0;
    for (int k : {1, 3, 5, 7, 9}) {
      auto s = parse_spec_name("unet3");
      s.kernel_size = k;
      CHECK(receptive_field(s) >= prev);
      prev = receptive_field(s);
    }
    auto s = parse_spec_name("flat");
    const int base = receptive_field(s);
    s.flat_dilations[3] = 16;
    CHECK(receptive_field(s) > base);
  }
}

TEST_SUITE("parameter counts") {
  TEST_CASE("reference totals within 15 percent") {
    CHECK(within(build("unet3").param_count(), 2.1e6));
    CHECK(within(build("unet5").param_count(), 5.3e6));
    CHECK(within(build("hyperunet5_nl2").param_count(), 0.73e6));
    CHECK(within(build("hyperunet5_nl4").param_count(), 1.2e6));
    CHECK(within(build("hyperunet5_nl8").param_count(), 2.2e6));
    CHECK(within(build("flat").param_count(), 0.45e6));
    CHECK(within(build("hyperflat").param_count(), 0.45e6));
  }

  TEST_CASE("registry agrees with the per-layer formulas") {
    for (const char* name : {"unet3", "unet5_c8", "hyperunet5_nl4_c8", "hyperunet3_nl2_c4", "flat", "hyperflat"}) {
      const Network net = build(name);
      CAPTURE(name);
      CHECK(net.param_count() == formula_count(net));
      CHECK(param_count(net) == net.param_count());
    }
  }

  TEST_CASE("single standard conv") {
    std::mt19937_64 rng(0);
    CHECK(ConvLayer::standard("c", 16, 32, 3, 1, rng).param_count() == 4640);
  }

  TEST_CASE("hyper counts ignore kernel size, standard counts do not") {
    const std::size_t hyper = build("hyperunet3_nl4_c8").param_count();
    std::size_t prev = build("unet3_c8").param_count();
    for (int k : {5, 7, 9}) {
      CHECK(build("hyperunet" + std::to_string(k) + "_nl4_c8").param_count() == hyper);
      const std::size_t std_count = build("unet" + std::to_string(k) + "_c8").param_count();
      CHECK(std_count > prev);
      prev = std_count;
    }
  }
}

TEST_SUITE("spec names and serialization") {
  TEST_CASE("parse") {
    const auto s = parse_spec_name("hyperunet7_nl8_c16");
    CHECK(s.backbone == Backbone::UNet);
    CHECK(s.conv_kind == ConvKind::Hyper);
    CHECK(s.kernel_size == 7);
    CHECK(s.hyper.last_width == 8);
    CHECK(s.init_channels == 16);
    CHECK(parse_spec_name("hyperflat").hyper.last_width == 7);
    CHECK_THROWS_AS(parse_spec_name("unet4"), std::invalid_argument);
    CHECK_THROWS_AS(parse_spec_name("unet3_nl4"), std::invalid_argument);
    CHECK_THROWS_AS(parse_spec_name("resnet"), std::invalid_argument);
  }

  TEST_CASE("json round trip") {
    auto s = parse_spec_name("hyperflat_nl5");
    s.flat_channels = {8, 8};
    s.flat_dilations = {1, 3};
    const nlohmann::json j = s;
    const auto back = j.get<ArchitectureSpec>();
    CHECK(nlohmann::json(back) == j);
    nlohmann::json bad = j;
    bad["flat_dilations"] = {1};
    CHECK_THROWS_AS(bad.get<ArchitectureSpec>(), std::invalid_argument);
  }
}

TEST_SUITE("forward") {
  TEST_CASE("shape and range on 64x64") {
    for (const char* name : {"unet3_c4", "hyperunet5_nl4_c4"}) {
      Network net = build(name);
      std::mt19937_64 rng(2);
      // Batch statistics keep the untrained activations in range.
      ad::Graph g;
      const Tensor y = g.value(net.forward(g, g.constant(random_tensor(Shape{2, 1, 64, 64}, rng, 0.0, 1.0)), Mode::Train, rng));
      CHECK(y.shape() == Shape{2, 1, 64, 64});
      for (double v : y.data()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
      }
    }
    auto flat = parse_spec_name("hyperflat");
    flat.flat_channels = {4, 6, 4};
    flat.flat_dilations = {1, 2, 1};
    std::mt19937_64 rng(3);
    Network net = build_network(flat, rng);
    CHECK(net.predict(random_tensor(Shape{1, 1, 20, 20}, rng)).shape() == Shape{1, 1, 20, 20});
    CHECK(net.convs()[2].kernel_size() == 5);
    CHECK(net.convs()[2].dilation() == 1);
  }

  TEST_CASE("input size must be divisible by the pooling factor") {
    Network net = build("unet3_c4");
    CHECK_THROWS_AS(net.predict(Tensor(Shape{1, 1, 20, 20})), ShapeError);
    CHECK_THROWS_AS(net.predict(Tensor(Shape{1, 2, 16, 16})), ShapeError);
  }

  TEST_CASE("materialized hyper network is bitwise identical") {
    Network net = build("hyperunet5_nl4_c4", 9);
    std::mt19937_64 rng(4);
    for (auto* p : net.parameters())
      if (p->name.ends_with("bias") || p->name.ends_with("beta"))
        for (auto& v : p->value.data()) v = 0.05;
    const Tensor x = random_tensor(Shape{2, 1, 16, 16}, rng);
    Network plain = net.materialized();
    for (const auto& c : plain.convs()) CHECK_FALSE(c.is_hyper());
    CHECK(plain.predict(x) == net.predict(x));
  }

  TEST_CASE("final layer stays a standard 1x1 convolution") {
    const Network net = build("hyperunet3_nl2_c4");
    CHECK_FALSE(net.final_conv().is_hyper());
    CHECK(net.final_conv().kernel_size() == 1);
    for (const auto& c : net.convs()) CHECK(c.is_hyper());
  }
}

TEST_SUITE("state") {
  TEST_CASE("checkpoint round trip") {
    hcl::testing::TempDir dir("ckpt");
    Network net = build("hyperunet3_nl4_c4", 5);
    std::mt19937_64 rng(6);
    for (int i = 0; i < 3; ++i) {
      ad::Graph g;
      net.forward(g, g.constant(random_tensor(Shape{4, 1, 16, 16}, rng)), Mode::Train, rng);
    }
    const Tensor x = random_tensor(Shape{1, 1, 16, 16}, rng);
    save_checkpoint(net, (dir.path() / "f64").string(), DType::F64);
    Network back = load_checkpoint((dir.path() / "f64").string());
    CHECK(back.predict(x) == net.predict(x));

    save_checkpoint(net, (dir.path() / "f32").string(), DType::F32);
    CHECK(max_abs(load_checkpoint((dir.path() / "f32").string()).predict(x) - net.predict(x)) < 1e-5);
    CHECK_THROWS_AS(load_checkpoint((dir.path() / "none").string()), std::runtime_error);
  }

  TEST_CASE("load_state rejects foreign tensors") {
    Network a = build("unet3_c4");
    const Network b = build("unet5_c4");
    CHECK_THROWS(a.load_state(b.state()));
  }
}

TEST_SUITE("end-to-end gradients") {
  TEST_CASE("hyper UNet") {
    for (int k : {3, 5}) {
      Network net = build("hyperunet" + std::to_string(k) + "_nl4_c4", 10);
      const auto rep = check_network_gradients(net, 16, 1e-5, 3, 11);
      CAPTURE(k);
      CAPTURE(rep.worst);
      CHECK(rep.max_rel_error < 1e-3);
      CHECK(rep.checked > 100);
    }
  }

  TEST_CASE("standard UNet and flat networks") {
    Network unet = build("unet3_c4", 12);
    CHECK(check_network_gradients(unet, 16, 1e-5, 3, 13).max_rel_error < 1e-3);
    for (const char* name : {"flat", "hyperflat"}) {
      auto s = parse_spec_name(name);
      s.flat_channels = {4, 8, 4};
      s.flat_dilations = {1, 2, 1};
      std::mt19937_64 rng(14);
      Network net = build_network(s, rng);
      const auto rep = check_network_gradients(net, 16, 1e-5, 3, 15);
      CAPTURE(name);
      CHECK(rep.max_rel_error < 1e-3);
    }
  }
}
