#include <cmath>
#include <random>

#include "doctest.h"
#include "hcl/gradcheck.hpp"
#include "hcl/hyperconv.hpp"
#include "hcl/ops.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace hcl;
using hcl::testing::random_tensor;
using hcl::testing::scalar_mlp;

namespace {

HyperNetSpec make_spec(std::size_t nin, std::size_t nout, int k, std::size_t nl = 4) {
  HyperNetSpec s;
  s.in_channels = nin;
  s.out_channels = nout;
  s.kernel_h = s.kernel_w = k;
  s.last_width = nl;
  return s;
}

// Every parameter uniform in [-1,1], including the zero-initialized biases.
HyperConvLayer random_layer(const HyperNetSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  HyperConvLayer layer(spec);
  for (auto* p : layer.parameters()) p->value = random_tensor(p->value.shape(), rng);
  return layer;
}

}  // namespace

TEST_SUITE("coordinate grid") {
  TEST_CASE("3x3 offsets") {
    const auto g = make_coordinate_grid(3, 3);
    CHECK(g.values.vec() == std::vector<double>{-1, -1, -1, 0, 0, 0, 1, 1, 1, -1, 0, 1, -1, 0, 1, -1, 0, 1});
  }

  TEST_CASE("1x1 and 5x5") {
    CHECK(make_coordinate_grid(1, 1).values.vec() == std::vector<double>{0, 0});
    const auto g = make_coordinate_grid(5, 5);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        CHECK(g.values.at({0, i, j}) == static_cast<double>(i) - 2);
        CHECK(g.values.at({1, i, j}) == static_cast<double>(j) - 2);
      }
  }

  TEST_CASE("rectangular and normalized") {
    const auto g = make_coordinate_grid(3, 7, true);
    CHECK(g.values.at({0, 0, 6}) == -1.0);
    CHECK(g.values.at({1, 2, 0}) == -1.0);
    CHECK(g.values.at({1, 1, 5}) == doctest::Approx(2.0 / 3.0));
  }

  TEST_CASE("rejects even or non-positive sizes") {
    CHECK_THROWS_AS(make_coordinate_grid(4, 3), std::invalid_argument);
    CHECK_THROWS_AS(make_coordinate_grid(3, 0), std::invalid_argument);
    CHECK_THROWS_AS(make_coordinate_grid(-1, 3), std::invalid_argument);
  }
}

TEST_SUITE("parameter count") {
  TEST_CASE("worked example") {
    const auto s = make_spec(32, 32, 3);
    CHECK(hyperconv_param_count(s) == 6836);
    CHECK(HyperConvLayer(s).param_count() == 6836);
    auto s8 = s;
    s8.last_width = 8;
    CHECK(hyperconv_param_count(s8) - hyperconv_param_count(s) == 9216 - 5120 + (16 + 1) * 4);
  }

  TEST_CASE("independent of kernel size") {
    const std::size_t ref = HyperConvLayer(make_spec(7, 5, 3, 6)).param_count();
    for (int k : {5, 7, 9}) CHECK(HyperConvLayer(make_spec(7, 5, k, 6)).param_count() == ref);
    auto rect = make_spec(7, 5, 3, 6);
    rect.kernel_w = 9;
    CHECK(hyperconv_param_count(rect) == ref);
  }
}

TEST_SUITE("generate_kernel") {
  TEST_CASE("matches a per-coordinate scalar network") {
    for (int k : {1, 3, 5, 7}) {
      const auto layer = random_layer(make_spec(3, 4, k, 5), 100 + static_cast<std::uint64_t>(k));
      const Tensor kernel = generate_kernel(layer);
      CHECK(kernel.shape() == Shape{4, 3, static_cast<std::size_t>(k), static_cast<std::size_t>(k)});
      const auto kk = static_cast<std::size_t>(k);
      const double r0 = (k - 1) / 2.0;
      Tensor oracle(kernel.shape());
      for (std::size_t i = 0; i < kk; ++i)
        for (std::size_t j = 0; j < kk; ++j) {
          const auto y = scalar_mlp(layer, static_cast<double>(i) - r0, static_cast<double>(j) - r0);
          for (std::size_t q = 0; q < 4; ++q)
            for (std::size_t c = 0; c < 3; ++c) oracle.at({q, c, i, j}) = y[q * 3 + c];
        }
      CHECK(max_rel_error(kernel, oracle) < 1e-12);
    }
  }

  TEST_CASE("zero parameters give a zero kernel") {
    const HyperConvLayer layer(make_spec(2, 3, 5));
    CHECK(max_abs(generate_kernel(layer)) == 0.0);
  }

  TEST_CASE("without the final weights every slice is constant") {
    auto layer = random_layer(make_spec(2, 3, 5), 7);
    layer.final_weight.value.fill(0.0);
    const Tensor k = generate_kernel(layer);
    for (std::size_t p = 0; p < 6; ++p)
      for (std::size_t e = 0; e < 25; ++e)
        CHECK(k[p * 25 + e] == layer.final_bias.value[p] + layer.pair_offset.value[p]);
  }

  TEST_CASE("central sub-grid agrees with the smaller grid") {
    const auto layer = random_layer(make_spec(3, 2, 7), 8);
    const Tensor big = generate_kernel(layer);
    const Tensor small = evaluate_kernel_function(layer, make_coordinate_grid(3, 3));
    for (std::size_t p = 0; p < 6; ++p)
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) CHECK(small[p * 9 + i * 3 + j] == big[p * 49 + (i + 2) * 7 + j + 2]);
  }

  TEST_CASE("grid must match the layer geometry") {
    const HyperConvLayer layer(make_spec(1, 1, 5));
    CHECK_THROWS_AS(generate_kernel(layer, make_coordinate_grid(3, 3)), std::invalid_argument);
  }
}

TEST_SUITE("hyperconv forward") {
  TEST_CASE("equals conv2d of the generated kernel bitwise") {
    for (int d : {1, 2}) {
      const auto layer = random_layer(make_spec(4, 6, 5), 21);
      std::mt19937_64 rng(22);
      const Tensor x = random_tensor(Shape{2, 4, 9, 11}, rng);
      const Tensor ref = conv2d(x, generate_kernel(layer), layer.out_bias.value, d);
      CHECK(hyperconv_forward(layer, x, d) == ref);
      auto copy = layer;
      ad::Graph g;
      CHECK(g.value(copy.forward(g, g.input(x), d)) == ref);
    }
  }

  TEST_CASE("zero parameters output the bias") {
    HyperConvLayer layer(make_spec(2, 3, 3));
    layer.out_bias.value = Tensor(Shape{3}, std::vector<double>{0.5, -1, 2});
    std::mt19937_64 rng(1);
    const Tensor y = hyperconv_forward(layer, random_tensor(Shape{1, 2, 4, 4}, rng));
    for (std::size_t q = 0; q < 3; ++q)
      for (std::size_t e = 0; e < 16; ++e) CHECK(y[q * 16 + e] == layer.out_bias.value[q]);
  }

  TEST_CASE("channel mismatch") {
    const HyperConvLayer layer(make_spec(2, 3, 3));
    CHECK_THROWS_AS(hyperconv_forward(layer, Tensor(Shape{1, 3, 4, 4})), ShapeError);
  }

  TEST_CASE("gradients of every parameter match finite differences") {
    for (int k : {3, 5}) {
      auto layer = random_layer(make_spec(3, 2, k, 4), 31 + static_cast<std::uint64_t>(k));
      for (auto* p : layer.parameters()) p->value *= 0.5;
      std::mt19937_64 rng(32);
      const Tensor x = random_tensor(Shape{2, 3, 6, 6}, rng);
      const Tensor w = random_tensor(Shape{2, 2, 6, 6}, rng);
      auto loss = [&](ad::Graph& g) { return ad::weighted_sum(g, layer.forward(g, g.input(x)), w); };
      const auto rep = check_parameter_gradients(loss, layer.parameters(), 1e-5, 1000, rng);
      CHECK(rep.checked == layer.param_count());
      CHECK(rep.max_rel_error < 1e-4);
    }
  }
}

TEST_SUITE("init") {
  TEST_CASE("deterministic given the seed") {
    const auto s = make_spec(4, 4, 5);
    std::mt19937_64 a(5), b(5), c(6);
    const auto la = init_hyperconv(s, a), lb = init_hyperconv(s, b), lc = init_hyperconv(s, c);
    CHECK(generate_kernel(la) == generate_kernel(lb));
    CHECK(generate_kernel(la) != generate_kernel(lc));
    CHECK(max_abs(la.final_bias.value) == 0.0);
    CHECK(max_abs(la.pair_offset.value) == 0.0);
    CHECK(max_abs(la.out_bias.value) == 0.0);
  }

  TEST_CASE("generated kernel variance is on the fan-in scale") {
    const std::size_t nin = 8;
    const auto s = make_spec(nin, 4, 5);
    double sq = 0;
    std::size_t n = 0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
      std::mt19937_64 rng(seed);
      const Tensor k = generate_kernel(init_hyperconv(s, rng));
      CHECK(k.all_finite());
      for (double v : k.data()) sq += v * v;
      n += k.size();
    }
    const double target = 1.0 / (25.0 * nin);
    const double var = sq / static_cast<double>(n);
    CHECK(var > target / 3);
    CHECK(var < target * 3);
  }
}
