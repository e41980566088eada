#pragma once

#include <cstddef>
#include <vector>

#include "hcl/hyperconv.hpp"
#include "hcl/nets.hpp"
#include "hcl/ops.hpp"

// Reference implementations written independently of the library code paths.
namespace hcl::testing {

// Direct six-loop convolution with zero padding, independent of im2col.
inline Tensor brute_conv(const Tensor& in, const Tensor& k, const Tensor& b, int d) {
  const std::size_t N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
  const std::size_t O = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const long ph = static_cast<long>(kh - 1) / 2 * d, pw = static_cast<long>(kw - 1) / 2 * d;
  Tensor out(Shape{N, O, H, W});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          double acc = b.empty() ? 0.0 : b[o];
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t a = 0; a < kh; ++a)
              for (std::size_t e = 0; e < kw; ++e) {
                const long yy = static_cast<long>(y) + static_cast<long>(a) * d - ph;
                const long xx = static_cast<long>(x) + static_cast<long>(e) * d - pw;
                if (yy < 0 || xx < 0 || yy >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
                acc += in.at({n, c, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx)}) * k.at({o, c, a, e});
              }
          out.at({n, o, y, x}) = acc;
        }
  return out;
}

inline Conv2dGrads brute_conv_backward(const Tensor& in, const Tensor& k, const Tensor& go, int d) {
  const std::size_t N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
  const std::size_t O = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const long ph = static_cast<long>(kh - 1) / 2 * d, pw = static_cast<long>(kw - 1) / 2 * d;
  Conv2dGrads r{Tensor(in.shape()), Tensor(k.shape()), Tensor(Shape{O})};
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const double g = go.at({n, o, y, x});
          r.bias[o] += g;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t a = 0; a < kh; ++a)
              for (std::size_t e = 0; e < kw; ++e) {
                const long yy = static_cast<long>(y) + static_cast<long>(a) * d - ph;
                const long xx = static_cast<long>(x) + static_cast<long>(e) * d - pw;
                if (yy < 0 || xx < 0 || yy >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
                const auto uy = static_cast<std::size_t>(yy), ux = static_cast<std::size_t>(xx);
                r.input.at({n, c, uy, ux}) += g * k.at({o, c, a, e});
                r.kernel.at({o, c, a, e}) += g * in.at({n, c, uy, ux});
              }
        }
  return r;
}

// Plain scalar evaluation of the coordinate network at one offset.
inline std::vector<double> scalar_mlp(const HyperConvLayer& layer, double r, double c) {
  const auto& s = layer.spec();
  std::vector<double> h{r, c};
  for (std::size_t l = 0; l < 4; ++l) {
    const auto& W = layer.trunk_weights[l].value;
    const auto& b = layer.trunk_biases[l].value;
    const std::size_t out = W.dim(1);
    std::vector<double> next(out);
    for (std::size_t o = 0; o < out; ++o) {
      double z = b[o];
      for (std::size_t i = 0; i < h.size(); ++i) z += h[i] * W[i * out + o];
      next[o] = z > 0 ? z : s.leak_slope * z;
    }
    h = next;
  }
  const std::size_t P = s.pairs();
  std::vector<double> y(P);
  for (std::size_t p = 0; p < P; ++p) {
    double z = layer.final_bias.value[p];
    for (std::size_t l = 0; l < h.size(); ++l) z += h[l] * layer.final_weight.value[l * P + p];
    y[p] = z + layer.pair_offset.value[p];
  }
  return y;
}

// Sum of closed-form per-layer counts, independent of the parameter registry.
inline std::size_t formula_count(const Network& net) {
  auto conv_count = [](const ConvLayer& c) -> std::size_t {
    if (c.is_hyper()) {
      const auto& s = c.as_hyper().spec();
      const auto w = s.layer_widths();
      return (w[0] + 1) * w[1] + (w[1] + 1) * w[2] + (w[2] + 1) * w[3] + (w[3] + 1) * w[4] +
             (s.last_width + 1) * s.pairs() + s.pairs() + s.out_channels;
    }
    const auto k = static_cast<std::size_t>(c.kernel_size());
    return k * k * c.in_channels() * c.out_channels() + c.out_channels();
  };
  std::size_t n = conv_count(net.final_conv());
  for (const auto& c : net.convs()) n += conv_count(c) + 2 * c.out_channels();
  for (const auto& c : net.projections()) n += conv_count(c);
  return n;
}

}  // namespace hcl::testing
