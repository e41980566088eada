#include "hcl/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace hcl {
namespace {

thread_local Precision g_conv_precision = Precision::F64;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  std::size_t n, cin, h, w, cout, kh, kw;
  int dilation;
  long pad_h, pad_w;
  std::size_t rows() const { return cin * kh * kw; }
  std::size_t pixels() const { return h * w; }
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& kernel, int dilation) {
  require_rank(input, 4, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  if (dilation < 1) throw std::invalid_argument("conv2d: dilation must be positive");
  ConvGeometry geo{input.dim(0), input.dim(1), input.dim(2), input.dim(3), kernel.dim(0), kernel.dim(2),
                   kernel.dim(3), dilation, 0, 0};
  if (kernel.dim(1) != geo.cin)
    throw ShapeError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) + " input channels, input has " +
                     std::to_string(geo.cin));
  if (geo.kh % 2 == 0 || geo.kw % 2 == 0)
    throw std::invalid_argument("conv2d: kernel dimensions must be odd, got " + shape_str(kernel.shape()));
  geo.pad_h = static_cast<long>((geo.kh - 1) / 2) * dilation;
  geo.pad_w = static_cast<long>((geo.kw - 1) / 2) * dilation;
  return geo;
}

// Unfold image rows [y0,y1) of one sample [Cin,H,W] into rows of shifted
// copies; row r of the result starts at col + r * ld.
template <typename T>
void im2col(const double* in, const ConvGeometry& g, std::size_t y0, std::size_t y1, T* col, std::size_t ld) {
  const long H = static_cast<long>(g.h), W = static_cast<long>(g.w);
  for (std::size_t c = 0; c < g.cin; ++c) {
    const double* plane = in + c * g.h * g.w;
    for (std::size_t i = 0; i < g.kh; ++i) {
      const long dy = static_cast<long>(i) * g.dilation - g.pad_h;
      for (std::size_t j = 0; j < g.kw; ++j) {
        const long dx = static_cast<long>(j) * g.dilation - g.pad_w;
        T* dst = col + ((c * g.kh + i) * g.kw + j) * ld;
        const long x0 = std::clamp(-dx, 0L, W), x1 = std::clamp(W - dx, 0L, W);
        for (long y = static_cast<long>(y0); y < static_cast<long>(y1); ++y, dst += W) {
          const long sy = y + dy;
          if (sy < 0 || sy >= H || x0 >= x1) {
            std::fill(dst, dst + W, T(0));
            continue;
          }
          const double* src = plane + sy * W + dx;
          std::fill(dst, dst + x0, T(0));
          for (long x = x0; x < x1; ++x) dst[x] = static_cast<T>(src[x]);
          std::fill(dst + x1, dst + W, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, std::size_t y0, std::size_t y1, double* out, std::size_t ld) {
  const long H = static_cast<long>(g.h), W = static_cast<long>(g.w);
  for (std::size_t c = 0; c < g.cin; ++c) {
    double* plane = out + c * g.h * g.w;
    for (std::size_t i = 0; i < g.kh; ++i) {
      const long dy = static_cast<long>(i) * g.dilation - g.pad_h;
      for (std::size_t j = 0; j < g.kw; ++j) {
        const long dx = static_cast<long>(j) * g.dilation - g.pad_w;
        const T* src = col + ((c * g.kh + i) * g.kw + j) * ld;
        const long x0 = std::clamp(-dx, 0L, W), x1 = std::clamp(W - dx, 0L, W);
        for (long y = static_cast<long>(y0); y < static_cast<long>(y1); ++y, src += W) {
          const long sy = y + dy;
          if (sy < 0 || sy >= H) continue;
          double* dst = plane + sy * W + dx;
          for (long x = x0; x < x1; ++x) dst[x] += static_cast<double>(src[x]);
        }
      }
    }
  }
}

// Image rows [y0,y1) of sample n.
struct Segment {
  std::size_t n, y0, y1;
};

// Groups the batch into blocks whose unfolded matrix stays near kBlockFloats
// elements: several whole samples at coarse resolutions, bands of rows at
// fine ones. Each block is one matrix product.
constexpr std::size_t kBlockFloats = std::size_t{1} << 18;

std::vector<std::vector<Segment>> plan_blocks(const ConvGeometry& g) {
  const std::size_t cols = std::max(g.w, kBlockFloats / g.rows());
  std::vector<std::vector<Segment>> blocks;
  if (g.pixels() <= cols) {
    const std::size_t per = std::min(g.n, cols / g.pixels());
    for (std::size_t first = 0; first < g.n; first += per) {
      blocks.emplace_back();
      for (std::size_t n = first; n < std::min(g.n, first + per); ++n) blocks.back().push_back({n, 0, g.h});
    }
  } else {
    const std::size_t rows = std::max<std::size_t>(1, cols / g.w);
    for (std::size_t n = 0; n < g.n; ++n)
      for (std::size_t y = 0; y < g.h; y += rows) blocks.push_back({{n, y, std::min(g.h, y + rows)}});
  }
  return blocks;
}

std::size_t block_columns(const std::vector<Segment>& block, const ConvGeometry& g) {
  std::size_t c = 0;
  for (const auto& s : block) c += (s.y1 - s.y0) * g.w;
  return c;
}

template <typename T>
void unfold_block(const Tensor& input, const ConvGeometry& g, const std::vector<Segment>& block, RowMat<T>& col) {
  const std::size_t ld = block_columns(block, g);
  col.resize(static_cast<Eigen::Index>(g.rows()), static_cast<Eigen::Index>(ld));
  std::size_t off = 0;
  for (const auto& s : block) {
    im2col(input.ptr() + s.n * g.cin * g.pixels(), g, s.y0, s.y1, col.data() + off, ld);
    off += (s.y1 - s.y0) * g.w;
  }
}

template <typename T>
void conv_forward_impl(const Tensor& input, const Tensor& kernel, const ConvGeometry& g, Tensor& out) {
  const auto R = static_cast<Eigen::Index>(g.rows()), C = static_cast<Eigen::Index>(g.cout);
  const RowMat<T> k = ConstMatMap<double>(kernel.ptr(), C, R).template cast<T>();
  RowMat<T> col, res;
  for (const auto& block : plan_blocks(g)) {
    unfold_block(input, g, block, col);
    res.resize(C, col.cols());
    res.noalias() = k * col;
    Eigen::Index off = 0;
    for (const auto& s : block) {
      const auto len = static_cast<Eigen::Index>((s.y1 - s.y0) * g.w);
      Eigen::Map<RowMat<double>, 0, Eigen::OuterStride<>> dst(out.ptr() + s.n * g.cout * g.pixels() + s.y0 * g.w, C, len,
                                                              Eigen::OuterStride<>(static_cast<Eigen::Index>(g.pixels())));
      dst += res.middleCols(off, len).template cast<double>();
      off += len;
    }
  }
}

template <typename T>
void conv_backward_impl(const Tensor& input, const Tensor& kernel, const Tensor& grad_out, const ConvGeometry& g,
                        Conv2dGrads& grads, bool need_input, bool need_kernel) {
  const auto R = static_cast<Eigen::Index>(g.rows()), C = static_cast<Eigen::Index>(g.cout);
  RowMat<T> kt;
  if (need_input) kt = ConstMatMap<double>(kernel.ptr(), C, R).transpose().template cast<T>();
  RowMat<T> dk;
  if (need_kernel) dk = RowMat<T>::Zero(C, R);
  RowMat<T> col, dcol, go;
  for (const auto& block : plan_blocks(g)) {
    const auto ld = static_cast<Eigen::Index>(block_columns(block, g));
    go.resize(C, ld);
    Eigen::Index off = 0;
    for (const auto& s : block) {
      const auto len = static_cast<Eigen::Index>((s.y1 - s.y0) * g.w);
      Eigen::Map<const RowMat<double>, 0, Eigen::OuterStride<>> src(
          grad_out.ptr() + s.n * g.cout * g.pixels() + s.y0 * g.w, C, len,
          Eigen::OuterStride<>(static_cast<Eigen::Index>(g.pixels())));
      go.middleCols(off, len) = src.template cast<T>();
      off += len;
    }
    if (need_kernel) {
      unfold_block(input, g, block, col);
      dk.noalias() += go * col.transpose();
    }
    if (need_input) {
      dcol.resize(R, ld);
      dcol.noalias() = kt * go;
      std::size_t o = 0;
      for (const auto& s : block) {
        col2im_add(dcol.data() + o, g, s.y0, s.y1, grads.input.ptr() + s.n * g.cin * g.pixels(),
                   static_cast<std::size_t>(ld));
        o += (s.y1 - s.y0) * g.w;
      }
    }
  }
  if (need_kernel) MatMap<double>(grads.kernel.ptr(), C, R) += dk.template cast<double>();
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) { require_shape(b, a.shape(), what); }

}  // namespace

Precision conv_precision() noexcept { return g_conv_precision; }
void set_conv_precision(Precision p) noexcept { g_conv_precision = p; }

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int dilation) {
  const auto g = conv_geometry(input, kernel, dilation);
  if (!bias.empty()) require_shape(bias, Shape{g.cout}, "conv2d bias");
  Tensor out(Shape{g.n, g.cout, g.h, g.w});
  if (!bias.empty()) {
    for (std::size_t n = 0; n < g.n; ++n)
      for (std::size_t o = 0; o < g.cout; ++o)
        std::fill_n(out.ptr() + (n * g.cout + o) * g.pixels(), g.pixels(), bias[o]);
  }
  if (g_conv_precision == Precision::F32)
    conv_forward_impl<float>(input, kernel, g, out);
  else
    conv_forward_impl<double>(input, kernel, g, out);
  return out;
}

Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& grad_out, int dilation,
                            bool need_input, bool need_kernel, bool need_bias) {
  const auto g = conv_geometry(input, kernel, dilation);
  require_shape(grad_out, Shape{g.n, g.cout, g.h, g.w}, "conv2d grad_out");
  Conv2dGrads grads;
  if (need_input) grads.input = Tensor(input.shape());
  if (need_kernel) grads.kernel = Tensor(kernel.shape());
  if (need_bias) {
    grads.bias = Tensor(Shape{g.cout});
    for (std::size_t n = 0; n < g.n; ++n)
      for (std::size_t o = 0; o < g.cout; ++o) {
        const double* p = grad_out.ptr() + (n * g.cout + o) * g.pixels();
        double s = 0.0;
        for (std::size_t i = 0; i < g.pixels(); ++i) s += p[i];
        grads.bias[o] += s;
      }
  }
  // With fewer output than input channels, the input gradient is cheaper as
  // a forward convolution of grad_out with the flipped, transposed kernel.
  const bool input_by_conv = need_input && g.cout < g.cin;
  if (input_by_conv) {
    Tensor flipped(Shape{g.cin, g.cout, g.kh, g.kw});
    for (std::size_t o = 0; o < g.cout; ++o)
      for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t i = 0; i < g.kh; ++i)
          for (std::size_t j = 0; j < g.kw; ++j)
            flipped[((c * g.cout + o) * g.kh + (g.kh - 1 - i)) * g.kw + (g.kw - 1 - j)] =
                kernel[((o * g.cin + c) * g.kh + i) * g.kw + j];
    const auto tg = conv_geometry(grad_out, flipped, dilation);
    if (g_conv_precision == Precision::F32)
      conv_forward_impl<float>(grad_out, flipped, tg, grads.input);
    else
      conv_forward_impl<double>(grad_out, flipped, tg, grads.input);
  }
  const bool input_by_scatter = need_input && !input_by_conv;
  if (input_by_scatter || need_kernel) {
    if (g_conv_precision == Precision::F32)
      conv_backward_impl<float>(input, kernel, grad_out, g, grads, input_by_scatter, need_kernel);
    else
      conv_backward_impl<double>(input, kernel, grad_out, g, grads, input_by_scatter, need_kernel);
  }
  return grads;
}

PoolResult maxpool2(const Tensor& input) {
  require_rank(input, 4, "maxpool2");
  const auto N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (H % 2 || W % 2) throw ShapeError("maxpool2: spatial dimensions must be even, got " + shape_str(input.shape()));
  const auto oh = H / 2, ow = W / 2;
  PoolResult r{Tensor(Shape{N, C, oh, ow}), std::vector<std::uint32_t>(N * C * oh * ow)};
  std::size_t o = 0;
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const std::size_t base = nc * H * W;
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x, ++o) {
        const std::size_t cand[4] = {base + 2 * y * W + 2 * x, base + 2 * y * W + 2 * x + 1,
                                     base + (2 * y + 1) * W + 2 * x, base + (2 * y + 1) * W + 2 * x + 1};
        std::size_t best = cand[0];
        for (int k = 1; k < 4; ++k)
          if (input[cand[k]] > input[best]) best = cand[k];
        r.output[o] = input[best];
        r.argmax[o] = static_cast<std::uint32_t>(best);
      }
  }
  return r;
}

Tensor upsample_nearest2(const Tensor& input) {
  require_rank(input, 4, "upsample_nearest2");
  const auto N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  Tensor out(Shape{N, C, 2 * H, 2 * W});
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t y = 0; y < 2 * H; ++y)
      for (std::size_t x = 0; x < 2 * W; ++x)
        out[(nc * 2 * H + y) * 2 * W + x] = input[(nc * H + y / 2) * W + x / 2];
  return out;
}

Tensor leaky_relu(const Tensor& x, double slope) {
  if (slope < 0) throw std::invalid_argument("leaky_relu: slope must be non-negative");
  Tensor y = x;
  for (auto& v : y.data())
    if (v < 0) v *= slope;
  return y;
}

Tensor relu(const Tensor& x) { return leaky_relu(x, 0.0); }

Tensor sigmoid(const Tensor& x) {
  Tensor y = x;
  for (auto& v : y.data()) {
    if (v >= 0) {
      v = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      v = e / (1.0 + e);
    }
  }
  return y;
}

namespace ad {

Var add(Graph& g, Var a, Var b) {
  const auto& va = g.value(a);
  check_same_shape(va, g.value(b), "add");
  return g.record("add", {a, b}, va + g.value(b),
                  [](const Graph&, std::size_t, const Tensor& go) { return std::vector<Tensor>{go, go}; });
}

Var sub(Graph& g, Var a, Var b) {
  const auto& va = g.value(a);
  check_same_shape(va, g.value(b), "sub");
  return g.record("sub", {a, b}, va - g.value(b),
                  [](const Graph&, std::size_t, const Tensor& go) { return std::vector<Tensor>{go, go * -1.0}; });
}

Var mul(Graph& g, Var a, Var b) {
  const auto& va = g.value(a);
  const auto& vb = g.value(b);
  check_same_shape(va, vb, "mul");
  Tensor out = va;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
  return g.record("mul", {a, b}, std::move(out), [a, b](const Graph& gr, std::size_t, const Tensor& go) {
    const auto& xa = gr.value(a);
    const auto& xb = gr.value(b);
    Tensor da = go, db = go;
    for (std::size_t i = 0; i < go.size(); ++i) {
      da[i] *= xb[i];
      db[i] *= xa[i];
    }
    return std::vector<Tensor>{std::move(da), std::move(db)};
  });
}

Var scale(Graph& g, Var a, double s) {
  return g.record("scale", {a}, g.value(a) * s,
                  [s](const Graph&, std::size_t, const Tensor& go) { return std::vector<Tensor>{go * s}; });
}

Var sum(Graph& g, Var a) {
  return g.record("sum", {a}, Tensor::scalar(hcl::sum(g.value(a))), [a](const Graph& gr, std::size_t, const Tensor& go) {
    return std::vector<Tensor>{Tensor(gr.value(a).shape(), go.item())};
  });
}

Var weighted_sum(Graph& g, Var a, const Tensor& w) {
  const auto& va = g.value(a);
  check_same_shape(va, w, "weighted_sum");
  double s = 0.0;
  for (std::size_t i = 0; i < va.size(); ++i) s += va[i] * w[i];
  return g.record("weighted_sum", {a}, Tensor::scalar(s),
                  [w](const Graph&, std::size_t, const Tensor& go) { return std::vector<Tensor>{w * go.item()}; });
}

Var conv2d(Graph& g, Var input, Var kernel, Var bias, int dilation) {
  Tensor out = hcl::conv2d(g.value(input), g.value(kernel), bias.valid() ? g.value(bias) : Tensor{}, dilation);
  std::vector<Var> ins{input, kernel};
  if (bias.valid()) ins.push_back(bias);
  return g.record("conv2d", std::move(ins), std::move(out),
                  [input, kernel, bias, dilation](const Graph& gr, std::size_t, const Tensor& go) {
                    auto grads = conv2d_backward(gr.value(input), gr.value(kernel), go, dilation,
                                                 gr.requires_grad(input), gr.requires_grad(kernel),
                                                 bias.valid() && gr.requires_grad(bias));
                    std::vector<Tensor> res{std::move(grads.input), std::move(grads.kernel)};
                    if (bias.valid()) res.push_back(std::move(grads.bias));
                    return res;
                  });
}

Var maxpool2(Graph& g, Var input) {
  auto pooled = hcl::maxpool2(g.value(input));
  return g.record("maxpool2", {input}, std::move(pooled.output),
                  [input, argmax = std::move(pooled.argmax)](const Graph& gr, std::size_t, const Tensor& go) {
                    Tensor gi(gr.value(input).shape());
                    for (std::size_t o = 0; o < go.size(); ++o) gi[argmax[o]] += go[o];
                    return std::vector<Tensor>{std::move(gi)};
                  });
}

Var upsample_nearest2(Graph& g, Var input) {
  return g.record("upsample_nearest2", {input}, hcl::upsample_nearest2(g.value(input)),
                  [input](const Graph& gr, std::size_t, const Tensor& go) {
                    const auto& shape = gr.value(input).shape();
                    const auto H = shape[2], W = shape[3];
                    Tensor gi(shape);
                    for (std::size_t nc = 0; nc < shape[0] * shape[1]; ++nc)
                      for (std::size_t y = 0; y < 2 * H; ++y)
                        for (std::size_t x = 0; x < 2 * W; ++x)
                          gi[(nc * H + y / 2) * W + x / 2] += go[(nc * 2 * H + y) * 2 * W + x];
                    return std::vector<Tensor>{std::move(gi)};
                  });
}

Var leaky_relu(Graph& g, Var x, double slope) {
  return g.record("leaky_relu", {x}, hcl::leaky_relu(g.value(x), slope),
                  [x, slope](const Graph& gr, std::size_t, const Tensor& go) {
                    const auto& xv = gr.value(x);
                    Tensor gi = go;
                    for (std::size_t i = 0; i < gi.size(); ++i)
                      if (xv[i] < 0) gi[i] *= slope;
                    return std::vector<Tensor>{std::move(gi)};
                  });
}

Var relu(Graph& g, Var x) { return leaky_relu(g, x, 0.0); }

Var sigmoid(Graph& g, Var x) {
  return g.record("sigmoid", {x}, hcl::sigmoid(g.value(x)), [](const Graph& gr, std::size_t self, const Tensor& go) {
    const auto& y = gr.node(self).value;
    Tensor gi = go;
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] *= y[i] * (1.0 - y[i]);
    return std::vector<Tensor>{std::move(gi)};
  });
}

Var concat_channels(Graph& g, Var a, Var b) {
  const auto& va = g.value(a);
  const auto& vb = g.value(b);
  require_rank(va, 4, "concat_channels");
  require_rank(vb, 4, "concat_channels");
  if (va.dim(0) != vb.dim(0) || va.dim(2) != vb.dim(2) || va.dim(3) != vb.dim(3))
    throw ShapeError("concat_channels: incompatible shapes " + shape_str(va.shape()) + " and " + shape_str(vb.shape()));
  const auto N = va.dim(0), ca = va.dim(1), cb = vb.dim(1), P = va.dim(2) * va.dim(3);
  Tensor out(Shape{N, ca + cb, va.dim(2), va.dim(3)});
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(va.ptr() + n * ca * P, ca * P, out.ptr() + n * (ca + cb) * P);
    std::copy_n(vb.ptr() + n * cb * P, cb * P, out.ptr() + (n * (ca + cb) + ca) * P);
  }
  return g.record("concat_channels", {a, b}, std::move(out),
                  [a, b, N, ca, cb, P](const Graph& gr, std::size_t, const Tensor& go) {
                    Tensor ga(gr.value(a).shape()), gb(gr.value(b).shape());
                    for (std::size_t n = 0; n < N; ++n) {
                      std::copy_n(go.ptr() + n * (ca + cb) * P, ca * P, ga.ptr() + n * ca * P);
                      std::copy_n(go.ptr() + (n * (ca + cb) + ca) * P, cb * P, gb.ptr() + n * cb * P);
                    }
                    return std::vector<Tensor>{std::move(ga), std::move(gb)};
                  });
}

Var batchnorm2d(Graph& g, Var x, Var gamma, Var beta, BatchNormState& state, Mode mode) {
  const auto& xv = g.value(x);
  require_rank(xv, 4, "batchnorm2d");
  const auto N = xv.dim(0), C = xv.dim(1), P = xv.dim(2) * xv.dim(3);
  require_shape(g.value(gamma), Shape{C}, "batchnorm2d gamma");
  require_shape(g.value(beta), Shape{C}, "batchnorm2d beta");
  require_shape(state.running_mean, Shape{C}, "batchnorm2d running_mean");
  const std::size_t M = N * P;
  if (mode == Mode::Train && M < 2)
    throw std::invalid_argument("batchnorm2d: train mode needs at least 2 values per channel");

  std::vector<double> mean(C), inv_std(C);
  if (mode == Mode::Train) {
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const double* p = xv.ptr() + (n * C + c) * P;
        for (std::size_t i = 0; i < P; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(M);
      double ss = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const double* p = xv.ptr() + (n * C + c) * P;
        for (std::size_t i = 0; i < P; ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      const double var = ss / static_cast<double>(M);
      mean[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + state.eps);
      state.running_mean[c] = (1.0 - state.momentum) * state.running_mean[c] + state.momentum * mu;
      // Running variance tracks the unbiased estimate.
      state.running_var[c] = (1.0 - state.momentum) * state.running_var[c] +
                             state.momentum * ss / static_cast<double>(M - 1);
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = state.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(state.running_var[c] + state.eps);
    }
  }

  const auto& gv = g.value(gamma);
  const auto& bv = g.value(beta);
  Tensor xhat(xv.shape());
  Tensor out(xv.shape());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (n * C + c) * P;
      for (std::size_t i = 0; i < P; ++i) {
        const double h = (xv[off + i] - mean[c]) * inv_std[c];
        xhat[off + i] = h;
        out[off + i] = gv[c] * h + bv[c];
      }
    }

  return g.record(
      "batchnorm2d", {x, gamma, beta}, std::move(out),
      [x, gamma, mode, N, C, P, M, inv_std = std::move(inv_std), xhat = std::move(xhat)](
          const Graph& gr, std::size_t, const Tensor& go) {
        const auto& gv = gr.value(gamma);
        Tensor dgamma(Shape{C}), dbeta(Shape{C});
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t off = (n * C + c) * P;
            for (std::size_t i = 0; i < P; ++i) {
              dgamma[c] += go[off + i] * xhat[off + i];
              dbeta[c] += go[off + i];
            }
          }
        Tensor dx;
        if (gr.requires_grad(x)) {
          dx = Tensor(go.shape());
          const double m = static_cast<double>(M);
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c) {
              const std::size_t off = (n * C + c) * P;
              if (mode == Mode::Train) {
                // dgamma and dbeta are exactly the per-channel sums of dy*xhat and dy.
                const double k = gv[c] * inv_std[c] / m;
                for (std::size_t i = 0; i < P; ++i)
                  dx[off + i] = k * (m * go[off + i] - dbeta[c] - xhat[off + i] * dgamma[c]);
              } else {
                const double k = gv[c] * inv_std[c];
                for (std::size_t i = 0; i < P; ++i) dx[off + i] = k * go[off + i];
              }
            }
        }
        return std::vector<Tensor>{std::move(dx), std::move(dgamma), std::move(dbeta)};
      });
}

Var dropout(Graph& g, Var x, double p, Mode mode, std::mt19937_64& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("dropout: probability must lie in [0, 1)");
  if (mode == Mode::Eval || p == 0.0) return x;
  const auto& xv = g.value(x);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double keep_scale = 1.0 / (1.0 - p);
  Tensor mask(xv.shape());
  for (auto& m : mask.data()) m = u(rng) < p ? 0.0 : keep_scale;
  Tensor out = xv;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return g.record("dropout", {x}, std::move(out), [mask = std::move(mask)](const Graph&, std::size_t, const Tensor& go) {
    Tensor gi = go;
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] *= mask[i];
    return std::vector<Tensor>{std::move(gi)};
  });
}

Var linear(Graph& g, Var x, Var w, Var b) {
  const auto& xv = g.value(x);
  const auto& wv = g.value(w);
  require_rank(xv, 2, "linear input");
  require_rank(wv, 2, "linear weight");
  const auto M = static_cast<Eigen::Index>(xv.dim(0)), K = static_cast<Eigen::Index>(xv.dim(1)),
             N = static_cast<Eigen::Index>(wv.dim(1));
  if (wv.dim(0) != xv.dim(1))
    throw ShapeError("linear: cannot multiply " + shape_str(xv.shape()) + " by " + shape_str(wv.shape()));
  // Fixed summation order per row.
  Tensor out(Shape{xv.dim(0), wv.dim(1)});
  for (Eigen::Index i = 0; i < M; ++i) {
    double* o = out.ptr() + i * N;
    for (Eigen::Index k = 0; k < K; ++k) {
      const double a = xv[static_cast<std::size_t>(i * K + k)];
      const double* wr = wv.ptr() + k * N;
      for (Eigen::Index j = 0; j < N; ++j) o[j] += a * wr[j];
    }
  }
  std::vector<Var> ins{x, w};
  if (b.valid()) {
    const auto& bv = g.value(b);
    require_shape(bv, Shape{wv.dim(1)}, "linear bias");
    for (Eigen::Index i = 0; i < M; ++i)
      for (Eigen::Index j = 0; j < N; ++j) out[i * N + j] += bv[j];
    ins.push_back(b);
  }
  return g.record("linear", std::move(ins), std::move(out), [x, w, b, M, K, N](const Graph& gr, std::size_t, const Tensor& go) {
    const ConstMatMap<double> gm(go.ptr(), M, N);
    Tensor dx, dw, db;
    if (gr.requires_grad(x)) {
      dx = Tensor(gr.value(x).shape());
      MatMap<double>(dx.ptr(), M, K).noalias() = gm * ConstMatMap<double>(gr.value(w).ptr(), K, N).transpose();
    }
    if (gr.requires_grad(w)) {
      dw = Tensor(gr.value(w).shape());
      MatMap<double>(dw.ptr(), K, N).noalias() = ConstMatMap<double>(gr.value(x).ptr(), M, K).transpose() * gm;
    }
    std::vector<Tensor> res{std::move(dx), std::move(dw)};
    if (b.valid()) {
      db = Tensor(Shape{static_cast<std::size_t>(N)});
      for (Eigen::Index i = 0; i < M; ++i)
        for (Eigen::Index j = 0; j < N; ++j) db[j] += go[i * N + j];
      res.push_back(std::move(db));
    }
    return res;
  });
}

Var add_row(Graph& g, Var x, Var row) {
  const auto& xv = g.value(x);
  require_rank(xv, 2, "add_row");
  const auto M = xv.dim(0), N = xv.dim(1);
  require_shape(g.value(row), Shape{N}, "add_row vector");
  const auto& rv = g.value(row);
  Tensor out = xv;
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) out[i * N + j] += rv[j];
  return g.record("add_row", {x, row}, std::move(out), [M, N](const Graph&, std::size_t, const Tensor& go) {
    Tensor dr(Shape{N});
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t j = 0; j < N; ++j) dr[j] += go[i * N + j];
    return std::vector<Tensor>{go, std::move(dr)};
  });
}

Var reshape(Graph& g, Var x, Shape shape) {
  return g.record("reshape", {x}, g.value(x).reshaped(std::move(shape)),
                  [x](const Graph& gr, std::size_t, const Tensor& go) {
                    return std::vector<Tensor>{go.reshaped(gr.value(x).shape())};
                  });
}

Var mse(Graph& g, Var pred, const Tensor& target) {
  const auto& pv = g.value(pred);
  check_same_shape(pv, target, "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) s += (pv[i] - target[i]) * (pv[i] - target[i]);
  const double n = static_cast<double>(pv.size());
  return g.record("mse", {pred}, Tensor::scalar(s / n), [pred, target, n](const Graph& gr, std::size_t, const Tensor& go) {
    const auto& p = gr.value(pred);
    Tensor gi(p.shape());
    const double k = 2.0 * go.item() / n;
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] = k * (p[i] - target[i]);
    return std::vector<Tensor>{std::move(gi)};
  });
}

}  // namespace ad
}  // namespace hcl
