#pragma once

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "focusnet/autodiff.hpp"
#include "focusnet/flops.hpp"

namespace focusnet {

enum class Mode { train, eval };

namespace detail {

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  require(a.shape() == b.shape(), Errc::shape,
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
              " vs " + shape_str(b.shape()));
}

inline void require_4d(const Var& x, const char* op) {
  require(x.value().ndim() == 4, Errc::shape,
          std::string(op) + ": expected NCHW input, got " + shape_str(x.shape()));
}

inline void accumulate(Tensor* dst, std::size_t i, double v) {
  if (dst) (*dst)[i] += v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution

/// Stride-1 convolution with zero "same" padding. Kernels must be odd.
struct ConvSpec {
  std::size_t kernel_h = 3;
  std::size_t kernel_w = 3;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t groups = 1;
  bool has_bias = false;

  void validate() const {
    require(kernel_h > 0 && kernel_w > 0 && in_channels > 0 &&
                out_channels > 0 && groups > 0,
            Errc::shape, "conv2d: all spec fields must be positive");
    require(kernel_h % 2 == 1 && kernel_w % 2 == 1, Errc::shape,
            "conv2d: same-zero padding needs odd kernel sizes");
    require(in_channels % groups == 0 && out_channels % groups == 0,
            Errc::shape,
            "conv2d: channels " + std::to_string(in_channels) + "->" +
                std::to_string(out_channels) + " not divisible by groups " +
                std::to_string(groups));
  }

  std::size_t in_per_group() const { return in_channels / groups; }
  std::size_t out_per_group() const { return out_channels / groups; }
  Shape weight_shape() const {
    return {out_channels, in_per_group(), kernel_h, kernel_w};
  }
  std::size_t param_count() const {
    return shape_size(weight_shape()) + (has_bias ? out_channels : 0);
  }
  std::uint64_t flops(std::size_t h, std::size_t w) const {
    std::uint64_t f = 2ULL * kernel_h * kernel_w * in_per_group() *
                      out_channels * h * w;
    if (has_bias) f += static_cast<std::uint64_t>(out_channels) * h * w;
    return f;
  }
};

namespace detail {

// Row block [y0, y1) of the im2col matrix:
// col[(c*kh + i)*kw + j][(y-y0)*W + x] = src[c][y+i-ph][x+j-pw], zero outside.
inline void im2col(const double* src, std::size_t channels, std::size_t height,
                   std::size_t width, std::size_t kh, std::size_t kw, std::size_t y0,
                   std::size_t y1, double* col) {
  const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(kh / 2);
  const std::ptrdiff_t pw = static_cast<std::ptrdiff_t>(kw / 2);
  const std::ptrdiff_t H = static_cast<std::ptrdiff_t>(height);
  const std::ptrdiff_t W = static_cast<std::ptrdiff_t>(width);
  const std::size_t cols = (y1 - y0) * width;
  for (std::size_t c = 0; c < channels; ++c) {
    const double* plane = src + c * height * width;
    for (std::size_t i = 0; i < kh; ++i) {
      for (std::size_t j = 0; j < kw; ++j) {
        double* row = col + ((c * kh + i) * kw + j) * cols;
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(i) - ph;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(j) - pw;
        const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx);
        const std::ptrdiff_t x1 = std::min<std::ptrdiff_t>(W, W - dx);
        for (std::ptrdiff_t y = static_cast<std::ptrdiff_t>(y0);
             y < static_cast<std::ptrdiff_t>(y1); ++y) {
          double* out = row + (y - static_cast<std::ptrdiff_t>(y0)) * W;
          const std::ptrdiff_t sy = y + dy;
          if (sy < 0 || sy >= H || x0 >= x1) {
            std::fill(out, out + W, 0.0);
            continue;
          }
          const double* in = plane + sy * W;
          std::fill(out, out + x0, 0.0);
          std::copy(in + x0 + dx, in + x1 + dx, out + x0);
          std::fill(out + x1, out + W, 0.0);
        }
      }
    }
  }
}

// Adjoint of im2col over the same row block: dst += scatter(col).
inline void col2im_add(const double* col, std::size_t channels, std::size_t height,
                       std::size_t width, std::size_t kh, std::size_t kw, std::size_t y0,
                       std::size_t y1, double* dst) {
  const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(kh / 2);
  const std::ptrdiff_t pw = static_cast<std::ptrdiff_t>(kw / 2);
  const std::ptrdiff_t H = static_cast<std::ptrdiff_t>(height);
  const std::ptrdiff_t W = static_cast<std::ptrdiff_t>(width);
  const std::size_t cols = (y1 - y0) * width;
  for (std::size_t c = 0; c < channels; ++c) {
    double* plane = dst + c * height * width;
    for (std::size_t i = 0; i < kh; ++i) {
      for (std::size_t j = 0; j < kw; ++j) {
        const double* row = col + ((c * kh + i) * kw + j) * cols;
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(i) - ph;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(j) - pw;
        const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx);
        const std::ptrdiff_t x1 = std::min<std::ptrdiff_t>(W, W - dx);
        for (std::ptrdiff_t y = static_cast<std::ptrdiff_t>(y0);
             y < static_cast<std::ptrdiff_t>(y1); ++y) {
          const std::ptrdiff_t sy = y + dy;
          if (sy < 0 || sy >= H) continue;
          const double* in = row + (y - static_cast<std::ptrdiff_t>(y0)) * W;
          double* out = plane + sy * W;
          for (std::ptrdiff_t x = x0; x < x1; ++x) out[x + dx] += in[x];
        }
      }
    }
  }
}

// Row-major C[m x n] = op(A) op(B) + beta C with explicit leading dimensions.
inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                 const double* a, std::size_t lda, const double* b, std::size_t ldb,
                 double beta, double* c, std::size_t ldc) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<blasint>(m),
              static_cast<blasint>(n), static_cast<blasint>(k), 1.0, a,
              static_cast<blasint>(lda), b, static_cast<blasint>(ldb), beta, c,
              static_cast<blasint>(ldc));
}

// Rows per im2col block so that one block stays near 256 KiB.
inline std::size_t im2col_block_rows(std::size_t K, std::size_t H, std::size_t W) {
  constexpr std::size_t kTargetValues = 32768;
  return std::clamp<std::size_t>(kTargetValues / std::max<std::size_t>(1, K * W), 1, H);
}

// Groups with cin * cout up to this use the direct kernels on large planes.
inline constexpr std::size_t kDirectConvMaxProduct = 16;
inline constexpr std::size_t kDirectConvMinPlane = 1024;

// Direct convolution on shifted rows; cheaper than im2col + GEMM when both
// channel counts are small. Weights are (cout, cin, kh, kw).
struct Tap {
  std::ptrdiff_t dy, dx, y0, y1, x0, x1;  // valid output rows [y0,y1), cols [x0,x1)
};

inline Tap make_tap(std::size_t i, std::size_t j, std::size_t kh, std::size_t kw,
                    std::size_t H, std::size_t W) {
  Tap t;
  t.dy = static_cast<std::ptrdiff_t>(i) - static_cast<std::ptrdiff_t>(kh / 2);
  t.dx = static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(kw / 2);
  const auto h = static_cast<std::ptrdiff_t>(H), w = static_cast<std::ptrdiff_t>(W);
  t.y0 = std::max<std::ptrdiff_t>(0, -t.dy);
  t.y1 = std::min<std::ptrdiff_t>(h, h - t.dy);
  t.x0 = std::max<std::ptrdiff_t>(0, -t.dx);
  t.x1 = std::min<std::ptrdiff_t>(w, w - t.dx);
  return t;
}

// dst (cout planes) = conv(src (cin planes)); dst is overwritten.
inline void direct_forward(const double* src, std::size_t cin, std::size_t cout,
                           std::size_t H, std::size_t W, std::size_t kh, std::size_t kw,
                           const double* w, double* dst) {
  const std::size_t HW = H * W, taps = kh * kw;
  std::fill(dst, dst + cout * HW, 0.0);
  for (std::size_t co = 0; co < cout; ++co)
    for (std::size_t ci = 0; ci < cin; ++ci)
      for (std::size_t t = 0; t < taps; ++t) {
        const Tap tap = make_tap(t / kw, t % kw, kh, kw, H, W);
        const double wv = w[(co * cin + ci) * taps + t];
        const double* in = src + ci * HW + tap.dx;
        double* out = dst + co * HW;
        for (std::ptrdiff_t y = tap.y0; y < tap.y1; ++y) {
          const double* ir = in + (y + tap.dy) * static_cast<std::ptrdiff_t>(W);
          double* orow = out + y * static_cast<std::ptrdiff_t>(W);
          for (std::ptrdiff_t x = tap.x0; x < tap.x1; ++x) orow[x] += wv * ir[x];
        }
      }
}

// dx (cin planes) += conv_transpose(gy (cout planes)).
inline void direct_backward_data(const double* gy, std::size_t cin, std::size_t cout,
                                 std::size_t H, std::size_t W, std::size_t kh,
                                 std::size_t kw, const double* w, double* dx) {
  const std::size_t HW = H * W, taps = kh * kw;
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t t = 0; t < taps; ++t) {
        const Tap tap = make_tap(t / kw, t % kw, kh, kw, H, W);
        const double wv = w[(co * cin + ci) * taps + t];
        double* out = dx + ci * HW + tap.dx;
        const double* g = gy + co * HW;
        for (std::ptrdiff_t y = tap.y0; y < tap.y1; ++y) {
          double* orow = out + (y + tap.dy) * static_cast<std::ptrdiff_t>(W);
          const double* grow = g + y * static_cast<std::ptrdiff_t>(W);
          for (std::ptrdiff_t x = tap.x0; x < tap.x1; ++x) orow[x] += wv * grow[x];
        }
      }
}

// dw += correlation of gy (cout planes) with src (cin planes).
inline void direct_backward_weights(const double* gy, const double* src, std::size_t cin,
                                    std::size_t cout, std::size_t H, std::size_t W,
                                    std::size_t kh, std::size_t kw, double* dw) {
  const std::size_t HW = H * W, taps = kh * kw;
  for (std::size_t co = 0; co < cout; ++co)
    for (std::size_t ci = 0; ci < cin; ++ci)
      for (std::size_t t = 0; t < taps; ++t) {
        const Tap tap = make_tap(t / kw, t % kw, kh, kw, H, W);
        const double* in = src + ci * HW + tap.dx;
        const double* g = gy + co * HW;
        double s = 0.0;
        for (std::ptrdiff_t y = tap.y0; y < tap.y1; ++y) {
          const double* ir = in + (y + tap.dy) * static_cast<std::ptrdiff_t>(W);
          const double* grow = g + y * static_cast<std::ptrdiff_t>(W);
#pragma omp simd reduction(+ : s)
          for (std::ptrdiff_t x = tap.x0; x < tap.x1; ++x) s += grow[x] * ir[x];
        }
        dw[(co * cin + ci) * taps + t] += s;
      }
}

enum class ConvAlgo { automatic, gemm, direct };

inline ConvAlgo& conv_algo_override() {
  thread_local ConvAlgo algo = ConvAlgo::automatic;
  return algo;
}

inline bool use_direct(const ConvSpec& spec, std::size_t plane) {
  if (spec.kernel_h == 1 && spec.kernel_w == 1) return false;
  switch (conv_algo_override()) {
    case ConvAlgo::gemm: return false;
    case ConvAlgo::direct: return true;
    default:
      return spec.in_per_group() * spec.out_per_group() <= kDirectConvMaxProduct &&
             plane >= kDirectConvMinPlane;
  }
}

}  // namespace detail

using detail::ConvAlgo;

/// Forces one convolution algorithm on this thread while alive (testing).
class ForceConvAlgo {
 public:
  explicit ForceConvAlgo(ConvAlgo a) : saved_(detail::conv_algo_override()) {
    detail::conv_algo_override() = a;
  }
  ~ForceConvAlgo() { detail::conv_algo_override() = saved_; }
  ForceConvAlgo(const ForceConvAlgo&) = delete;
  ForceConvAlgo& operator=(const ForceConvAlgo&) = delete;

 private:
  ConvAlgo saved_;
};

inline Var conv2d(const Var& x, const ConvSpec& spec, const Var& weights,
                  const std::optional<Var>& bias = std::nullopt) {
  spec.validate();
  detail::require_4d(x, "conv2d");
  require(x.dim(1) == spec.in_channels, Errc::shape,
          "conv2d: input has " + std::to_string(x.dim(1)) +
              " channels, spec expects " + std::to_string(spec.in_channels));
  require(weights.shape() == spec.weight_shape(), Errc::shape,
          "conv2d: weight shape " + shape_str(weights.shape()) +
              " does not match spec " + shape_str(spec.weight_shape()));
  require(spec.has_bias == bias.has_value(), Errc::shape,
          "conv2d: bias presence does not match spec");
  if (bias)
    require(bias->shape() == Shape{spec.out_channels}, Errc::shape,
            "conv2d: bias must have one value per output channel");

  const std::size_t N = x.dim(0), H = x.dim(2), W = x.dim(3), HW = H * W;
  const std::size_t G = spec.groups, cin = spec.in_per_group(),
                    cout = spec.out_per_group();
  const std::size_t K = cin * spec.kernel_h * spec.kernel_w;
  const bool pointwise = spec.kernel_h == 1 && spec.kernel_w == 1;
  const bool direct = detail::use_direct(spec, HW);

  const std::size_t rows = detail::im2col_block_rows(K, H, W);
  Tensor out({N, spec.out_channels, H, W});
  std::vector<double> col(pointwise || direct ? 0 : K * rows * W);
  const double* xp = x.value().ptr();
  const double* wp = weights.value().ptr();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t g = 0; g < G; ++g) {
      const double* src = xp + (n * spec.in_channels + g * cin) * HW;
      double* dst = out.ptr() + (n * spec.out_channels + g * cout) * HW;
      if (direct) {
        detail::direct_forward(src, cin, cout, H, W, spec.kernel_h, spec.kernel_w,
                               wp + g * cout * K, dst);
        continue;
      }
      if (pointwise) {
        detail::gemm(false, false, cout, HW, K, wp + g * cout * K, K, src, HW, 0.0, dst, HW);
        continue;
      }
      for (std::size_t y0 = 0; y0 < H; y0 += rows) {
        const std::size_t y1 = std::min(H, y0 + rows), cols = (y1 - y0) * W;
        detail::im2col(src, cin, H, W, spec.kernel_h, spec.kernel_w, y0, y1, col.data());
        detail::gemm(false, false, cout, cols, K, wp + g * cout * K, K, col.data(), cols, 0.0,
                     dst + y0 * W, HW);
      }
    }
    if (bias) {
      for (std::size_t c = 0; c < spec.out_channels; ++c) {
        const double b = bias->value()[c];
        double* dst = out.ptr() + (n * spec.out_channels + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) dst[i] += b;
      }
    }
  }
  detail::count_flops("conv", N * spec.flops(H, W));

  std::vector<Var> inputs{x, weights};
  if (bias) inputs.push_back(*bias);
  return record(std::move(out), std::move(inputs), "conv2d",
                [spec, N, H, W, HW, G, cin, cout, K, rows, pointwise, direct](Node& self) {
    const Tensor& dy = self.grad;
    const Tensor& xv = self.inputs[0]->value;
    const Tensor& wv = self.inputs[1]->value;
    Tensor* dx = input_grad(self, 0);
    Tensor* dw = input_grad(self, 1);
    Tensor* db = self.inputs.size() > 2 ? input_grad(self, 2) : nullptr;
    const bool cols_needed = !pointwise && !direct;
    std::vector<double> col(cols_needed ? K * rows * W : 0);
    std::vector<double> dcol(cols_needed ? K * rows * W : 0);
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t g = 0; g < G; ++g) {
        const double* gy = dy.ptr() + (n * spec.out_channels + g * cout) * HW;
        const std::size_t xoff = (n * spec.in_channels + g * cin) * HW;
        const double* wg = wv.ptr() + g * cout * K;
        if (direct) {
          if (dw)
            detail::direct_backward_weights(gy, xv.ptr() + xoff, cin, cout, H, W,
                                            spec.kernel_h, spec.kernel_w,
                                            dw->ptr() + g * cout * K);
          if (dx)
            detail::direct_backward_data(gy, cin, cout, H, W, spec.kernel_h,
                                         spec.kernel_w, wg, dx->ptr() + xoff);
          continue;
        }
        if (pointwise) {
          if (dw)
            detail::gemm(false, true, cout, K, HW, gy, HW, xv.ptr() + xoff, HW, 1.0,
                         dw->ptr() + g * cout * K, K);
          if (dx)
            detail::gemm(true, false, K, HW, cout, wg, K, gy, HW, 1.0, dx->ptr() + xoff, HW);
          continue;
        }
        for (std::size_t y0 = 0; y0 < H; y0 += rows) {
          const std::size_t y1 = std::min(H, y0 + rows), cols = (y1 - y0) * W;
          if (dw) {
            detail::im2col(xv.ptr() + xoff, cin, H, W, spec.kernel_h, spec.kernel_w, y0, y1,
                           col.data());
            detail::gemm(false, true, cout, K, cols, gy + y0 * W, HW, col.data(), cols, 1.0,
                         dw->ptr() + g * cout * K, K);
          }
          if (dx) {
            detail::gemm(true, false, K, cols, cout, wg, K, gy + y0 * W, HW, 0.0, dcol.data(),
                         cols);
            detail::col2im_add(dcol.data(), cin, H, W, spec.kernel_h, spec.kernel_w, y0, y1,
                               dx->ptr() + xoff);
          }
        }
      }
      if (db) {
        for (std::size_t c = 0; c < spec.out_channels; ++c) {
          const double* gy = dy.ptr() + (n * spec.out_channels + c) * HW;
          double s = 0.0;
          for (std::size_t i = 0; i < HW; ++i) s += gy[i];
          (*db)[c] += s;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Resampling

/// 2x2, stride-2 max pooling. Ties resolve to the first element in scan order.
inline Var max_pool2(const Var& x) {
  detail::require_4d(x, "max_pool2");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(H % 2 == 0 && W % 2 == 0, Errc::shape,
          "max_pool2: spatial dims must be even, got " + shape_str(x.shape()));
  const std::size_t Ho = H / 2, Wo = W / 2;
  Tensor out({N, C, Ho, Wo});
  std::vector<std::uint32_t> argmax(out.size());
  const double* xp = x.value().ptr();
  for (std::size_t p = 0; p < N * C; ++p) {
    const double* plane = xp + p * H * W;
    for (std::size_t i = 0; i < Ho; ++i) {
      for (std::size_t j = 0; j < Wo; ++j) {
        std::size_t best = (2 * i) * W + 2 * j;
        for (std::size_t idx : {(2 * i) * W + 2 * j + 1, (2 * i + 1) * W + 2 * j,
                                (2 * i + 1) * W + 2 * j + 1})
          if (plane[idx] > plane[best]) best = idx;
        const std::size_t o = (p * Ho + i) * Wo + j;
        out[o] = plane[best];
        argmax[o] = static_cast<std::uint32_t>(p * H * W + best);
      }
    }
  }
  detail::count_flops("pool", out.size());
  return record(std::move(out), {x}, "max_pool2",
                [argmax = std::move(argmax)](Node& self) {
    Tensor* dx = input_grad(self, 0);
    if (!dx) return;
    for (std::size_t o = 0; o < argmax.size(); ++o) (*dx)[argmax[o]] += self.grad[o];
  });
}

/// Nearest-neighbour 2x upsampling: every value becomes a 2x2 patch.
inline Var upsample_repeat2(const Var& x) {
  detail::require_4d(x, "upsample_repeat2");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Ho = 2 * H, Wo = 2 * W;
  Tensor out({N, C, Ho, Wo});
  const double* xp = x.value().ptr();
  for (std::size_t p = 0; p < N * C; ++p)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j)
        out[(p * Ho + i) * Wo + j] = xp[(p * H + i / 2) * W + j / 2];
  return record(std::move(out), {x}, "upsample_repeat2",
                [N, C, H, W](Node& self) {
    Tensor* dx = input_grad(self, 0);
    if (!dx) return;
    const std::size_t Ho = 2 * H, Wo = 2 * W;
    for (std::size_t p = 0; p < N * C; ++p)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j)
          (*dx)[(p * H + i / 2) * W + j / 2] += self.grad[(p * Ho + i) * Wo + j];
  });
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

// y = f(x), dy/dx = df(x, y).
template <typename F, typename DF>
Var unary(const Var& x, const char* op, F f, DF df) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  const double* __restrict xp = xv.ptr();
  double* __restrict op_ = out.ptr();
  for (std::size_t i = 0, n = xv.size(); i < n; ++i) op_[i] = f(xp[i]);
  count_flops("elementwise", out.size());
  return record(std::move(out), {x}, op, [df](Node& self) {
    Tensor* dx = input_grad(self, 0);
    if (!dx) return;
    const double* __restrict xin = self.inputs[0]->value.ptr();
    const double* __restrict y = self.value.ptr();
    const double* __restrict g = self.grad.ptr();
    double* __restrict d = dx->ptr();
    for (std::size_t i = 0, n = dx->size(); i < n; ++i) d[i] += g[i] * df(xin[i], y[i]);
  });
}

inline double sigmoid_scalar(double v) {
  double s;
  if (v >= 0.0) {
    s = 1.0 / (1.0 + std::exp(-v));
  } else {
    const double e = std::exp(v);
    s = e / (1.0 + e);
  }
  // Keep the open interval (0, 1) even where binary64 would round.
  constexpr double lo = std::numeric_limits<double>::min();
  constexpr double hi = 1.0 - 0x1.0p-53;
  return std::clamp(s, lo, hi);
}

}  // namespace detail

inline Var relu(const Var& x) {
  return detail::unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var leaky_relu(const Var& x, double slope) {
  return detail::unary(
      x, "leaky_relu", [slope](double v) { return v > 0.0 ? v : slope * v; },
      [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

inline Var sigmoid(const Var& x) {
  return detail::unary(x, "sigmoid", detail::sigmoid_scalar,
                       [](double, double y) { return y * (1.0 - y); });
}

/// log(clamp(x, lo, hi)); zero gradient where the clamp is active.
inline Var log_clamped(const Var& x, double lo, double hi) {
  return detail::unary(
      x, "log_clamped",
      [lo, hi](double v) { return std::log(std::clamp(v, lo, hi)); },
      [lo, hi](double v, double) { return (v < lo || v > hi) ? 0.0 : 1.0 / v; });
}

inline Var scale(const Var& x, double c) {
  return detail::unary(
      x, "scale", [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Var add_scalar(const Var& x, double c) {
  return detail::unary(
      x, "add_scalar", [c](double v) { return v + c; },
      [](double, double) { return 1.0; });
}

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out(a.shape());
  {
    const double* __restrict ap = a.value().ptr();
    const double* __restrict bp = b.value().ptr();
    double* __restrict o = out.ptr();
    for (std::size_t i = 0, n = out.size(); i < n; ++i) o[i] = ap[i] + bp[i];
  }
  detail::count_flops("elementwise", out.size());
  return record(std::move(out), {a, b}, "add", [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (Tensor* dt = input_grad(self, k)) {
        const double* __restrict g = self.grad.ptr();
        double* __restrict d = dt->ptr();
        for (std::size_t i = 0, n = dt->size(); i < n; ++i) d[i] += g[i];
      }
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  detail::count_flops("elementwise", out.size());
  return record(std::move(out), {a, b}, "sub", [](Node& self) {
    if (Tensor* d = input_grad(self, 0))
      for (std::size_t i = 0; i < d->size(); ++i) (*d)[i] += self.grad[i];
    if (Tensor* d = input_grad(self, 1))
      for (std::size_t i = 0; i < d->size(); ++i) (*d)[i] -= self.grad[i];
  });
}

/// Hadamard product.
inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  detail::count_flops("elementwise", out.size());
  return record(std::move(out), {a, b}, "mul", [](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    if (Tensor* d = input_grad(self, 0))
      for (std::size_t i = 0; i < d->size(); ++i) (*d)[i] += self.grad[i] * bv[i];
    if (Tensor* d = input_grad(self, 1))
      for (std::size_t i = 0; i < d->size(); ++i) (*d)[i] += self.grad[i] * av[i];
  });
}

inline Var div(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "div");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] / b.value()[i];
  require(out.all_finite(), Errc::numeric, "div: non-finite quotient");
  detail::count_flops("elementwise", out.size());
  return record(std::move(out), {a, b}, "div", [](Node& self) {
    const Tensor& bv = self.inputs[1]->value;
    if (Tensor* d = input_grad(self, 0))
      for (std::size_t i = 0; i < d->size(); ++i) (*d)[i] += self.grad[i] / bv[i];
    if (Tensor* d = input_grad(self, 1))
      for (std::size_t i = 0; i < d->size(); ++i)
        (*d)[i] -= self.grad[i] * self.value[i] / bv[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return record(Tensor::scalar(s), {x}, "sum", [](Node& self) {
    Tensor* dx = input_grad(self, 0);
    if (!dx) return;
    const double g = self.grad[0];
    for (double& v : dx->data()) v += g;
  });
}

inline Var mean(const Var& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.value().size()));
}

/// (N,C,H,W) -> (N,C): mean over H*W.
inline Var global_avg_pool(const Var& x) {
  detail::require_4d(x, "global_avg_pool");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor out({N, C});
  const double* xp = x.value().ptr();
  for (std::size_t p = 0; p < N * C; ++p) {
    double s = 0.0;
    for (std::size_t i = 0; i < HW; ++i) s += xp[p * HW + i];
    out[p] = s / static_cast<double>(HW);
  }
  detail::count_flops("gap", x.value().size());
  return record(std::move(out), {x}, "global_avg_pool", [HW](Node& self) {
    Tensor* dx = input_grad(self, 0);
    if (!dx) return;
    const double inv = 1.0 / static_cast<double>(HW);
    for (std::size_t p = 0; p < self.grad.size(); ++p) {
      const double g = self.grad[p] * inv;
      for (std::size_t i = 0; i < HW; ++i) (*dx)[p * HW + i] += g;
    }
  });
}

// ---------------------------------------------------------------------------
// Dense and broadcasting

/// (N,In) x (In,Out) -> (N,Out), no bias.
inline Var dense(const Var& x, const Var& weights) {
  require(x.value().ndim() == 2 && weights.value().ndim() == 2 &&
              x.dim(1) == weights.dim(0),
          Errc::shape,
          "dense: incompatible shapes " + shape_str(x.shape()) + " x " +
              shape_str(weights.shape()));
  const std::size_t N = x.dim(0), In = x.dim(1), Out = weights.dim(1);
  Tensor out({N, Out});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < Out; ++o) {
      double s = 0.0;
      for (std::size_t i = 0; i < In; ++i)
        s += x.value()[n * In + i] * weights.value()[i * Out + o];
      out[n * Out + o] = s;
    }
  detail::count_flops("dense", 2ULL * N * In * Out);
  return record(std::move(out), {x, weights}, "dense", [N, In, Out](Node& self) {
    const Tensor& xv = self.inputs[0]->value;
    const Tensor& wv = self.inputs[1]->value;
    Tensor* dx = input_grad(self, 0);
    Tensor* dw = input_grad(self, 1);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < In; ++i)
        for (std::size_t o = 0; o < Out; ++o) {
          const double g = self.grad[n * Out + o];
          detail::accumulate(dx, n * In + i, g * wv[i * Out + o]);
          detail::accumulate(dw, i * Out + o, g * xv[n * In + i]);
        }
  });
}

/// x (N,C,H,W) with channel (n,c) multiplied by s (N,C).
inline Var scale_channels(const Var& x, const Var& s) {
  detail::require_4d(x, "scale_channels");
  require(s.shape() == Shape{x.dim(0), x.dim(1)}, Errc::shape,
          "scale_channels: scale shape " + shape_str(s.shape()) +
              " does not match " + shape_str(x.shape()));
  const std::size_t HW = x.dim(2) * x.dim(3);
  Tensor out(x.shape());
  for (std::size_t p = 0; p < s.value().size(); ++p) {
    const double k = s.value()[p];
    for (std::size_t i = 0; i < HW; ++i) out[p * HW + i] = k * x.value()[p * HW + i];
  }
  detail::count_flops("elementwise", out.size());
  return record(std::move(out), {x, s}, "scale_channels", [HW](Node& self) {
    const Tensor& xv = self.inputs[0]->value;
    const Tensor& sv = self.inputs[1]->value;
    Tensor* dx = input_grad(self, 0);
    Tensor* ds = input_grad(self, 1);
    for (std::size_t p = 0; p < sv.size(); ++p) {
      double acc = 0.0;
      for (std::size_t i = 0; i < HW; ++i) {
        const double g = self.grad[p * HW + i];
        if (dx) (*dx)[p * HW + i] += g * sv[p];
        acc += g * xv[p * HW + i];
      }
      if (ds) (*ds)[p] += acc;
    }
  });
}

// ---------------------------------------------------------------------------
// Channel manipulation

inline Var concat_channels(const std::vector<Var>& xs) {
  require(!xs.empty(), Errc::shape, "concat_channels: no inputs");
  for (const Var& x : xs) detail::require_4d(x, "concat_channels");
  const std::size_t N = xs[0].dim(0), H = xs[0].dim(2), W = xs[0].dim(3);
  std::size_t C = 0;
  std::vector<std::size_t> widths;
  for (const Var& x : xs) {
    require(x.dim(0) == N && x.dim(2) == H && x.dim(3) == W, Errc::shape,
            "concat_channels: non-channel dims differ");
    widths.push_back(x.dim(1));
    C += x.dim(1);
  }
  const std::size_t HW = H * W;
  Tensor out({N, C, H, W});
  for (std::size_t n = 0; n < N; ++n) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
      const double* src = xs[k].value().ptr() + n * widths[k] * HW;
      std::copy(src, src + widths[k] * HW, out.ptr() + (n * C + off) * HW);
      off += widths[k];
    }
  }
  return record(std::move(out), xs, "concat_channels",
                [widths, N, C, HW](Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (Tensor* d = input_grad(self, k)) {
        for (std::size_t n = 0; n < N; ++n) {
          const double* src = self.grad.ptr() + (n * C + off) * HW;
          double* dst = d->ptr() + n * widths[k] * HW;
          for (std::size_t i = 0; i < widths[k] * HW; ++i) dst[i] += src[i];
        }
      }
      off += widths[k];
    }
  });
}

/// Channels [begin, begin+count).
inline Var slice_channels(const Var& x, std::size_t begin, std::size_t count) {
  detail::require_4d(x, "slice_channels");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  require(count > 0 && begin + count <= C, Errc::shape,
          "slice_channels: range out of bounds");
  Tensor out({N, count, x.dim(2), x.dim(3)});
  for (std::size_t n = 0; n < N; ++n) {
    const double* src = x.value().ptr() + (n * C + begin) * HW;
    std::copy(src, src + count * HW, out.ptr() + n * count * HW);
  }
  return record(std::move(out), {x}, "slice_channels",
                [N, C, HW, begin, count](Node& self) {
    Tensor* dx = input_grad(self, 0);
    if (!dx) return;
    for (std::size_t n = 0; n < N; ++n) {
      const double* src = self.grad.ptr() + n * count * HW;
      double* dst = dx->ptr() + (n * C + begin) * HW;
      for (std::size_t i = 0; i < count * HW; ++i) dst[i] += src[i];
    }
  });
}

/// out channel k = in channel perm[k]; perm must be a bijection.
inline Var permute_channels(const Var& x, const std::vector<std::size_t>& perm) {
  detail::require_4d(x, "permute_channels");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  require(perm.size() == C, Errc::shape, "permute_channels: wrong length");
  std::vector<bool> hit(C, false);
  for (std::size_t p : perm) {
    require(p < C && !hit[p], Errc::argument,
            "permute_channels: not a permutation");
    hit[p] = true;
  }
  Tensor out(x.shape());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < C; ++k) {
      const double* src = x.value().ptr() + (n * C + perm[k]) * HW;
      std::copy(src, src + HW, out.ptr() + (n * C + k) * HW);
    }
  return record(std::move(out), {x}, "permute_channels",
                [perm, N, C, HW](Node& self) {
    Tensor* dx = input_grad(self, 0);
    if (!dx) return;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < C; ++k) {
        const double* src = self.grad.ptr() + (n * C + k) * HW;
        double* dst = dx->ptr() + (n * C + perm[k]) * HW;
        for (std::size_t i = 0; i < HW; ++i) dst[i] += src[i];
      }
  });
}

// ---------------------------------------------------------------------------
// Batch normalization

struct BatchNormOptions {
  double eps = 1e-5;
  double momentum = 0.99;  // running = momentum*running + (1-momentum)*batch
};

/// Per-channel normalization of NCHW input. Train mode normalizes with the
/// (biased) batch statistics and updates the running buffers in place; eval
/// mode uses the running buffers.
inline Var batch_norm(const Var& x, const Var& gamma, const Var& beta,
                      Tensor& running_mean, Tensor& running_var, Mode mode,
                      const BatchNormOptions& opt = {}) {
  detail::require_4d(x, "batch_norm");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const Shape cshape{C};
  require(gamma.shape() == cshape && beta.shape() == cshape &&
              running_mean.shape() == cshape && running_var.shape() == cshape,
          Errc::shape, "batch_norm: parameter length must equal channel count");
  const std::size_t m = N * HW;
  require(m > 0, Errc::shape, "batch_norm: zero batch*spatial extent");

  std::vector<double> mu(C), inv_std(C);
  const double* xp = x.value().ptr();
  if (mode == Mode::train) {
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const double* __restrict plane = xp + (n * C + c) * HW;
#pragma omp simd reduction(+ : s)
        for (std::size_t i = 0; i < HW; ++i) s += plane[i];
      }
      const double mc = s / static_cast<double>(m);
      double v = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const double* __restrict plane = xp + (n * C + c) * HW;
#pragma omp simd reduction(+ : v)
        for (std::size_t i = 0; i < HW; ++i) v += (plane[i] - mc) * (plane[i] - mc);
      }
      v /= static_cast<double>(m);
      mu[c] = mc;
      inv_std[c] = 1.0 / std::sqrt(v + opt.eps);
      running_mean[c] = opt.momentum * running_mean[c] + (1.0 - opt.momentum) * mc;
      running_var[c] = opt.momentum * running_var[c] + (1.0 - opt.momentum) * v;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mu[c] = running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(running_var[c] + opt.eps);
    }
  }

  Tensor out(x.shape());
  Tensor xhat(x.shape());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const double g = gamma.value()[c], b = beta.value()[c], mc = mu[c], is = inv_std[c];
      const std::size_t off = (n * C + c) * HW;
      const double* __restrict in = xp + off;
      double* __restrict xh = xhat.ptr() + off;
      double* __restrict o = out.ptr() + off;
      for (std::size_t i = 0; i < HW; ++i) {
        xh[i] = (in[i] - mc) * is;
        o[i] = g * xh[i] + b;
      }
    }
  detail::count_flops("elementwise", out.size());

  const bool batch_stats = mode == Mode::train;
  return record(std::move(out), {x, gamma, beta}, "batch_norm",
                [xhat = std::move(xhat), inv_std = std::move(inv_std), N, C, HW,
                 m, batch_stats](Node& self) {
    const Tensor& gv = self.inputs[1]->value;
    Tensor* dx = input_grad(self, 0);
    Tensor* dg = input_grad(self, 1);
    Tensor* db = input_grad(self, 2);
    for (std::size_t c = 0; c < C; ++c) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const std::size_t off = (n * C + c) * HW;
        const double* __restrict dy = self.grad.ptr() + off;
        const double* __restrict xh = xhat.ptr() + off;
#pragma omp simd reduction(+ : sum_dy, sum_dy_xhat)
        for (std::size_t i = 0; i < HW; ++i) {
          sum_dy += dy[i];
          sum_dy_xhat += dy[i] * xh[i];
        }
      }
      if (dg) (*dg)[c] += sum_dy_xhat;
      if (db) (*db)[c] += sum_dy;
      if (!dx) continue;
      const double k0 = gv[c] * inv_std[c];
      const double md = static_cast<double>(m);
      const double mean_dy = batch_stats ? sum_dy / md : 0.0;
      const double mean_dy_xhat = batch_stats ? sum_dy_xhat / md : 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const std::size_t off = (n * C + c) * HW;
        const double* __restrict dy = self.grad.ptr() + off;
        const double* __restrict xh = xhat.ptr() + off;
        double* __restrict d = dx->ptr() + off;
        for (std::size_t i = 0; i < HW; ++i)
          d[i] += k0 * (dy[i] - mean_dy - xh[i] * mean_dy_xhat);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Dropout

/// Inverted dropout: in train mode each value is kept with probability
/// 1-rate and scaled by 1/(1-rate). The mask is a pure function of `seed`.
inline Var dropout(const Var& x, double rate, Mode mode, std::uint64_t seed) {
  require(rate >= 0.0 && rate < 1.0, Errc::argument,
          "dropout: rate must lie in [0, 1)");
  if (mode == Mode::eval || rate == 0.0) return x;
  Rng rng(seed);
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.value().size());
  Tensor out(x.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = rng.uniform() >= rate ? keep_scale : 0.0;
    out[i] = x.value()[i] * mask[i];
  }
  detail::count_flops("elementwise", out.size());
  return record(std::move(out), {x}, "dropout", [mask = std::move(mask)](Node& self) {
    Tensor* dx = input_grad(self, 0);
    if (!dx) return;
    for (std::size_t i = 0; i < mask.size(); ++i) (*dx)[i] += self.grad[i] * mask[i];
  });
}

}  // namespace focusnet
