#pragma once

// Reference implementations written from the definitions, sharing no code
// with the library kernels.

#include <optional>
#include <span>
#include <vector>

#include "focusnet/ops.hpp"

namespace focusnet::oracle {

/// Direct-loop grouped convolution, stride 1, zero "same" padding.
inline Tensor conv2d(const Tensor& x, const ConvSpec& s, const Tensor& w,
                     const std::optional<Tensor>& b) {
  const std::size_t N = x.dim(0), H = x.dim(2), W = x.dim(3);
  const std::size_t cig = s.in_channels / s.groups, cog = s.out_channels / s.groups;
  const long ph = static_cast<long>(s.kernel_h / 2), pw = static_cast<long>(s.kernel_w / 2);
  Tensor y({N, s.out_channels, H, W});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < s.out_channels; ++o) {
      const std::size_t g = o / cog;
      for (std::size_t yy = 0; yy < H; ++yy)
        for (std::size_t xx = 0; xx < W; ++xx) {
          double acc = b ? (*b)[o] : 0.0;
          for (std::size_t ci = 0; ci < cig; ++ci)
            for (std::size_t i = 0; i < s.kernel_h; ++i)
              for (std::size_t j = 0; j < s.kernel_w; ++j) {
                const long sy = static_cast<long>(yy + i) - ph;
                const long sx = static_cast<long>(xx + j) - pw;
                if (sy < 0 || sx < 0 || sy >= static_cast<long>(H) || sx >= static_cast<long>(W))
                  continue;
                acc += w[((o * cig + ci) * s.kernel_h + i) * s.kernel_w + j] *
                       x.at(n, g * cig + ci, static_cast<std::size_t>(sy),
                            static_cast<std::size_t>(sx));
              }
          y.at(n, o, yy, xx) = acc;
        }
    }
  return y;
}

/// Adjoints of conv2d for upstream gradient gy: (dx, dw, db).
struct ConvGrads {
  Tensor dx, dw, db;
};

inline ConvGrads conv2d_backward(const Tensor& x, const ConvSpec& s, const Tensor& w,
                                 const Tensor& gy) {
  const std::size_t N = x.dim(0), H = x.dim(2), W = x.dim(3);
  const std::size_t cig = s.in_channels / s.groups, cog = s.out_channels / s.groups;
  const long ph = static_cast<long>(s.kernel_h / 2), pw = static_cast<long>(s.kernel_w / 2);
  ConvGrads g{Tensor(x.shape()), Tensor(w.shape()), Tensor({s.out_channels})};
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < s.out_channels; ++o) {
      const std::size_t grp = o / cog;
      for (std::size_t yy = 0; yy < H; ++yy)
        for (std::size_t xx = 0; xx < W; ++xx) {
          const double up = gy.at(n, o, yy, xx);
          g.db[o] += up;
          for (std::size_t ci = 0; ci < cig; ++ci)
            for (std::size_t i = 0; i < s.kernel_h; ++i)
              for (std::size_t j = 0; j < s.kernel_w; ++j) {
                const long sy = static_cast<long>(yy + i) - ph;
                const long sx = static_cast<long>(xx + j) - pw;
                if (sy < 0 || sx < 0 || sy >= static_cast<long>(H) || sx >= static_cast<long>(W))
                  continue;
                const std::size_t widx = ((o * cig + ci) * s.kernel_h + i) * s.kernel_w + j;
                const std::size_t c = grp * cig + ci;
                g.dw[widx] += up * x.at(n, c, static_cast<std::size_t>(sy),
                                        static_cast<std::size_t>(sx));
                g.dx.at(n, c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx)) +=
                    up * w[widx];
              }
        }
    }
  return g;
}

/// AUC by enumerating every positive-negative pair; ties count one half.
inline double auc_pairs(std::span<const double> scores, std::span<const double> labels) {
  double good = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i)
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (!(labels[i] > 0.5 && labels[j] <= 0.5)) continue;
      pairs += 1.0;
      if (scores[i] > scores[j]) good += 1.0;
      else if (scores[i] == scores[j]) good += 0.5;
    }
  return good / pairs;
}

}  // namespace focusnet::oracle
