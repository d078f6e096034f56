#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "focusnet/fnt1.hpp"

namespace focusnet {

/// Parameters of the synthetic blob dataset.
struct SynthSpec {
  std::size_t count = 8;
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t channels = 3;
  std::size_t min_blobs = 1;
  std::size_t max_blobs = 3;
  double min_radius = 6.0;
  double max_radius = 16.0;
  double noise_sigma = 0.05;
  double val_fraction = 0.0;
  std::uint64_t seed = 0;

  static constexpr double kMinForeground = 0.02;
  static constexpr double kMaxForeground = 0.6;
  static constexpr int kMaxRetries = 200;

  void validate() const {
    require(count >= 1 && height >= 1 && width >= 1 && channels >= 1, Errc::config,
            "synthetic count, height, width and channels must be positive");
    require(min_blobs >= 1 && min_blobs <= max_blobs, Errc::config,
            "synthetic blob count range must satisfy 1 <= min <= max");
    require(min_radius > 0.0 && min_radius <= max_radius, Errc::config,
            "synthetic radius range must satisfy 0 < min <= max");
    require(noise_sigma >= 0.0, Errc::config, "noise sigma must be non-negative");
    require(val_fraction >= 0.0 && val_fraction < 1.0, Errc::config,
            "val_fraction must lie in [0, 1)");
  }

  nlohmann::json to_json() const {
    return {{"count", count},           {"height", height},         {"width", width},
            {"channels", channels},     {"min_blobs", min_blobs},   {"max_blobs", max_blobs},
            {"min_radius", min_radius}, {"max_radius", max_radius}, {"noise_sigma", noise_sigma},
            {"val_fraction", val_fraction}, {"seed", seed}};
  }

  static SynthSpec from_json(const nlohmann::json& j) {
    SynthSpec s;
    try {
      s.count = j.at("count").get<std::size_t>();
      s.height = j.at("height").get<std::size_t>();
      s.width = j.at("width").get<std::size_t>();
      s.channels = j.at("channels").get<std::size_t>();
      s.min_blobs = j.at("min_blobs").get<std::size_t>();
      s.max_blobs = j.at("max_blobs").get<std::size_t>();
      s.min_radius = j.at("min_radius").get<double>();
      s.max_radius = j.at("max_radius").get<double>();
      s.noise_sigma = j.at("noise_sigma").get<double>();
      s.val_fraction = j.at("val_fraction").get<double>();
      s.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      fail(Errc::format, std::string("dataset meta: ") + e.what());
    }
    s.validate();
    return s;
  }
};

/// Images (N,C,H,W) in [0,1], masks (N,1,H,W) in {0,1}, and a train/val split.
struct Dataset {
  Tensor images;
  Tensor masks;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> val_indices;
  nlohmann::json meta;

  std::size_t size() const { return images.empty() ? 0 : images.dim(0); }

  /// Rows `indices` of images and masks, stacked in order.
  std::pair<Tensor, Tensor> batch(std::span<const std::size_t> indices) const {
    require(!indices.empty(), Errc::argument, "empty batch");
    const std::size_t n = indices.size();
    const std::size_t img = images.size() / size(), msk = masks.size() / size();
    Shape is = images.shape(), ms = masks.shape();
    is[0] = ms[0] = n;
    Tensor x(is), y(ms);
    for (std::size_t b = 0; b < n; ++b) {
      require(indices[b] < size(), Errc::argument, "batch index out of range");
      std::copy_n(images.ptr() + indices[b] * img, img, x.ptr() + b * img);
      std::copy_n(masks.ptr() + indices[b] * msk, msk, y.ptr() + b * msk);
    }
    return {std::move(x), std::move(y)};
  }

  void validate() const {
    require(images.ndim() == 4 && masks.ndim() == 4, Errc::shape,
            "dataset images and masks must be rank 4");
    require(masks.dim(0) == images.dim(0) && masks.dim(1) == 1 &&
                masks.dim(2) == images.dim(2) && masks.dim(3) == images.dim(3),
            Errc::shape,
            "mask shape " + shape_str(masks.shape()) + " does not match images " +
                shape_str(images.shape()));
    for (double v : masks.data())
      require(v == 0.0 || v == 1.0, Errc::format, "mask values must be exactly 0 or 1");
    for (double v : images.data())
      require(v >= 0.0 && v <= 1.0, Errc::format, "image values must lie in [0, 1]");
    std::set<std::size_t> seen;
    for (auto* list : {&train_indices, &val_indices})
      for (std::size_t i : *list)
        require(i < size() && seen.insert(i).second, Errc::format,
                "split indices must be distinct and in range");
    require(!train_indices.empty(), Errc::format, "dataset has no training images");
  }
};

namespace detail {

struct Blob {
  double cy, cx, ry, rx, angle, edge;
  double color[3];
};

// Normalized elliptical radius: < 1 inside the blob.
inline double ellipse_radius(const Blob& b, double y, double x) {
  const double dy = y - b.cy, dx = x - b.cx;
  const double c = std::cos(b.angle), s = std::sin(b.angle);
  const double u = (c * dx + s * dy) / b.rx, v = (-s * dx + c * dy) / b.ry;
  return std::sqrt(u * u + v * v);
}

}  // namespace detail

/// Deterministic soft-edged ellipses on a textured background. Values are
/// rounded to binary32 so an in-memory dataset equals its reloaded files.
inline Dataset generate_synthetic(const SynthSpec& spec) {
  spec.validate();
  const std::size_t N = spec.count, C = spec.channels, H = spec.height, W = spec.width;
  Dataset ds;
  ds.images = Tensor({N, C, H, W});
  ds.masks = Tensor({N, 1, H, W});
  for (std::size_t n = 0; n < N; ++n) {
    Rng rng(mix_seed(spec.seed, n));
    std::vector<detail::Blob> blobs;
    bool ok = false;
    for (int attempt = 0; attempt < SynthSpec::kMaxRetries && !ok; ++attempt) {
      blobs.clear();
      const std::size_t k = spec.min_blobs + rng.index(spec.max_blobs - spec.min_blobs + 1);
      for (std::size_t i = 0; i < k; ++i) {
        detail::Blob b{};
        b.cy = rng.uniform(0.0, static_cast<double>(H));
        b.cx = rng.uniform(0.0, static_cast<double>(W));
        b.ry = rng.uniform(spec.min_radius, spec.max_radius);
        b.rx = rng.uniform(spec.min_radius, spec.max_radius);
        b.angle = rng.uniform(0.0, std::numbers::pi);
        b.edge = rng.uniform(0.05, 0.2);
        for (double& c : b.color) c = rng.uniform(0.65, 0.95);
        blobs.push_back(b);
      }
      std::size_t fg = 0;
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
          for (const auto& b : blobs)
            if (detail::ellipse_radius(b, y + 0.5, x + 0.5) < 1.0) {
              ++fg;
              break;
            }
      const double frac = static_cast<double>(fg) / static_cast<double>(H * W);
      ok = frac >= SynthSpec::kMinForeground && frac <= SynthSpec::kMaxForeground;
    }
    require(ok, Errc::config,
            "cannot place blobs with foreground fraction in [0.02, 0.6] for image " +
                std::to_string(n) + "; adjust radius or blob count");

    // Background: a low-frequency plaid per channel plus pixel noise.
    double fy[3], fx[3], ph[3], base[3];
    for (std::size_t c = 0; c < 3; ++c) {
      fy[c] = rng.uniform(0.5, 3.0) * 2.0 * std::numbers::pi / static_cast<double>(H);
      fx[c] = rng.uniform(0.5, 3.0) * 2.0 * std::numbers::pi / static_cast<double>(W);
      ph[c] = rng.uniform(0.0, 2.0 * std::numbers::pi);
      base[c] = rng.uniform(0.15, 0.35);
    }
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        double inside = 0.0, alpha = 0.0;
        const detail::Blob* top = nullptr;
        for (const auto& b : blobs) {
          const double r = detail::ellipse_radius(b, y + 0.5, x + 0.5);
          if (r < 1.0) inside = 1.0;
          const double a = 1.0 / (1.0 + std::exp((r - 1.0) / (b.edge * 0.25)));
          if (a > alpha) {
            alpha = a;
            top = &b;
          }
        }
        ds.masks.at(n, 0, y, x) = inside;
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t cc = c % 3;
          const double bg = base[cc] + 0.1 * std::sin(fy[cc] * y + ph[cc]) * std::cos(fx[cc] * x);
          double v = top ? (1.0 - alpha) * bg + alpha * top->color[cc] : bg;
          v += spec.noise_sigma * rng.normal();
          ds.images.at(n, c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
  }

  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng split_rng(mix_seed(spec.seed, 0x5eedULL));
  split_rng.shuffle(order);
  const std::size_t n_val =
      std::min<std::size_t>(N - 1, static_cast<std::size_t>(std::llround(spec.val_fraction * N)));
  ds.val_indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  ds.train_indices.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(ds.val_indices.begin(), ds.val_indices.end());
  std::sort(ds.train_indices.begin(), ds.train_indices.end());
  ds.meta = {{"spec", spec.to_json()}, {"train", ds.train_indices}, {"val", ds.val_indices}};
  return ds;
}

inline void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  save_fnt1(dir / "images.fnt1", {{"images", ds.images}});
  save_fnt1(dir / "masks.fnt1", {{"masks", ds.masks}});
  write_file_atomic(dir / "meta.json", ds.meta.dump(2) + "\n");
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  require(std::filesystem::is_directory(dir), Errc::io,
          "dataset directory '" + dir.string() + "' does not exist");
  Dataset ds;
  ds.images = find_tensor(load_fnt1(dir / "images.fnt1"), "images");
  ds.masks = find_tensor(load_fnt1(dir / "masks.fnt1"), "masks");
  try {
    ds.meta = nlohmann::json::parse(read_file(dir / "meta.json"));
    ds.train_indices = ds.meta.at("train").get<std::vector<std::size_t>>();
    ds.val_indices = ds.meta.at("val").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::format, std::string("dataset meta.json: ") + e.what());
  }
  ds.validate();
  return ds;
}

}  // namespace focusnet
