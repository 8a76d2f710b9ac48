#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "asrl/error.hpp"
#include "asrl/image.hpp"
#include "asrl/rng.hpp"

namespace asrl {

enum class AugKind { Identity, RandomCrop, Grayscale, CutoutColor, RandomConv, ColorJitter, Black };

inline constexpr std::array<AugKind, 7> kAllAugKinds = {AugKind::Identity,    AugKind::RandomCrop, AugKind::Grayscale,
                                                       AugKind::CutoutColor, AugKind::RandomConv, AugKind::ColorJitter,
                                                       AugKind::Black};

inline std::string_view aug_name(AugKind k) {
  switch (k) {
    case AugKind::Identity: return "identity";
    case AugKind::RandomCrop: return "random_crop";
    case AugKind::Grayscale: return "grayscale";
    case AugKind::CutoutColor: return "cutout_color";
    case AugKind::RandomConv: return "random_conv";
    case AugKind::ColorJitter: return "color_jitter";
    case AugKind::Black: return "black";
  }
  return "?";
}

inline AugKind parse_aug(std::string_view s) {
  for (auto k : kAllAugKinds)
    if (aug_name(k) == s) return k;
  throw ConfigError("unknown augmentation '" + std::string(s) + "'");
}

// Magnitude knobs for the randomized transforms.
struct AugParams {
  double crop_min_fraction = 0.6;
  double cutout_min_fraction = 0.2;
  double cutout_max_fraction = 0.5;
  double jitter_scale_lo = 0.6;
  double jitter_scale_hi = 1.4;
  double jitter_shift = 0.2;
};

namespace detail {

inline float clip01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

inline void random_crop(ImageTensor& img, Rng& rng, const AugParams& p) {
  const int min_h = static_cast<int>(std::ceil(p.crop_min_fraction * img.height));
  const int min_w = static_cast<int>(std::ceil(p.crop_min_fraction * img.width));
  const int h = rng.range(min_h, img.height + 1);
  const int w = rng.range(min_w, img.width + 1);
  const int y0 = rng.range(0, img.height - h + 1);
  const int x0 = rng.range(0, img.width - w + 1);
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        if (y < y0 || y >= y0 + h || x < x0 || x >= x0 + w) img.at(c, y, x) = 0.0f;
}

inline void grayscale(ImageTensor& img) {
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      double s = 0.0;
      for (int c = 0; c < img.channels; ++c) s += img.at(c, y, x);
      const float m = clip01(s / img.channels);
      for (int c = 0; c < img.channels; ++c) img.at(c, y, x) = m;
    }
}

inline void cutout_color(ImageTensor& img, Rng& rng, const AugParams& p) {
  auto side = [&](int full) {
    const int lo = std::max(1, static_cast<int>(std::ceil(p.cutout_min_fraction * full)));
    const int hi = std::max(lo, static_cast<int>(std::floor(p.cutout_max_fraction * full)));
    return rng.range(lo, hi + 1);
  };
  const int h = side(img.height), w = side(img.width);
  const int y0 = rng.range(0, img.height - h + 1);
  const int x0 = rng.range(0, img.width - w + 1);
  std::vector<float> color(img.channels);
  for (auto& v : color) v = static_cast<float>(rng.uniform());
  for (int c = 0; c < img.channels; ++c)
    for (int y = y0; y < y0 + h; ++y)
      for (int x = x0; x < x0 + w; ++x) img.at(c, y, x) = color[c];
}

// One random 3x3 kernel mixing all channels, zero padding, then min-max
// rescaling of the whole image back to [0,1].
inline void random_conv(ImageTensor& img, Rng& rng) {
  const int C = img.channels;
  std::vector<double> k(static_cast<std::size_t>(C) * C * 9);
  const double sd = std::sqrt(1.0 / 27.0);
  for (auto& v : k) v = rng.normal() * sd;
  std::vector<double> out(img.size(), 0.0);
  for (int co = 0; co < C; ++co)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        double s = 0.0;
        for (int ci = 0; ci < C; ++ci)
          for (int ky = -1; ky <= 1; ++ky)
            for (int kx = -1; kx <= 1; ++kx) {
              const int yy = y + ky, xx = x + kx;
              if (yy < 0 || xx < 0 || yy >= img.height || xx >= img.width) continue;
              s += k[((co * C + ci) * 3 + ky + 1) * 3 + kx + 1] * img.at(ci, yy, xx);
            }
        out[(static_cast<std::size_t>(co) * img.height + y) * img.width + x] = s;
      }
  const auto [mn, mx] = std::minmax_element(out.begin(), out.end());
  const double lo = *mn, range = *mx - *mn;
  for (std::size_t i = 0; i < out.size(); ++i) img.data[i] = range > 0.0 ? clip01((out[i] - lo) / range) : 0.0f;
}

inline void color_jitter(ImageTensor& img, Rng& rng, const AugParams& p) {
  for (int c = 0; c < img.channels; ++c) {
    const double a = rng.uniform(p.jitter_scale_lo, p.jitter_scale_hi);
    const double b = rng.uniform(-p.jitter_shift, p.jitter_shift);
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) img.at(c, y, x) = clip01(a * img.at(c, y, x) + b);
  }
}

}  // namespace detail

// Transforms one image; randomness comes from (seed, index) only.
inline ImageTensor apply_one(AugKind kind, std::uint64_t seed, std::size_t index, const ImageTensor& in,
                             const AugParams& p = {}) {
  ImageTensor img = in;
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(kind) + 1, index));
  switch (kind) {
    case AugKind::Identity: return img;
    case AugKind::RandomCrop: detail::random_crop(img, rng, p); break;
    case AugKind::Grayscale: detail::grayscale(img); break;
    case AugKind::CutoutColor: detail::cutout_color(img, rng, p); break;
    case AugKind::RandomConv: detail::random_conv(img, rng); break;
    case AugKind::ColorJitter: detail::color_jitter(img, rng, p); break;
    case AugKind::Black: std::fill(img.data.begin(), img.data.end(), 0.0f); break;
  }
  for (auto& v : img.data) v = std::clamp(v, 0.0f, 1.0f);
  return img;
}

inline std::vector<ImageTensor> apply(AugKind kind, std::uint64_t seed, std::span<const ImageTensor> batch,
                                      const AugParams& p = {}) {
  std::vector<ImageTensor> out;
  out.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) out.push_back(apply_one(kind, seed, i, batch[i], p));
  return out;
}

inline std::vector<ImageTensor> apply(AugKind kind, std::uint64_t seed, const std::vector<ImageTensor>& batch,
                                      const AugParams& p = {}) {
  return apply(kind, seed, std::span<const ImageTensor>(batch), p);
}

// Arm list for a scheduler. Bandit arm sets always contain identity, which
// is prepended when missing; configured order is otherwise kept.
inline std::vector<AugKind> arm_set(const std::vector<AugKind>& configured, bool for_ucb) {
  if (configured.empty()) throw ConfigError("arm_set: at least one augmentation is required");
  std::vector<AugKind> arms;
  for (auto k : configured)
    if (std::find(arms.begin(), arms.end(), k) == arms.end()) arms.push_back(k);
  if (for_ucb && std::find(arms.begin(), arms.end(), AugKind::Identity) == arms.end())
    arms.insert(arms.begin(), AugKind::Identity);
  return arms;
}

}  // namespace asrl
