#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "asrl/error.hpp"

namespace asrl {

inline constexpr int kChannels = 3;
inline constexpr int kHeight = 32;
inline constexpr int kWidth = 32;
inline constexpr int kImageSize = kChannels * kHeight * kWidth;

// C x H x W float image in [0,1], channel-major.
struct ImageTensor {
  int channels = kChannels;
  int height = kHeight;
  int width = kWidth;
  std::vector<float> data;

  ImageTensor() : data(kImageSize, 0.0f) {}
  ImageTensor(int c, int h, int w, float fill = 0.0f)
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

  std::size_t size() const { return data.size(); }

  float& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }

  bool same_shape(const ImageTensor& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](float v) { return std::isfinite(v); });
  }

  bool in_unit_range() const {
    return std::all_of(data.begin(), data.end(), [](float v) { return v >= 0.0f && v <= 1.0f; });
  }

  friend bool operator==(const ImageTensor&, const ImageTensor&) = default;
};

// Environment renders are multiples of 1/255, so this packing is lossless
// for them. Large observation stores use it to keep memory bounded.
struct PackedImage {
  std::vector<std::uint8_t> bytes;

  static PackedImage pack(const ImageTensor& img) {
    if (img.size() != static_cast<std::size_t>(kImageSize)) throw ShapeError("pack: image is not 3x32x32");
    PackedImage p;
    p.bytes.resize(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) {
      p.bytes[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img.data[i], 0.0f, 1.0f) * 255.0f));
    }
    return p;
  }

  ImageTensor unpack() const {
    ImageTensor img;
    for (std::size_t i = 0; i < bytes.size(); ++i) img.data[i] = static_cast<float>(bytes[i]) / 255.0f;
    return img;
  }
};

}  // namespace asrl
