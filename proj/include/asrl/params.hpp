#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "asrl/error.hpp"
#include "asrl/image.hpp"
#include "asrl/rng.hpp"

namespace asrl {

// Fixed policy architecture:
//   conv(3->16, 3x3, stride 2, valid) - ReLU
//   conv(16->32, 3x3, stride 2, valid) - ReLU
//   dense(1568 -> 128) - ReLU
//   policy head (128 -> |A|), value head (128 -> 1)
namespace arch {
inline constexpr int kKernel = 3;
inline constexpr int kStride = 2;
inline constexpr int kConv1Out = 16;
inline constexpr int kConv2Out = 32;
inline constexpr int kHidden = 128;
inline constexpr int kH1 = (kHeight - kKernel) / kStride + 1;  // 15
inline constexpr int kH2 = (kH1 - kKernel) / kStride + 1;      // 7
inline constexpr int kP1 = kH1 * kH1;
inline constexpr int kP2 = kH2 * kH2;
inline constexpr int kK1 = kChannels * kKernel * kKernel;   // 27
inline constexpr int kK2 = kConv1Out * kKernel * kKernel;   // 144
inline constexpr int kFlat = kConv2Out * kP2;               // 1568
}  // namespace arch

struct ParamEntry {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::size_t offset = 0;
  std::size_t size = 0;
  std::size_t fan_in = 0;  // 0 for biases
};

// Entries in sorted-name order; the flat parameter vector follows it.
inline std::vector<ParamEntry> param_layout(int n_actions) {
  using namespace arch;
  const auto A = static_cast<std::uint32_t>(n_actions);
  std::vector<ParamEntry> e = {
      {"conv1.b", {kConv1Out}, 0, 0, 0},
      {"conv1.w", {kConv1Out, kChannels, kKernel, kKernel}, 0, 0, kK1},
      {"conv2.b", {kConv2Out}, 0, 0, 0},
      {"conv2.w", {kConv2Out, kConv1Out, kKernel, kKernel}, 0, 0, kK2},
      {"fc.b", {kHidden}, 0, 0, 0},
      {"fc.w", {kFlat, kHidden}, 0, 0, kFlat},
      {"pi.b", {A}, 0, 0, 0},
      {"pi.w", {kHidden, A}, 0, 0, kHidden},
      {"v.b", {1}, 0, 0, 0},
      {"v.w", {kHidden, 1}, 0, 0, kHidden},
  };
  std::size_t off = 0;
  for (auto& p : e) {
    p.size = 1;
    for (auto d : p.dims) p.size *= d;
    p.offset = off;
    off += p.size;
  }
  return e;
}

// Flat, named parameter (or gradient) storage for the policy network.
template <typename T>
class ParamSet {
 public:
  ParamSet() = default;
  explicit ParamSet(int n_actions) : n_actions_(n_actions), layout_(param_layout(n_actions)) {
    if (n_actions < 2) throw ShapeError("ParamSet: need at least 2 actions");
    data_.assign(layout_.back().offset + layout_.back().size, T(0));
  }

  int n_actions() const { return n_actions_; }
  std::size_t size() const { return data_.size(); }
  const std::vector<ParamEntry>& layout() const { return layout_; }

  std::span<T> flat() { return data_; }
  std::span<const T> flat() const { return data_; }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  const ParamEntry& entry(std::string_view name) const {
    for (const auto& e : layout_)
      if (e.name == name) return e;
    throw ShapeError("ParamSet: no entry named " + std::string(name));
  }

  std::span<T> operator[](std::string_view name) {
    const auto& e = entry(name);
    return std::span<T>(data_).subspan(e.offset, e.size);
  }
  std::span<const T> operator[](std::string_view name) const {
    const auto& e = entry(name);
    return std::span<const T>(data_).subspan(e.offset, e.size);
  }

  // Fixed-position accessors used by the network hot path.
  const T* conv1_b() const { return data_.data() + layout_[0].offset; }
  const T* conv1_w() const { return data_.data() + layout_[1].offset; }
  const T* conv2_b() const { return data_.data() + layout_[2].offset; }
  const T* conv2_w() const { return data_.data() + layout_[3].offset; }
  const T* fc_b() const { return data_.data() + layout_[4].offset; }
  const T* fc_w() const { return data_.data() + layout_[5].offset; }
  const T* pi_b() const { return data_.data() + layout_[6].offset; }
  const T* pi_w() const { return data_.data() + layout_[7].offset; }
  const T* v_b() const { return data_.data() + layout_[8].offset; }
  const T* v_w() const { return data_.data() + layout_[9].offset; }
  T* conv1_b() { return data_.data() + layout_[0].offset; }
  T* conv1_w() { return data_.data() + layout_[1].offset; }
  T* conv2_b() { return data_.data() + layout_[2].offset; }
  T* conv2_w() { return data_.data() + layout_[3].offset; }
  T* fc_b() { return data_.data() + layout_[4].offset; }
  T* fc_w() { return data_.data() + layout_[5].offset; }
  T* pi_b() { return data_.data() + layout_[6].offset; }
  T* pi_w() { return data_.data() + layout_[7].offset; }
  T* v_b() { return data_.data() + layout_[8].offset; }
  T* v_w() { return data_.data() + layout_[9].offset; }

  bool congruent(const ParamSet& o) const { return n_actions_ == o.n_actions_ && data_.size() == o.data_.size(); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  ParamSet& operator+=(const ParamSet& o) {
    check(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  ParamSet& operator*=(T s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  // this += s * o
  void axpy(T s, const ParamSet& o) {
    check(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * o.data_[i];
  }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out(n_actions_);
    auto dst = out.flat();
    for (std::size_t i = 0; i < data_.size(); ++i) dst[i] = static_cast<U>(data_[i]);
    return out;
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    return a.n_actions_ == b.n_actions_ && a.data_ == b.data_;
  }

 private:
  void check(const ParamSet& o) const {
    if (!congruent(o)) throw ShapeError("ParamSet: shape mismatch");
  }

  int n_actions_ = 0;
  std::vector<ParamEntry> layout_;
  std::vector<T> data_;
};

template <typename T>
using Gradient = ParamSet<T>;

// Weights i.i.d. U[-scale/sqrt(fan_in), +scale/sqrt(fan_in)], biases zero.
template <typename T = float>
ParamSet<T> init_params(int n_actions, std::uint64_t seed, double scale = 1.0) {
  if (!(scale >= 0.0)) throw Error("init_params: scale must be non-negative");
  ParamSet<T> p(n_actions);
  Rng rng(derive_seed(seed, 0x1a17));
  auto flat = p.flat();
  for (const auto& e : p.layout()) {
    if (e.fan_in == 0) continue;
    const double bound = scale / std::sqrt(static_cast<double>(e.fan_in));
    for (std::size_t i = 0; i < e.size; ++i) flat[e.offset + i] = static_cast<T>(rng.uniform(-bound, bound));
  }
  return p;
}

}  // namespace asrl
