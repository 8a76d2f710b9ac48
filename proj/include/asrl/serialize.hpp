#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "asrl/error.hpp"
#include "asrl/params.hpp"

namespace asrl {

// Binary container shared by parameter and distillation-buffer files:
//   "ASRL" | version u32 | entry count u32
//   per entry: name length u16 | name | rank u8 | dims u32 x rank | f32 data
// All integers and floats little-endian.
inline constexpr char kMagic[4] = {'A', 'S', 'R', 'L'};
inline constexpr std::uint32_t kFormatVersion = 1;

struct NamedArray {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> values;
};

namespace io {

template <typename U>
void put_le(std::ostream& os, U v) {
  std::uint8_t b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <typename U>
U get_le(std::istream& is) {
  std::uint8_t b[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(U))) throw IoError("read: unexpected end of file");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

}  // namespace io

inline void write_arrays(std::ostream& os, const std::vector<NamedArray>& arrays) {
  os.write(kMagic, 4);
  io::put_le<std::uint32_t>(os, kFormatVersion);
  io::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& a : arrays) {
    io::put_le<std::uint16_t>(os, static_cast<std::uint16_t>(a.name.size()));
    os.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
    io::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(a.dims.size()));
    for (auto d : a.dims) io::put_le<std::uint32_t>(os, d);
    for (float f : a.values) io::put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(f));
  }
  if (!os) throw IoError("write_arrays: stream failure");
}

inline std::vector<NamedArray> read_arrays(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw IoError("read_arrays: bad magic");
  const auto version = io::get_le<std::uint32_t>(is);
  if (version != kFormatVersion) throw IoError("read_arrays: unsupported version " + std::to_string(version));
  const auto count = io::get_le<std::uint32_t>(is);
  std::vector<NamedArray> out(count);
  for (auto& a : out) {
    const auto len = io::get_le<std::uint16_t>(is);
    a.name.resize(len);
    if (!is.read(a.name.data(), len)) throw IoError("read_arrays: truncated name");
    const auto rank = io::get_le<std::uint8_t>(is);
    std::size_t n = 1;
    a.dims.resize(rank);
    for (auto& d : a.dims) {
      d = io::get_le<std::uint32_t>(is);
      n *= d;
    }
    a.values.resize(n);
    for (auto& f : a.values) f = std::bit_cast<float>(io::get_le<std::uint32_t>(is));
  }
  return out;
}

template <typename T>
std::vector<NamedArray> to_arrays(const ParamSet<T>& p) {
  std::vector<NamedArray> out;
  for (const auto& e : p.layout()) {
    NamedArray a{e.name, e.dims, {}};
    const auto src = p[e.name];
    a.values.assign(src.begin(), src.end());
    out.push_back(std::move(a));
  }
  return out;
}

inline ParamSet<float> params_from_arrays(const std::vector<NamedArray>& arrays) {
  const NamedArray* pi_b = nullptr;
  for (const auto& a : arrays)
    if (a.name == "pi.b") pi_b = &a;
  if (!pi_b || pi_b->dims.size() != 1) throw IoError("params file: missing pi.b");
  ParamSet<float> p(static_cast<int>(pi_b->dims[0]));
  if (arrays.size() != p.layout().size()) throw IoError("params file: wrong entry count");
  for (std::size_t i = 0; i < arrays.size(); ++i) {
    const auto& e = p.layout()[i];
    if (arrays[i].name != e.name || arrays[i].dims != e.dims) throw IoError("params file: unexpected entry " + arrays[i].name);
    std::copy(arrays[i].values.begin(), arrays[i].values.end(), p[e.name].begin());
  }
  return p;
}

template <typename T>
void save_params(const std::string& path, const ParamSet<T>& p) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path);
  write_arrays(os, to_arrays(p));
}

inline ParamSet<float> load_params(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  return params_from_arrays(read_arrays(is));
}

}  // namespace asrl
