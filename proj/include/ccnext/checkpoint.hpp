#pragma once

// Flat binary parameter files.
//
//   "EPFG" | u32 version | u32 count |
//   count x { u16 name_len | name | u8 dtype | u8 rank | rank x u32 extent | values }
//
// All integers and values little-endian. Adam moments go to a sibling file
// "<path>.adam" in the same layout, entries "<name>.m", "<name>.v" and a
// rank-1 float64 "<name>.step".

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "ccnext/nn.hpp"

namespace ccnext {

inline constexpr std::array<char, 4> kCheckpointMagic{'E', 'P', 'F', 'G'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  DType dtype = DType::float32;
  std::vector<std::uint32_t> extents;
  std::vector<double> values;  // widened; narrowed again on restore
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

template <class I>
void put(std::ostream& os, I v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(I));
}
template <class I>
I get(std::istream& is, const std::string& what) {
  I v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(I))) throw IoError("checkpoint: truncated file while reading " + what);
  return v;
}

}  // namespace detail

inline void write_entries(const std::string& path, const std::vector<CheckpointEntry>& entries) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot open '" + path + "' for writing");
  os.write(kCheckpointMagic.data(), 4);
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (e.name.size() > 0xFFFF) throw IoError("checkpoint: name too long: " + e.name);
    detail::put<std::uint16_t>(os, static_cast<std::uint16_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    detail::put<std::uint8_t>(os, static_cast<std::uint8_t>(e.dtype));
    detail::put<std::uint8_t>(os, static_cast<std::uint8_t>(e.extents.size()));
    for (auto x : e.extents) detail::put<std::uint32_t>(os, x);
    for (double v : e.values) {
      if (e.dtype == DType::float32) detail::put<float>(os, static_cast<float>(v));
      else detail::put<double>(os, v);
    }
  }
  if (!os) throw IoError("checkpoint: write failed for '" + path + "'");
}

inline std::vector<CheckpointEntry> read_entries(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open '" + path + "'");
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4)) throw IoError("checkpoint: truncated header in '" + path + "'");
  if (magic != kCheckpointMagic) throw IoError("checkpoint: bad magic in '" + path + "'");
  const auto version = detail::get<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion)
    throw IoError("checkpoint: unsupported version " + std::to_string(version) + " in '" + path + "'");
  const auto count = detail::get<std::uint32_t>(is, "count");
  std::vector<CheckpointEntry> out;
  for (std::uint32_t k = 0; k < count; ++k) {
    CheckpointEntry e;
    const auto len = detail::get<std::uint16_t>(is, "name length");
    e.name.resize(len);
    if (!is.read(e.name.data(), len)) throw IoError("checkpoint: truncated name in '" + path + "'");
    const auto tag = detail::get<std::uint8_t>(is, "dtype of " + e.name);
    if (tag > 1) throw IoError("checkpoint: unknown dtype tag " + std::to_string(tag) + " for " + e.name);
    e.dtype = static_cast<DType>(tag);
    const auto rank = detail::get<std::uint8_t>(is, "rank of " + e.name);
    std::size_t n = 1;
    for (int r = 0; r < rank; ++r) {
      e.extents.push_back(detail::get<std::uint32_t>(is, "extents of " + e.name));
      n *= e.extents.back();
    }
    e.values.resize(n);
    for (auto& v : e.values)
      v = e.dtype == DType::float32 ? detail::get<float>(is, "values of " + e.name)
                                    : detail::get<double>(is, "values of " + e.name);
    out.push_back(std::move(e));
  }
  return out;
}

template <class T>
CheckpointEntry make_entry(const std::string& name, const Shape& shape, const std::vector<T>& values) {
  CheckpointEntry e{name, dtype_of<T>(), {}, std::vector<double>(values.begin(), values.end())};
  for (int s : shape) e.extents.push_back(static_cast<std::uint32_t>(s));
  return e;
}

template <class T>
void save_parameters(const ParameterStore<T>& params, const std::string& path, bool with_adam = true) {
  std::vector<CheckpointEntry> entries, adam;
  for (const auto& p : params) {
    entries.push_back(make_entry<T>(p.name, p.tensor.shape(), p.tensor.vec()));
    if (with_adam) {
      adam.push_back(make_entry<T>(p.name + ".m", p.tensor.shape(), p.m));
      adam.push_back(make_entry<T>(p.name + ".v", p.tensor.shape(), p.v));
      adam.push_back(make_entry<double>(p.name + ".step", {1}, {static_cast<double>(p.step_count)}));
    }
  }
  write_entries(path, entries);
  if (with_adam) write_entries(path + ".adam", adam);
}

/// Restores parameter values by name. Every parameter of the store must be
/// present with identical extents and dtype.
template <class T>
void load_parameters(ParameterStore<T>& params, const std::string& path, bool with_adam = false) {
  auto entries = read_entries(path);
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  auto fetch = [&](const std::map<std::string, const CheckpointEntry*>& m, const std::string& name,
                   const Shape& shape) -> const CheckpointEntry& {
    auto it = m.find(name);
    if (it == m.end()) throw IoError("checkpoint: missing parameter '" + name + "'");
    const CheckpointEntry& e = *it->second;
    Shape got(e.extents.begin(), e.extents.end());
    if (got != shape)
      throw ShapeError("checkpoint: parameter '" + name + "' has shape " + to_string(got) + ", model expects " +
                       to_string(shape));
    return e;
  };
  for (auto& p : params) {
    const auto& e = fetch(by_name, p.name, p.tensor.shape());
    if (e.dtype != dtype_of<T>()) throw IoError("checkpoint: dtype mismatch for parameter '" + p.name + "'");
    auto w = p.tensor.mutable_values();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(e.values[i]);
  }
  if (!with_adam) return;
  auto adam = read_entries(path + ".adam");
  std::map<std::string, const CheckpointEntry*> am;
  for (const auto& e : adam) am[e.name] = &e;
  for (auto& p : params) {
    const auto& m = fetch(am, p.name + ".m", p.tensor.shape());
    const auto& v = fetch(am, p.name + ".v", p.tensor.shape());
    const auto& s = fetch(am, p.name + ".step", Shape{1});
    for (std::size_t i = 0; i < p.m.size(); ++i) {
      p.m[i] = static_cast<T>(m.values[i]);
      p.v[i] = static_cast<T>(v.values[i]);
    }
    p.step_count = static_cast<long>(s.values[0]);
  }
}

}  // namespace ccnext
