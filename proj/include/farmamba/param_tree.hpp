#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "farmamba/tensor.hpp"

namespace farmamba {

// Ordered map from dotted path name to trainable tensor. Iteration follows
// insertion order, which is fixed by model construction, so checkpoints and
// optimizer sweeps are deterministic.
template <class R>
class ParamTree {
 public:
  Tensor<R>& add(const std::string& name, Tensor<R> t) {
    if (index_.count(name)) throw std::invalid_argument("ParamTree: duplicate name " + name);
    t.ensure_grad();
    index_[name] = entries_.size();
    entries_.push_back({name, std::move(t)});
    return entries_.back().tensor;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Tensor<R>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("ParamTree: no parameter named " + name);
    return entries_[it->second].tensor;
  }

  const Tensor<R>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("ParamTree: no parameter named " + name);
    return entries_[it->second].tensor;
  }

  std::size_t size() const { return entries_.size(); }

  std::int64_t total_elements() const {
    std::int64_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  // Absorbs every entry of `other` under a dotted prefix.
  void merge(const std::string& prefix, ParamTree other) {
    for (auto& e : other.entries_) add(prefix + "." + e.name, std::move(e.tensor));
  }

  struct Entry {
    std::string name;
    Tensor<R> tensor;
  };

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// FARM checkpoint container (little-endian):
//   magic "FARM" | version u32 | entry count u32
//   per entry: name length u32 | UTF-8 name | rank u32 | extents u64[rank] |
//              raw payload (version 1: 32-bit floats, version 2: 64-bit).
// Round-trips are bit-exact; save(load(f)) is byte-identical to f.
namespace farm_io {

inline constexpr char kMagic[4] = {'F', 'A', 'R', 'M'};

namespace detail {

template <class T>
void put(std::ostream& os, T v) {
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  unsigned char buf[sizeof(T)];
  is.read(reinterpret_cast<char*>(buf), sizeof(T));
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return static_cast<T>(v);
}

inline void put_f32(std::ostream& os, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put<std::uint32_t>(os, bits);
}

inline float get_f32(std::istream& is) {
  std::uint32_t bits = get<std::uint32_t>(is);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

inline void put_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put<std::uint64_t>(os, bits);
}

inline double get_f64(std::istream& is) {
  std::uint64_t bits = get<std::uint64_t>(is);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

template <class R>
constexpr std::uint32_t native_version() {
  return sizeof(R) == 4 ? 1u : 2u;
}

}  // namespace detail

template <class R>
void save(const ParamTree<R>& tree, std::ostream& os) {
  os.write(kMagic, 4);
  detail::put<std::uint32_t>(os, detail::native_version<R>());
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(tree.size()));
  for (const auto& e : tree) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(e.tensor.rank()));
    for (auto ext : e.tensor.shape()) detail::put<std::uint64_t>(os, static_cast<std::uint64_t>(ext));
    for (R v : e.tensor.values()) {
      if constexpr (sizeof(R) == 4)
        detail::put_f32(os, static_cast<float>(v));
      else
        detail::put_f64(os, static_cast<double>(v));
    }
  }
}

template <class R>
void save(const ParamTree<R>& tree, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("farm_io: cannot open " + path + " for writing");
  save(tree, os);
  if (!os) throw std::runtime_error("farm_io: write to " + path + " failed");
}

template <class R>
ParamTree<R> load(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("farm_io: bad magic bytes (not a FARM container)");
  const std::uint32_t version = detail::get<std::uint32_t>(is);
  if (version != 1 && version != 2)
    throw std::runtime_error("farm_io: unsupported version " + std::to_string(version));
  const std::uint32_t count = detail::get<std::uint32_t>(is);
  ParamTree<R> tree;
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::uint32_t name_len = detail::get<std::uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const std::uint32_t rank = detail::get<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& ext : shape) ext = static_cast<std::int64_t>(detail::get<std::uint64_t>(is));
    std::vector<R> values(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& v : values)
      v = version == 1 ? static_cast<R>(detail::get_f32(is)) : static_cast<R>(detail::get_f64(is));
    if (!is) throw std::runtime_error("farm_io: truncated container");
    tree.add(name, Tensor<R>::from(std::move(shape), std::move(values)));
  }
  return tree;
}

template <class R>
ParamTree<R> load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("farm_io: cannot open " + path);
  return load<R>(is);
}

}  // namespace farm_io

// Copies values from `src` into the matching entries of `dst`; shapes must
// agree. Used for checkpoint restore so existing tape/grad wiring survives.
template <class R>
void load_values_into(ParamTree<R>& dst, const ParamTree<R>& src) {
  for (auto& e : dst) {
    const auto& s = src.at(e.name);
    if (s.shape() != e.tensor.shape())
      throw std::runtime_error("checkpoint shape mismatch for " + e.name + ": " +
                               shape_str(s.shape()) + " vs " + shape_str(e.tensor.shape()));
    auto dstv = e.tensor.mutable_values();
    auto srcv = s.values();
    for (std::size_t i = 0; i < dstv.size(); ++i) dstv[i] = srcv[i];
  }
}

}  // namespace farmamba
