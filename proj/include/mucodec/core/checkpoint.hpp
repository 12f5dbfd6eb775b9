#pragma once

#include <mucodec/core/binary_io.hpp>
#include <mucodec/core/nn.hpp>

#include <map>
#include <string>
#include <vector>

// Checkpoint layout (all integers little-endian):
//   "MUCK" | u32 version=1 | u8 value width (4 or 8 bytes)
//   u32 n_meta, then n_meta x (string key, string value)
//   u32 n_tensors, then per tensor:
//     string name | u32 rank | rank x u64 dim | prod(dims) raw IEEE values
// Strings are u32 length followed by UTF-8 bytes.

namespace mucodec {

using Metadata = std::map<std::string, std::string>;

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  Metadata meta;
  std::vector<std::pair<std::string, Tensor<double>>> tensors;

  const Tensor<double>* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }

  const std::string& require_meta(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw std::runtime_error("checkpoint: missing metadata '" + key + "'");
    return it->second;
  }
};

template <typename T>
io::Bytes encode_checkpoint(const NamedParams<T>& params, const Metadata& meta) {
  io::ByteWriter w;
  w.put_bytes("MUCK", 4);
  w.put(Checkpoint::kVersion);
  w.put(static_cast<std::uint8_t>(sizeof(T)));
  w.put(static_cast<std::uint32_t>(meta.size()));
  for (const auto& [k, v] : meta) {
    w.put_string(k);
    w.put_string(v);
  }
  w.put(static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, p] : params) {
    w.put_string(name);
    const auto& s = p->value.shape();
    w.put(static_cast<std::uint32_t>(s.size()));
    for (auto d : s) w.put(static_cast<std::uint64_t>(d));
    for (T v : p->value.vec()) {
      if constexpr (sizeof(T) == 4) w.put_f32(v);
      else w.put_f64(v);
    }
  }
  return w.take();
}

inline Checkpoint decode_checkpoint(const io::Bytes& bytes) {
  io::ByteReader r(bytes);
  char magic[4];
  r.get_bytes(magic, 4);
  if (std::string(magic, 4) != "MUCK") throw std::runtime_error("checkpoint: bad magic");
  if (r.get<std::uint32_t>() != Checkpoint::kVersion) throw std::runtime_error("checkpoint: unsupported version");
  const auto width = r.get<std::uint8_t>();
  if (width != 4 && width != 8) throw std::runtime_error("checkpoint: bad value width");
  Checkpoint ck;
  const auto n_meta = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    auto k = r.get_string();
    ck.meta[k] = r.get_string();
  }
  const auto n = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    auto name = r.get_string();
    const auto rank = r.get<std::uint32_t>();
    Shape s(rank);
    for (auto& d : s) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    std::vector<double> vals(shape_size(s));
    for (auto& v : vals) v = width == 4 ? double(r.get_f32()) : r.get_f64();
    ck.tensors.emplace_back(std::move(name), Tensor<double>(std::move(s), std::move(vals)));
  }
  return ck;
}

template <typename T>
void save_checkpoint(const std::string& path, const NamedParams<T>& params, const Metadata& meta) {
  io::write_file(path, encode_checkpoint(params, meta));
}

inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(io::read_file(path)); }

/// Copies checkpoint values into `params` by name; every parameter must be
/// present with an identical shape.
template <typename T>
void restore(const Checkpoint& ck, NamedParams<T>& params) {
  for (auto& [name, p] : params) {
    const Tensor<double>* t = ck.find(name);
    if (t == nullptr) throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
    if (t->shape() != p->value.shape()) {
      throw std::runtime_error("checkpoint: tensor '" + name + "' has shape " + shape_str(t->shape()) +
                               ", expected " + shape_str(p->value.shape()));
    }
    p->value = t->template cast<T>();
    p->zero_grad();
  }
}

}  // namespace mucodec
