#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "sarnet/errors.hpp"
#include "sarnet/numerics/tape.hpp"
#include "sarnet/numerics/tensor.hpp"

// Checkpoint container, all integers and floats little-endian:
//
//   magic        4 bytes  "SRNT"
//   version      u32      kCheckpointVersion
//   count        u64      number of tensors
//   per tensor:
//     name_len   u32
//     name       name_len bytes (UTF-8, no terminator)
//     rank       u32
//     dims       rank x u64
//     payload    product(dims) x f64 (IEEE-754 binary64)

namespace sarnet {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'S', 'R', 'N', 'T'};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

namespace detail {

template <typename T>
void put_le(std::vector<unsigned char>& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.insert(out.end(), bytes, bytes + sizeof(T));
}

class ByteReader {
 public:
  explicit ByteReader(const std::vector<unsigned char>& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    if (pos_ + sizeof(T) > bytes_.size()) throw DataError("checkpoint truncated");
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    pos_ += sizeof(T);
    T value;
    std::memcpy(&value, raw, sizeof(T));
    return value;
  }

  std::string get_string(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw DataError("checkpoint truncated");
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<unsigned char>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<unsigned char> encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  std::vector<unsigned char> out(kCheckpointMagic, kCheckpointMagic + 4);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint64_t>(out, tensors.size());
  for (const auto& [name, tensor] : tensors) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.rank()));
    for (std::size_t d : tensor.shape()) detail::put_le<std::uint64_t>(out, d);
    for (double v : tensor.values()) detail::put_le<double>(out, v);
  }
  return out;
}

inline std::vector<NamedTensor> decode_checkpoint(const std::vector<unsigned char>& bytes) {
  detail::ByteReader in(bytes);
  if (in.get_string(4) != std::string(kCheckpointMagic, 4)) throw DataError("not a checkpoint file (bad magic)");
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  const auto count = in.get<std::uint64_t>();
  std::vector<NamedTensor> tensors;
  for (std::uint64_t k = 0; k < count; ++k) {
    NamedTensor nt;
    nt.name = in.get_string(in.get<std::uint32_t>());
    Shape shape(in.get<std::uint32_t>());
    for (auto& d : shape) d = in.get<std::uint64_t>();
    std::vector<double> values(shape_size(shape));
    for (double& v : values) v = in.get<double>();
    nt.tensor = Tensor(std::move(shape), std::move(values));
    tensors.push_back(std::move(nt));
  }
  if (!in.at_end()) throw DataError("trailing bytes after checkpoint payload");
  return tensors;
}

inline std::vector<NamedTensor> snapshot(const ParameterStore& store) {
  std::vector<NamedTensor> out;
  out.reserve(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) out.push_back({store[i].name, store[i].value});
  return out;
}

/// Copies checkpoint tensors into a store built for the same architecture.
/// Names and shapes must match one-to-one.
inline void restore(ParameterStore& store, const std::vector<NamedTensor>& tensors) {
  if (tensors.size() != store.size())
    throw DataError("checkpoint holds " + std::to_string(tensors.size()) + " tensors, model expects " +
                    std::to_string(store.size()));
  for (const auto& [name, tensor] : tensors) {
    if (!store.contains(name)) throw DataError("checkpoint tensor '" + name + "' unknown to the model");
    Parameter& p = store.at(name);
    if (p.value.shape() != tensor.shape())
      throw DataError("checkpoint tensor '" + name + "' has shape " + shape_string(tensor.shape()) +
                      ", model expects " + shape_string(p.value.shape()));
    p.value = tensor;
  }
}

inline void write_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write to '" + path + "' failed");
}

inline std::vector<unsigned char> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

inline void save_checkpoint(const std::string& path, const ParameterStore& store) {
  write_bytes(path, encode_checkpoint(snapshot(store)));
}

inline void load_checkpoint(const std::string& path, ParameterStore& store) {
  restore(store, decode_checkpoint(read_bytes(path)));
}

}  // namespace sarnet
