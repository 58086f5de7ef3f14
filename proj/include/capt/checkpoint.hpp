#pragma once

// Flat binary checkpoint:
//   "CAPT" | version u32 | count u32 |
//   per parameter: name_len u16 | name bytes | rank u8 | dims u32[rank] | f32 values
// All integers and floats little-endian.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <type_traits>
#include <vector>

#include "capt/errors.hpp"
#include "capt/tensor.hpp"

namespace capt::ad {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

namespace io {

inline void put_bytes(std::vector<std::uint8_t>& out, const void* p, std::size_t n) {
  const auto* b = static_cast<const std::uint8_t*>(p);
  out.insert(out.end(), b, b + n);
}

template <class U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  static_assert(std::is_trivially_copyable_v<U>);
  std::uint8_t buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
  out.insert(out.end(), buf, buf + sizeof(U));
}

class Reader {
 public:
  Reader(std::vector<std::uint8_t> data, std::string path) : data_(std::move(data)), path_(std::move(path)) {}

  template <class U>
  U get() {
    need(sizeof(U));
    std::uint8_t buf[sizeof(U)];
    std::memcpy(buf, data_.data() + pos_, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
    pos_ += sizeof(U);
    U v;
    std::memcpy(&v, buf, sizeof(U));
    return v;
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  [[nodiscard]] bool at_end() const { return pos_ == data_.size(); }
  [[nodiscard]] const std::string& path() const { return path_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw IoError(path_ + ": truncated file");
  }
  std::vector<std::uint8_t> data_;
  std::string path_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path + ": cannot open for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path + ": cannot open for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(path + ": write failed");
}

}  // namespace io

inline std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedArray>& arrays) {
  std::vector<std::uint8_t> out;
  io::put_bytes(out, "CAPT", 4);
  io::put_le<std::uint32_t>(out, kCheckpointVersion);
  io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& a : arrays) {
    if (a.name.size() > 0xFFFF) throw ContractError("checkpoint: parameter name too long");
    if (a.shape.size() > 0xFF) throw ContractError("checkpoint: rank too large");
    if (shape_numel(a.shape) != a.values.size()) throw DimensionError("checkpoint: '" + a.name + "' shape/value mismatch");
    io::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(a.name.size()));
    io::put_bytes(out, a.name.data(), a.name.size());
    io::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(a.shape.size()));
    for (auto d : a.shape) io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (float v : a.values) io::put_le<float>(out, v);
  }
  return out;
}

inline std::vector<NamedArray> decode_checkpoint(std::vector<std::uint8_t> bytes, const std::string& path) {
  io::Reader r(std::move(bytes), path);
  if (r.get_string(4) != "CAPT") throw IoError(path + ": bad checkpoint magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw IoError(path + ": unsupported checkpoint version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  std::vector<NamedArray> arrays;
  arrays.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = r.get_string(r.get<std::uint16_t>());
    const auto rank = r.get<std::uint8_t>();
    for (std::uint8_t k = 0; k < rank; ++k) a.shape.push_back(r.get<std::uint32_t>());
    a.values.resize(shape_numel(a.shape));
    for (auto& v : a.values) v = r.get<float>();
    arrays.push_back(std::move(a));
  }
  if (!r.at_end()) throw IoError(path + ": trailing bytes after checkpoint payload");
  return arrays;
}

inline void save_checkpoint(const std::string& path, const std::vector<NamedArray>& arrays) {
  io::write_file(path, encode_checkpoint(arrays));
}

inline std::vector<NamedArray> load_checkpoint(const std::string& path) {
  return decode_checkpoint(io::read_file(path), path);
}

}  // namespace capt::ad
