#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "wholeheart/common.hpp"
#include "wholeheart/tensor.hpp"

namespace wholeheart {

using ordered_json = nlohmann::ordered_json;

inline uint64_t fnv1a64(const void* data, size_t n) {
  const uint8_t* p = static_cast<const uint8_t*>(data);
  uint64_t h = 0xcbf29ce484222325ull;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[size_t(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

// Hash of a config serialized to canonical JSON; stamped into every output so
// runs can be traced back to their exact configuration.
inline std::string config_hash(const ordered_json& j) {
  std::string s = j.dump();
  return hex64(fnv1a64(s.data(), s.size()));
}

// One n-D array with a self-describing JSON header. On disk:
//   "CVT1" | u32 LE header length | header JSON | raw payload
// The header carries dtype, shape, axis names and free-form metadata such as
// the view tag and the normalization record.
struct TensorFile {
  std::string dtype;  // "f32le", "f64le" or "u8"
  std::vector<int64_t> shape;
  std::vector<std::string> axes;
  ordered_json meta = ordered_json::object();
  std::vector<float> f32;
  std::vector<uint8_t> u8;
  std::vector<double> f64;

  int64_t numel() const { return shape_numel(shape); }

  static TensorFile from_f32(std::vector<int64_t> shape, std::vector<float> data,
                             std::vector<std::string> axes = {});
  static TensorFile from_u8(std::vector<int64_t> shape, std::vector<uint8_t> data,
                            std::vector<std::string> axes = {});
  static TensorFile from_f64(std::vector<int64_t> shape, std::vector<double> data,
                             std::vector<std::string> axes = {});

  Tensor to_tensor() const;  // DataError unless dtype == f32le
};

std::vector<uint8_t> tensor_file_bytes(const TensorFile& t);
TensorFile tensor_file_parse(const uint8_t* data, size_t size);

void write_tensor_file(const std::filesystem::path& path, const TensorFile& t);
TensorFile read_tensor_file(const std::filesystem::path& path);

// Whole-file JSON helpers with stable key order.
void write_json(const std::filesystem::path& path, const ordered_json& j);
ordered_json read_json(const std::filesystem::path& path);

}  // namespace wholeheart
