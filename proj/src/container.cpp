#include "wholeheart/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace wholeheart {

static_assert(std::endian::native == std::endian::little,
              "payloads are little-endian");

namespace {

constexpr char kMagic[4] = {'C', 'V', 'T', '1'};

size_t dtype_size(const std::string& dtype) {
  if (dtype == "f32le") return 4;
  if (dtype == "f64le") return 8;
  if (dtype == "u8") return 1;
  throw DataError("unknown dtype '" + dtype + "'");
}

void append_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(uint8_t(v));
  out.push_back(uint8_t(v >> 8));
  out.push_back(uint8_t(v >> 16));
  out.push_back(uint8_t(v >> 24));
}

}  // namespace

TensorFile TensorFile::from_f32(std::vector<int64_t> shape, std::vector<float> data,
                                std::vector<std::string> axes) {
  TensorFile t;
  t.dtype = "f32le";
  t.shape = std::move(shape);
  t.axes = std::move(axes);
  t.f32 = std::move(data);
  if (t.numel() != int64_t(t.f32.size())) {
    throw DataError("payload does not match shape " + shape_str(t.shape));
  }
  return t;
}

TensorFile TensorFile::from_u8(std::vector<int64_t> shape, std::vector<uint8_t> data,
                               std::vector<std::string> axes) {
  TensorFile t;
  t.dtype = "u8";
  t.shape = std::move(shape);
  t.axes = std::move(axes);
  t.u8 = std::move(data);
  if (t.numel() != int64_t(t.u8.size())) {
    throw DataError("payload does not match shape " + shape_str(t.shape));
  }
  return t;
}

TensorFile TensorFile::from_f64(std::vector<int64_t> shape, std::vector<double> data,
                                std::vector<std::string> axes) {
  TensorFile t;
  t.dtype = "f64le";
  t.shape = std::move(shape);
  t.axes = std::move(axes);
  t.f64 = std::move(data);
  if (t.numel() != int64_t(t.f64.size())) {
    throw DataError("payload does not match shape " + shape_str(t.shape));
  }
  return t;
}

Tensor TensorFile::to_tensor() const {
  if (dtype != "f32le") {
    throw DataError("expected f32le payload, found " + dtype);
  }
  return Tensor(shape, f32);
}

std::vector<uint8_t> tensor_file_bytes(const TensorFile& t) {
  ordered_json header;
  header["dtype"] = t.dtype;
  header["shape"] = t.shape;
  header["axes"] = t.axes;
  header["meta"] = t.meta;
  std::string hs = header.dump();

  size_t esize = dtype_size(t.dtype);
  size_t payload = size_t(t.numel()) * esize;
  std::vector<uint8_t> out;
  out.reserve(8 + hs.size() + payload);
  out.insert(out.end(), kMagic, kMagic + 4);
  append_u32(out, uint32_t(hs.size()));
  out.insert(out.end(), hs.begin(), hs.end());
  size_t off = out.size();
  out.resize(off + payload);
  if (t.dtype == "f32le") {
    std::memcpy(out.data() + off, t.f32.data(), payload);
  } else if (t.dtype == "f64le") {
    std::memcpy(out.data() + off, t.f64.data(), payload);
  } else {
    std::memcpy(out.data() + off, t.u8.data(), payload);
  }
  return out;
}

TensorFile tensor_file_parse(const uint8_t* data, size_t size) {
  if (size < 8 || std::memcmp(data, kMagic, 4) != 0) {
    throw DataError("not a tensor container (bad magic)");
  }
  uint32_t hlen = uint32_t(data[4]) | uint32_t(data[5]) << 8 |
                  uint32_t(data[6]) << 16 | uint32_t(data[7]) << 24;
  if (size < 8 + size_t(hlen)) throw DataError("tensor container truncated header");
  ordered_json header;
  try {
    header = ordered_json::parse(data + 8, data + 8 + hlen);
  } catch (const std::exception& e) {
    throw DataError(std::string("tensor container header is not valid JSON: ") + e.what());
  }

  TensorFile t;
  try {
    t.dtype = header.at("dtype").get<std::string>();
    t.shape = header.at("shape").get<std::vector<int64_t>>();
    t.axes = header.value("axes", std::vector<std::string>{});
    t.meta = header.value("meta", ordered_json::object());
  } catch (const std::exception& e) {
    throw DataError(std::string("tensor container header malformed: ") + e.what());
  }
  for (int64_t e : t.shape) {
    if (e <= 0) throw DataError("tensor container has non-positive extent");
  }

  size_t esize = dtype_size(t.dtype);
  size_t payload = size_t(t.numel()) * esize;
  if (size != 8 + size_t(hlen) + payload) {
    throw DataError("tensor container payload size mismatch: expected " +
                    std::to_string(payload) + " bytes");
  }
  const uint8_t* body = data + 8 + hlen;
  if (t.dtype == "f32le") {
    t.f32.resize(size_t(t.numel()));
    std::memcpy(t.f32.data(), body, payload);
  } else if (t.dtype == "f64le") {
    t.f64.resize(size_t(t.numel()));
    std::memcpy(t.f64.data(), body, payload);
  } else {
    t.u8.assign(body, body + payload);
  }
  return t;
}

void write_tensor_file(const std::filesystem::path& path, const TensorFile& t) {
  std::vector<uint8_t> bytes = tensor_file_bytes(t);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!f) throw DataError("short write to " + path.string());
}

TensorFile read_tensor_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw DataError("cannot open " + path.string());
  std::streamsize size = f.tellg();
  f.seekg(0);
  std::vector<uint8_t> bytes(static_cast<size_t>(size));
  f.read(reinterpret_cast<char*>(bytes.data()), size);
  if (!f) throw DataError("short read from " + path.string());
  try {
    return tensor_file_parse(bytes.data(), bytes.size());
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_json(const std::filesystem::path& path, const ordered_json& j) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot open " + path.string() + " for writing");
  f << j.dump(2) << '\n';
  if (!f) throw DataError("short write to " + path.string());
}

ordered_json read_json(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open " + path.string());
  try {
    return ordered_json::parse(f);
  } catch (const std::exception& e) {
    throw DataError(path.string() + ": invalid JSON: " + e.what());
  }
}

}  // namespace wholeheart
