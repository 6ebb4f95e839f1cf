#include <filesystem>

#include <doctest.h>

#include "wholeheart/container.hpp"

using namespace wholeheart;
namespace fs = std::filesystem;

namespace {
fs::path temp_file(const char* name) {
  fs::path dir = fs::temp_directory_path() / "wholeheart_tests";
  fs::create_directories(dir);
  return dir / name;
}
}  // namespace

TEST_CASE("tensor file roundtrip preserves every byte") {
  TensorFile t = TensorFile::from_f32({2, 3}, {1.f, 2.5f, -3.f, 0.f, 1e-7f, 9.f},
                                      {"row", "col"});
  t.meta["view"] = "SA2";
  t.meta["spacing_mm"] = 1.5;
  auto path = temp_file("roundtrip.cvt");
  write_tensor_file(path, t);
  TensorFile r = read_tensor_file(path);
  CHECK(r.dtype == "f32le");
  CHECK(r.shape == t.shape);
  CHECK(r.axes == t.axes);
  CHECK(r.meta["view"] == "SA2");
  CHECK(r.f32 == t.f32);

  TensorFile u = TensorFile::from_u8({4}, {0, 1, 255, 3});
  write_tensor_file(path, u);
  CHECK(read_tensor_file(path).u8 == u.u8);

  TensorFile d = TensorFile::from_f64({2}, {1.0 / 3.0, -2.0e-300});
  write_tensor_file(path, d);
  CHECK(read_tensor_file(path).f64 == d.f64);
}

TEST_CASE("serialized bytes are deterministic") {
  TensorFile t = TensorFile::from_f32({2, 2}, {1, 2, 3, 4});
  t.meta["b"] = 1;
  t.meta["a"] = 2;
  CHECK(tensor_file_bytes(t) == tensor_file_bytes(t));
}

TEST_CASE("reader rejects bad magic, truncation and size mismatch") {
  TensorFile t = TensorFile::from_f32({2, 2}, {1, 2, 3, 4});
  auto bytes = tensor_file_bytes(t);

  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS((void)tensor_file_parse(bad.data(), bad.size()), DataError);

  CHECK_THROWS_AS((void)tensor_file_parse(bytes.data(), bytes.size() - 3), DataError);

  auto longer = bytes;
  longer.push_back(0);
  CHECK_THROWS_AS((void)tensor_file_parse(longer.data(), longer.size()), DataError);

  CHECK_THROWS_AS((void)read_tensor_file("/nonexistent/nowhere.cvt"), DataError);
}

TEST_CASE("config hash is stable and key-order sensitive") {
  ordered_json a;
  a["lr"] = 1e-4;
  a["steps"] = 100;
  ordered_json b;
  b["lr"] = 1e-4;
  b["steps"] = 100;
  CHECK(config_hash(a) == config_hash(b));
  b["steps"] = 101;
  CHECK(config_hash(a) != config_hash(b));
  CHECK(config_hash(a).size() == 16);
}
