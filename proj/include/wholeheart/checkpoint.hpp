#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "wholeheart/container.hpp"
#include "wholeheart/model.hpp"
#include "wholeheart/optim.hpp"

namespace wholeheart {

// Named-tensor archive: "WHC1" magic, little-endian u32 manifest length, JSON
// manifest (run config, step, tensor directory with offsets), then the
// tensors as concatenated container blobs, sorted by name.
struct Checkpoint {
  ordered_json run_config = ordered_json::object();
  std::string config_hash;
  int64_t step = 0;
  ordered_json extras = ordered_json::object();
  std::map<std::string, TensorFile> tensors;

  bool has(const std::string& name) const { return tensors.count(name) != 0; }
  const TensorFile& get(const std::string& name) const;

  void put_f32(const std::string& name, std::vector<int64_t> shape, std::vector<float> data);
  void put_f64(const std::string& name, std::vector<int64_t> shape, std::vector<double> data);
};

std::vector<uint8_t> checkpoint_bytes(const Checkpoint& c);
Checkpoint checkpoint_parse(const uint8_t* data, size_t size, const std::string& context);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Parameter packing via the model's visitor; names are the visitor names.
template <class Visitable>
void pack_params(Checkpoint& ck, Visitable& m) {
  visit_params(m, [&](const std::string& name, Tensor& t) {
    ck.put_f32(name, t.shape, t.data);
  });
}

// Strict unpack: every visited parameter must be present with its exact
// shape. `prefix_whole` guards against stray parameter tensors: when set,
// any stored tensor under that prefix must be consumed by the visitor.
template <class Visitable>
void unpack_params(const Checkpoint& ck, Visitable& m) {
  visit_params(m, [&](const std::string& name, Tensor& t) {
    const TensorFile& tf = ck.get(name);
    if (tf.dtype != "f32le" || tf.shape != t.shape) {
      throw DataError("checkpoint tensor " + name + " has shape " + shape_str(tf.shape) +
                      ", expected " + shape_str(t.shape));
    }
    t.data = tf.f32;
  });
}

// Copies only the Phase-I encoder (patch embedding + encoder blocks + final
// norm) into a fresh model, leaving decoder and head weights untouched.
void load_encoder_into(const Checkpoint& ck, MaeModelT<float>& m);

// Optimizer moments are stored in f64 under "opt.<param>.m/.v" so resumed
// runs continue bit-identically.
void pack_optimizer(Checkpoint& ck, AdamW& opt);
void unpack_optimizer(const Checkpoint& ck, AdamW& opt);

}  // namespace wholeheart
