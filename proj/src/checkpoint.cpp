#include "wholeheart/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace wholeheart {

namespace {
constexpr char kMagic[4] = {'W', 'H', 'C', '1'};
}

const TensorFile& Checkpoint::get(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw DataError("checkpoint is missing tensor " + name);
  return it->second;
}

void Checkpoint::put_f32(const std::string& name, std::vector<int64_t> shape,
                         std::vector<float> data) {
  tensors[name] = TensorFile::from_f32(std::move(shape), std::move(data));
}

void Checkpoint::put_f64(const std::string& name, std::vector<int64_t> shape,
                         std::vector<double> data) {
  tensors[name] = TensorFile::from_f64(std::move(shape), std::move(data));
}

std::vector<uint8_t> checkpoint_bytes(const Checkpoint& c) {
  std::vector<uint8_t> payload;
  ordered_json dir = ordered_json::array();
  for (const auto& [name, tf] : c.tensors) {
    std::vector<uint8_t> blob = tensor_file_bytes(tf);
    ordered_json e;
    e["name"] = name;
    e["offset"] = payload.size();
    e["size"] = blob.size();
    dir.push_back(e);
    payload.insert(payload.end(), blob.begin(), blob.end());
  }

  ordered_json manifest;
  manifest["format"] = "WHC1";
  manifest["config_hash"] = c.config_hash;
  manifest["step"] = c.step;
  manifest["run_config"] = c.run_config;
  manifest["extras"] = c.extras;
  manifest["tensors"] = dir;
  std::string mj = manifest.dump();

  std::vector<uint8_t> out;
  out.reserve(8 + mj.size() + payload.size());
  out.insert(out.end(), kMagic, kMagic + 4);
  uint32_t len = uint32_t(mj.size());
  const uint8_t* lp = reinterpret_cast<const uint8_t*>(&len);
  out.insert(out.end(), lp, lp + 4);
  out.insert(out.end(), mj.begin(), mj.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

Checkpoint checkpoint_parse(const uint8_t* data, size_t size, const std::string& context) {
  if (size < 8 || std::memcmp(data, kMagic, 4) != 0) {
    throw DataError("not a checkpoint (bad magic): " + context);
  }
  uint32_t len;
  std::memcpy(&len, data + 4, 4);
  if (size < 8 + size_t(len)) throw DataError("truncated checkpoint manifest: " + context);

  ordered_json manifest;
  try {
    manifest = ordered_json::parse(data + 8, data + 8 + len);
  } catch (const std::exception& e) {
    throw DataError("corrupt checkpoint manifest in " + context + ": " + e.what());
  }
  if (manifest.value("format", "") != "WHC1") {
    throw DataError("unsupported checkpoint format in " + context);
  }

  Checkpoint c;
  c.config_hash = manifest.value("config_hash", "");
  c.step = manifest.value("step", int64_t(0));
  c.run_config = manifest.value("run_config", ordered_json::object());
  c.extras = manifest.value("extras", ordered_json::object());

  const uint8_t* payload = data + 8 + len;
  size_t payload_size = size - 8 - len;
  try {
    for (const auto& e : manifest.at("tensors")) {
      std::string name = e.at("name").get<std::string>();
      size_t off = e.at("offset").get<size_t>();
      size_t sz = e.at("size").get<size_t>();
      if (off + sz > payload_size) {
        throw DataError("checkpoint tensor " + name + " overruns the file: " + context);
      }
      c.tensors[name] = tensor_file_parse(payload + off, sz);
    }
  } catch (const ordered_json::exception& e) {
    throw DataError("corrupt tensor directory in " + context + ": " + e.what());
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  std::vector<uint8_t> bytes = checkpoint_bytes(c);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out.good()) throw DataError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out.good()) throw DataError("short write on checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) throw DataError("cannot read checkpoint " + path.string());
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  return checkpoint_parse(bytes.data(), bytes.size(), path.string());
}

void load_encoder_into(const Checkpoint& ck, MaeModelT<float>& m) {
  visit_encoder_params(m, [&](const std::string& name, Tensor& t) {
    const TensorFile& tf = ck.get(name);
    if (tf.dtype != "f32le" || tf.shape != t.shape) {
      throw DataError("encoder tensor " + name + " has shape " + shape_str(tf.shape) +
                      ", expected " + shape_str(t.shape));
    }
    t.data = tf.f32;
  });
}

void pack_optimizer(Checkpoint& ck, AdamW& opt) {
  for (AdamW::Slot& s : opt.slots()) {
    ck.put_f64("opt." + s.name + ".m", s.param->shape, s.m);
    ck.put_f64("opt." + s.name + ".v", s.param->shape, s.v);
  }
  ck.extras["opt_step"] = opt.step_count();
}

void unpack_optimizer(const Checkpoint& ck, AdamW& opt) {
  for (AdamW::Slot& s : opt.slots()) {
    const TensorFile& m = ck.get("opt." + s.name + ".m");
    const TensorFile& v = ck.get("opt." + s.name + ".v");
    if (m.dtype != "f64le" || v.dtype != "f64le" || m.shape != s.param->shape ||
        v.shape != s.param->shape) {
      throw DataError("optimizer state for " + s.name + " does not match the parameter");
    }
    s.m = m.f64;
    s.v = v.f64;
  }
  if (!ck.extras.contains("opt_step")) {
    throw DataError("checkpoint lacks optimizer step state");
  }
  opt.set_step_count(ck.extras["opt_step"].get<int64_t>());
}

}  // namespace wholeheart
