#include "wholeheart/dataset.hpp"

#include <cstdio>
#include <filesystem>
#include <set>

#include "wholeheart/container.hpp"

namespace fs = std::filesystem;

namespace wholeheart {

namespace {

const char* kViewTags[9] = {"SA0", "SA1", "SA2", "SA3", "SA4", "SA5", "LA0", "LA1", "LA2"};

std::string pad4(int64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04lld", static_cast<long long>(v));
  return buf;
}

ordered_json phenotypes_json(const PhenotypeVector& ph) {
  ordered_json j;
  j["lvm"] = ph.lvm;
  j["rvef"] = ph.rvef;
  j["raef"] = ph.raef;
  j["rvedv"] = ph.rvedv;
  j["lasv"] = ph.lasv;
  j["lvedv"] = ph.lvedv;
  j["lvesv"] = ph.lvesv;
  j["lvef"] = ph.lvef;
  j["ed_frame"] = ph.ed_frame;
  return j;
}

ordered_json vec3_json(const Vec3& v) { return ordered_json::array({v.x, v.y, v.z}); }

ordered_json geometry_json(const SceneConfig& c, const std::vector<PlaneGeometry>& planes) {
  ordered_json scene;
  scene["grid"] = c.grid;
  scene["frames"] = c.frames;
  scene["voxel"] = c.voxel;
  scene["lv"] = ordered_json::array({c.lv_a, c.lv_b, c.lv_c});
  scene["wall"] = c.wall;
  scene["rv"] = ordered_json::array({c.rv_a, c.rv_b, c.rv_c});
  scene["la"] = ordered_json::array({c.la_ax, c.la_ay, c.la_c});
  scene["ra"] = ordered_json::array({c.ra_ax, c.ra_ay, c.ra_c});
  scene["amp"] = ordered_json::array({c.amp_lv, c.amp_rv, c.amp_la, c.amp_ra});
  scene["phase"] = ordered_json::array({c.phase_rv, c.phase_la, c.phase_ra});
  scene["levels"] = ordered_json::array({c.blood, c.myo, c.bg});
  scene["bias_beta"] = c.bias_beta;
  scene["bias_phase"] = ordered_json::array({c.bias_phase[0], c.bias_phase[1], c.bias_phase[2]});
  scene["noise_sigma"] = c.noise_sigma;
  scene["noise_seed"] = c.noise_seed;
  scene["z_base"] = c.z_base;

  ordered_json arr = ordered_json::array();
  for (const PlaneGeometry& g : planes) {
    ordered_json p;
    p["view"] = g.view;
    p["origin"] = vec3_json(g.origin);
    p["u"] = vec3_json(g.u);
    p["v"] = vec3_json(g.v);
    p["extent"] = g.extent;
    p["spacing"] = g.spacing;
    arr.push_back(p);
  }
  ordered_json j;
  j["scene"] = scene;
  j["planes"] = arr;
  return j;
}

}  // namespace

ViewFilter view_filter_from_string(const std::string& s) {
  if (s == "all") return ViewFilter::kAll;
  if (s == "sa") return ViewFilter::kSa;
  if (s == "la") return ViewFilter::kLa;
  throw ConfigError("views must be all|sa|la, got '" + s + "'");
}

const char* view_filter_name(ViewFilter f) {
  switch (f) {
    case ViewFilter::kSa:
      return "sa";
    case ViewFilter::kLa:
      return "la";
    default:
      return "all";
  }
}

bool view_allowed(ViewFilter f, const std::string& tag) {
  if (f == ViewFilter::kAll) return true;
  return view_is_sa(tag) == (f == ViewFilter::kSa);
}

void split_sizes(int64_t n, int64_t& n_pretrain, int64_t& n_finetune, int64_t& n_test) {
  n_test = n / 7;
  n_finetune = 2 * n / 7;
  n_pretrain = n - n_finetune - n_test;
}

std::string DatasetManifest::subject_dir(int64_t subject) const {
  return (fs::path(dir) / ("subject_" + pad4(subject))).string();
}

const std::vector<int64_t>& DatasetManifest::split(const std::string& name) const {
  if (name == "pretrain") return pretrain;
  if (name == "finetune") return finetune;
  if (name == "test") return test;
  throw ConfigError("split must be pretrain|finetune|test, got '" + name + "'");
}

DatasetManifest DatasetManifest::load(const std::string& dir) {
  ordered_json j = read_json(fs::path(dir) / "manifest.json");
  if (!j.contains("format") || j["format"] != "wholeheart-dataset-v1") {
    throw DataError("not a dataset manifest: " + dir);
  }
  DatasetManifest m;
  m.dir = dir;
  m.n = j.at("n").get<int64_t>();
  m.seed = j.at("seed").get<uint64_t>();
  m.size = j.at("size").get<int64_t>();
  m.pretrain = j.at("splits").at("pretrain").get<std::vector<int64_t>>();
  m.finetune = j.at("splits").at("finetune").get<std::vector<int64_t>>();
  m.test = j.at("splits").at("test").get<std::vector<int64_t>>();

  std::set<int64_t> seen;
  for (const auto* split : {&m.pretrain, &m.finetune, &m.test}) {
    for (int64_t s : *split) {
      if (s < 0 || s >= m.n) throw DataError("split subject out of range in " + dir);
      if (!seen.insert(s).second) {
        throw DataError("splits overlap at subject " + std::to_string(s) + " in " + dir);
      }
    }
  }
  return m;
}

DatasetManifest build_dataset(int64_t n, uint64_t seed, const std::string& out_dir,
                              int64_t size) {
  if (n < 1) throw ConfigError("need at least one subject, got " + std::to_string(n));
  SizePreset preset = size_preset(size);

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create dataset directory " + out_dir + ": " + ec.message());

  DatasetManifest m;
  m.dir = out_dir;
  m.n = n;
  m.seed = seed;
  m.size = size;
  int64_t n_pre, n_ft, n_te;
  split_sizes(n, n_pre, n_ft, n_te);
  for (int64_t i = 0; i < n; ++i) {
    if (i < n_pre) {
      m.pretrain.push_back(i);
    } else if (i < n_pre + n_ft) {
      m.finetune.push_back(i);
    } else {
      m.test.push_back(i);
    }
  }

  for (int64_t i = 0; i < n; ++i) {
    SceneConfig cfg = randomize_subject_config(seed, i, size);
    DenseScene scene = generate_scene(cfg);
    std::vector<PlaneGeometry> planes =
        default_plane_geometries(cfg, preset.plane_extent, preset.plane_spacing);

    fs::path sdir = m.subject_dir(i);
    fs::create_directories(sdir, ec);
    if (ec) {
      throw DataError("cannot create subject directory " + sdir.string() + ": " + ec.message());
    }

    for (const PlaneGeometry& g : planes) {
      auto [img, lab] = slice_plane(scene, g);
      TensorFile fi = TensorFile::from_f32(img.shape, std::move(img.data), {"t", "y", "x"});
      fi.meta["view"] = g.view;
      fi.meta["kind"] = "intensity";
      fi.meta["subject"] = i;
      write_tensor_file(sdir / (g.view + ".cvt"), fi);

      TensorFile fl = TensorFile::from_u8(lab.shape, std::move(lab.data), {"t", "y", "x"});
      fl.meta["view"] = g.view;
      fl.meta["kind"] = "labels";
      fl.meta["subject"] = i;
      write_tensor_file(sdir / (g.view + "_labels.cvt"), fl);
    }

    write_json(sdir / "phenotypes.json", phenotypes_json(compute_phenotypes(scene)));
    write_json(sdir / "geometry.json", geometry_json(cfg, planes));
  }

  ordered_json j;
  j["format"] = "wholeheart-dataset-v1";
  j["n"] = n;
  j["seed"] = seed;
  j["size"] = size;
  j["splits"]["pretrain"] = m.pretrain;
  j["splits"]["finetune"] = m.finetune;
  j["splits"]["test"] = m.test;
  write_json(fs::path(out_dir) / "manifest.json", j);
  return m;
}

PlaneStack load_plane_stack(const std::string& subject_dir, ViewFilter f) {
  PlaneStack stack;
  stack.sa_total = 6;
  stack.la_total = 3;
  for (const char* tag : kViewTags) {
    if (!view_allowed(f, tag)) continue;
    TensorFile tf = read_tensor_file(fs::path(subject_dir) / (std::string(tag) + ".cvt"));
    PlaneView pv;
    pv.view = tag;
    pv.plane_id = plane_id_of(tag, stack.sa_total);
    pv.vol = tf.to_tensor();
    if (pv.vol.ndim() != 3) {
      throw DataError("plane " + std::string(tag) + " in " + subject_dir +
                      " is not a {t,y,x} volume");
    }
    stack.planes.push_back(std::move(pv));
  }
  return stack;
}

std::vector<TensorT<uint8_t>> load_label_planes(const std::string& subject_dir,
                                                ViewFilter f) {
  std::vector<TensorT<uint8_t>> out;
  for (const char* tag : kViewTags) {
    if (!view_allowed(f, tag)) continue;
    TensorFile tf =
        read_tensor_file(fs::path(subject_dir) / (std::string(tag) + "_labels.cvt"));
    if (tf.dtype != "u8") {
      throw DataError("label plane " + std::string(tag) + " in " + subject_dir +
                      " is not u8");
    }
    TensorT<uint8_t> t;
    t.shape = tf.shape;
    t.data = std::move(tf.u8);
    out.push_back(std::move(t));
  }
  return out;
}

PhenotypeVector load_phenotypes(const std::string& subject_dir) {
  ordered_json j = read_json(fs::path(subject_dir) / "phenotypes.json");
  PhenotypeVector ph;
  ph.lvm = j.at("lvm").get<double>();
  ph.rvef = j.at("rvef").get<double>();
  ph.raef = j.at("raef").get<double>();
  ph.rvedv = j.at("rvedv").get<double>();
  ph.lasv = j.at("lasv").get<double>();
  ph.lvedv = j.at("lvedv").get<double>();
  ph.lvesv = j.at("lvesv").get<double>();
  ph.lvef = j.at("lvef").get<double>();
  ph.ed_frame = j.at("ed_frame").get<int64_t>();
  return ph;
}

}  // namespace wholeheart
