#include "wholeheart/harness.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include "wholeheart/optim.hpp"

namespace fs = std::filesystem;

namespace wholeheart {

namespace {

// Fixed stream tags so every random draw is a pure function of (seed, step).
constexpr uint64_t kTagSubject = 0x7375626aull;  // "subj"
constexpr uint64_t kTagMask = 0x6d61736bull;     // "mask"
constexpr uint64_t kTagHead = 0x68656164ull;     // "head"
constexpr uint64_t kTagEval = 0x6576616cull;     // "eval"
constexpr uint64_t kTagRobust = 0x726f6221ull;   // "rob!"

ordered_json model_to_json(const ModelConfig& m) {
  ordered_json j;
  j["image"] = m.image;
  j["frames"] = m.frames;
  j["patch_spatial"] = m.patch_spatial;
  j["patch_temporal"] = m.patch_temporal;
  j["sa_planes"] = m.sa_planes;
  j["la_planes"] = m.la_planes;
  j["dim"] = m.dim;
  j["heads"] = m.heads;
  j["enc_layers"] = m.enc_layers;
  j["dec_dim"] = m.dec_dim;
  j["dec_heads"] = m.dec_heads;
  j["dec_layers"] = m.dec_layers;
  j["mlp_ratio"] = m.mlp_ratio;
  j["mask_ratio"] = m.mask_ratio;
  return j;
}

ModelConfig model_from_json(const ordered_json& j) {
  ModelConfig m;
  for (const auto& [key, v] : j.items()) {
    if (key == "image") m.image = v.get<int64_t>();
    else if (key == "frames") m.frames = v.get<int64_t>();
    else if (key == "patch_spatial") m.patch_spatial = v.get<int64_t>();
    else if (key == "patch_temporal") m.patch_temporal = v.get<int64_t>();
    else if (key == "sa_planes") m.sa_planes = v.get<int64_t>();
    else if (key == "la_planes") m.la_planes = v.get<int64_t>();
    else if (key == "dim") m.dim = v.get<int64_t>();
    else if (key == "heads") m.heads = v.get<int64_t>();
    else if (key == "enc_layers") m.enc_layers = v.get<int64_t>();
    else if (key == "dec_dim") m.dec_dim = v.get<int64_t>();
    else if (key == "dec_heads") m.dec_heads = v.get<int64_t>();
    else if (key == "dec_layers") m.dec_layers = v.get<int64_t>();
    else if (key == "mlp_ratio") m.mlp_ratio = v.get<int64_t>();
    else if (key == "mask_ratio") m.mask_ratio = v.get<double>();
    else throw ConfigError("unknown model config key '" + key + "'");
  }
  return m;
}

ordered_json seg_to_json(const SegConfig& s) {
  ordered_json j;
  j["entry_dim"] = s.entry_dim;
  j["stage_dims"] = {s.stage_dims[0], s.stage_dims[1], s.stage_dims[2]};
  j["frame_dim"] = s.frame_dim;
  j["skip_depths"] = {s.skip_depths[0], s.skip_depths[1], s.skip_depths[2]};
  j["sa_classes"] = s.sa_classes;
  j["la_classes"] = s.la_classes;
  return j;
}

SegConfig seg_from_json(const ordered_json& j) {
  SegConfig s;
  for (const auto& [key, v] : j.items()) {
    if (key == "entry_dim") s.entry_dim = v.get<int64_t>();
    else if (key == "frame_dim") s.frame_dim = v.get<int64_t>();
    else if (key == "sa_classes") s.sa_classes = uint8_t(v.get<int>());
    else if (key == "la_classes") s.la_classes = uint8_t(v.get<int>());
    else if (key == "stage_dims" || key == "skip_depths") {
      auto arr = v.get<std::vector<int64_t>>();
      if (arr.size() != 3) throw ConfigError(key + " must have three entries");
      for (int i = 0; i < 3; ++i) {
        (key == "stage_dims" ? s.stage_dims : s.skip_depths)[i] = arr[size_t(i)];
      }
    } else {
      throw ConfigError("unknown seg config key '" + key + "'");
    }
  }
  return s;
}

// Raw and tokenized views of one subject. Raw planes stay in native
// intensity units for PSNR; the token batch is built from the normalized
// stack.
struct SubjectData {
  PlaneStack raw;
  TokenBatch batch;
};

SubjectData load_subject(const DatasetManifest& m, int64_t subject, ViewFilter vf,
                         const ModelConfig& mc) {
  SubjectData s;
  s.raw = load_plane_stack(m.subject_dir(subject), vf);
  PlaneStack norm = s.raw;
  normalize_stack(norm);
  s.batch = patchify(norm, mc.patch_spatial, mc.patch_temporal);
  return s;
}

// Gradient accumulation across the per-sample graphs of one batch.
class GradAccum {
 public:
  void add(GraphT<float>& g, std::vector<AdamW::Slot>& slots, double scale) {
    for (AdamW::Slot& s : slots) {
      const Tensor* grad = g.grad_of(s.param);
      if (!grad) continue;
      Tensor& acc = sums_.try_emplace(s.param, Tensor::zeros(s.param->shape)).first->second;
      for (size_t i = 0; i < acc.data.size(); ++i) {
        acc.data[i] += float(scale * double(grad->data[i]));
      }
    }
  }

  const Tensor* lookup(const Tensor* p) const {
    auto it = sums_.find(p);
    return it == sums_.end() ? nullptr : &it->second;
  }

  void clear() { sums_.clear(); }

 private:
  std::map<const Tensor*, Tensor> sums_;
};

class StepLogger {
 public:
  StepLogger(const fs::path& path, bool append) {
    out_.open(path, append ? std::ios::app : std::ios::trunc);
    if (!out_.good()) throw DataError("cannot open log file " + path.string());
  }

  void log(int64_t step, double loss, double lr) {
    ordered_json j;
    j["step"] = step;
    j["loss"] = loss;
    j["lr"] = lr;
    out_ << j.dump() << "\n";
    out_.flush();
  }

 private:
  std::ofstream out_;
};

Checkpoint checkpoint_shell(const RunConfig& cfg, int64_t step) {
  Checkpoint ck;
  ck.run_config = cfg.to_json();
  ck.config_hash = cfg.hash();
  ck.step = step;
  return ck;
}

int64_t draw_subject(const std::vector<int64_t>& split, uint64_t seed, int64_t step,
                     int64_t slot) {
  uint64_t r = derive_seed(derive_seed(seed, kTagSubject, uint64_t(step)), uint64_t(slot));
  return split[size_t(r % uint64_t(split.size()))];
}

std::string step_ckpt_name(int64_t step) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "checkpoint_step_%06lld.ckpt", (long long)step);
  return buf;
}

// ---------------------------------------------------------------------------
// Checkpoint-side model reconstruction shared by finetune/eval/robustness.

struct LoadedCheckpoint {
  Checkpoint ck;
  RunConfig rc;
  MaeModelT<float> model;
  bool full_model = false;  // decoder tensors present (pretraining checkpoint)
};

LoadedCheckpoint load_model_checkpoint(const fs::path& path) {
  LoadedCheckpoint lc;
  lc.ck = load_checkpoint(path);
  lc.rc = RunConfig::from_json(lc.ck.run_config);
  lc.model = MaeModelT<float>::init(lc.rc.model, 0);
  lc.full_model = lc.ck.has("dec_embed.w");
  if (lc.full_model) {
    unpack_params(lc.ck, lc.model);
  } else {
    load_encoder_into(lc.ck, lc.model);
  }
  return lc;
}

Standardizer standardizer_from(const Checkpoint& ck, const std::string& prefix,
                               int64_t width) {
  const TensorFile& m = ck.get(prefix + ".mean");
  const TensorFile& s = ck.get(prefix + ".std");
  if (m.dtype != "f64le" || s.dtype != "f64le" || int64_t(m.f64.size()) != width ||
      int64_t(s.f64.size()) != width) {
    throw DataError("checkpoint tensors under " + prefix + " are malformed");
  }
  Standardizer z;
  z.mean = m.f64;
  z.stdev = s.f64;
  return z;
}

void pack_standardizer(Checkpoint& ck, const std::string& prefix, const Standardizer& z) {
  ck.put_f64(prefix + ".mean", {1, int64_t(z.mean.size())}, z.mean);
  ck.put_f64(prefix + ".std", {1, int64_t(z.stdev.size())}, z.stdev);
}

// Pooled MAE features have strongly heterogeneous per-component scales; the
// regression head sees them standardized (statistics from the fine-tuning
// split, frozen into the checkpoint). The shift/scale are constants, so the
// composed head is still linear -> gelu -> linear, just better conditioned.
GraphT<float>::NodeId feature_norm(GraphT<float>& g, GraphT<float>::NodeId pooled,
                                   const Standardizer& fz) {
  int64_t d = int64_t(fz.mean.size());
  Tensor neg_mean = Tensor::zeros({1, d});
  Tensor inv_diag = Tensor::zeros({d, d});
  for (int64_t j = 0; j < d; ++j) {
    neg_mean.data[size_t(j)] = float(-fz.mean[size_t(j)]);
    inv_diag.data[size_t(j * d + j)] = float(1.0 / fz.stdev[size_t(j)]);
  }
  return g.matmul(g.add(pooled, g.input(std::move(neg_mean))), g.input(std::move(inv_diag)));
}

std::vector<float> pooled_vector(GraphT<float>& g, typename GraphT<float>::NodeId latents) {
  const Tensor& v = g.value(pooled_representation(g, latents));
  return v.data;
}

// Token omission of whole planes, by stack position.
TokenBatch drop_planes(const TokenBatch& full, const std::set<int64_t>& positions) {
  std::set<int32_t> drop_ids;
  TokenBatch out = full;
  out.plane_views.clear();
  out.plane_ids.clear();
  for (size_t p = 0; p < full.plane_views.size(); ++p) {
    if (positions.count(int64_t(p))) {
      drop_ids.insert(full.plane_ids[p]);
    } else {
      out.plane_views.push_back(full.plane_views[p]);
      out.plane_ids.push_back(full.plane_ids[p]);
    }
  }
  std::vector<int64_t> keep_rows;
  for (int64_t r = 0; r < full.n_tokens(); ++r) {
    if (!drop_ids.count(full.indices[size_t(r)].plane)) keep_rows.push_back(r);
  }
  out.values = Tensor::zeros({int64_t(keep_rows.size()), full.patch_dim()});
  out.indices.clear();
  for (size_t i = 0; i < keep_rows.size(); ++i) {
    std::copy_n(full.values.row_ptr(keep_rows[i]), full.patch_dim(),
                out.values.row_ptr(int64_t(i)));
    out.indices.push_back(full.indices[size_t(keep_rows[i])]);
  }
  return out;
}

std::vector<std::vector<double>> split_targets(const DatasetManifest& m,
                                               const std::vector<int64_t>& split) {
  std::vector<std::vector<double>> rows;
  for (int64_t s : split) rows.push_back(load_phenotypes(m.subject_dir(s)).targets());
  return rows;
}

const std::vector<int64_t>& named_split(const DatasetManifest& m, const std::string& name) {
  const std::vector<int64_t>& s = m.split(name);
  if (s.empty()) throw DataError("split '" + name + "' is empty");
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// RunConfig

int64_t RunConfig::warmup_steps() const {
  int64_t w = int64_t(std::llround(warmup_frac * double(total_steps)));
  return std::clamp<int64_t>(w, 0, total_steps - 1);
}

void RunConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("run config: " + m); };
  if (task != "pretrain" && task != "phenotype" && task != "seg") {
    fail("task must be pretrain, phenotype or seg, got '" + task + "'");
  }
  if (total_steps <= 0) fail("total_steps must be positive");
  if (batch_size <= 0) fail("batch_size must be positive");
  if (!(lr_max > 0) || !std::isfinite(lr_max)) fail("lr_max must be positive and finite");
  if (lr_min < 0) fail("lr_min must be non-negative");
  if (weight_decay < 0) fail("weight_decay must be non-negative");
  if (warmup_frac < 0 || warmup_frac >= 1.0) fail("warmup_frac must lie in [0, 1)");
  if (head_lr_mult <= 0) fail("head_lr_mult must be positive");
  if (phen_hidden <= 0) fail("phen_hidden must be positive");
  if (log_every <= 0) fail("log_every must be positive");
  if (checkpoint_every < 0) fail("checkpoint_every must be non-negative");
  if (data.empty()) fail("data path is empty");
  loss_scope_from_string(loss_scope);
  view_filter_from_string(views);
  model.validate();
  if (task == "seg") seg.validate(model);
}

ordered_json RunConfig::to_json() const {
  ordered_json j;
  j["task"] = task;
  j["seed"] = seed;
  j["total_steps"] = total_steps;
  j["batch_size"] = batch_size;
  j["lr_max"] = lr_max;
  j["lr_min"] = lr_min;
  j["weight_decay"] = weight_decay;
  j["warmup_frac"] = warmup_frac;
  j["head_lr_mult"] = head_lr_mult;
  j["loss_scope"] = loss_scope;
  j["views"] = views;
  j["data"] = data;
  j["init"] = init;
  j["phen_hidden"] = phen_hidden;
  j["log_every"] = log_every;
  j["checkpoint_every"] = checkpoint_every;
  j["model"] = model_to_json(model);
  j["seg"] = seg_to_json(seg);
  return j;
}

RunConfig RunConfig::from_json(const ordered_json& j) {
  RunConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "task") c.task = v.get<std::string>();
    else if (key == "seed") c.seed = v.get<uint64_t>();
    else if (key == "total_steps") c.total_steps = v.get<int64_t>();
    else if (key == "batch_size") c.batch_size = v.get<int64_t>();
    else if (key == "lr_max") c.lr_max = v.get<double>();
    else if (key == "lr_min") c.lr_min = v.get<double>();
    else if (key == "weight_decay") c.weight_decay = v.get<double>();
    else if (key == "warmup_frac") c.warmup_frac = v.get<double>();
    else if (key == "head_lr_mult") c.head_lr_mult = v.get<double>();
    else if (key == "loss_scope") c.loss_scope = v.get<std::string>();
    else if (key == "views") c.views = v.get<std::string>();
    else if (key == "data") c.data = v.get<std::string>();
    else if (key == "init") c.init = v.get<std::string>();
    else if (key == "phen_hidden") c.phen_hidden = v.get<int64_t>();
    else if (key == "log_every") c.log_every = v.get<int64_t>();
    else if (key == "checkpoint_every") c.checkpoint_every = v.get<int64_t>();
    else if (key == "model") c.model = model_from_json(v);
    else if (key == "seg") c.seg = seg_from_json(v);
    else throw ConfigError("unknown run config key '" + key + "'");
  }
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  return from_json(read_json(path));
}

// ---------------------------------------------------------------------------
// RunLock

RunLock::RunLock(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create run directory " + dir.string() + ": " + ec.message());
  file_ = dir / "run.lock";
  int fd = ::open(file_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    throw DataError("run directory " + dir.string() +
                    " is locked by another run (remove run.lock if it is stale)");
  }
  std::string pid = std::to_string(::getpid()) + "\n";
  ssize_t ignored = ::write(fd, pid.data(), pid.size());
  (void)ignored;
  ::close(fd);
}

RunLock::~RunLock() {
  std::error_code ec;
  fs::remove(file_, ec);
}

// ---------------------------------------------------------------------------
// Phase I

TrainResult pretrain_run(const RunConfig& cfg, const fs::path& out_dir,
                         const fs::path& resume_from) {
  cfg.validate();
  if (cfg.task != "pretrain") throw ConfigError("pretrain_run got task '" + cfg.task + "'");
  DatasetManifest manifest = DatasetManifest::load(cfg.data);
  const std::vector<int64_t>& split = named_split(manifest, "pretrain");
  ViewFilter vf = view_filter_from_string(cfg.views);
  LossScope scope = loss_scope_from_string(cfg.loss_scope);

  RunLock lock(out_dir);
  write_json(out_dir / "run_config.json", cfg.to_json());

  auto model = MaeModelT<float>::init(cfg.model, cfg.seed);
  AdamWConfig ocfg;
  ocfg.weight_decay = cfg.weight_decay;
  AdamW opt(ocfg);
  visit_params(model, [&](const std::string& name, Tensor& t) {
    opt.add_param(&t, name, 1.0);
  });

  int64_t start_step = 0;
  if (!resume_from.empty()) {
    Checkpoint ck = load_checkpoint(resume_from);
    if (config_hash(ck.run_config) != cfg.hash()) {
      throw ConfigError("resume checkpoint was produced by a different run config");
    }
    unpack_params(ck, model);
    unpack_optimizer(ck, opt);
    start_step = ck.step;
  }

  StepLogger logger(out_dir / "log.jsonl", start_step > 0);
  TrainResult res;
  double loss_value = 0;

  for (int64_t step = start_step; step < cfg.total_steps; ++step) {
    double lr = cosine_lr(step, cfg.total_steps, cfg.lr_max, cfg.lr_floor(),
                          cfg.warmup_steps());
    GradAccum acc;
    double batch_loss = 0;
    try {
      for (int64_t k = 0; k < cfg.batch_size; ++k) {
        int64_t subject = draw_subject(split, cfg.seed, step, k);
        SubjectData s = load_subject(manifest, subject, vf, cfg.model);
        MaskPlan plan =
            sample_mask(s.batch.n_tokens(), cfg.model.mask_ratio,
                        derive_seed(derive_seed(cfg.seed, kTagMask, uint64_t(step)),
                                    uint64_t(k)));
        GraphT<float> g(/*check_finite=*/true);
        auto fwd = mae_forward(g, model, s.batch, plan);
        auto loss = pretrain_loss(g, fwd.pred, s.batch, plan, scope);
        double lv = double(g.value(loss).data[0]);
        g.backward(loss);
        acc.add(g, opt.slots(), 1.0 / double(cfg.batch_size));
        batch_loss += lv / double(cfg.batch_size);
      }
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " (pretrain step " +
                         std::to_string(step) + ")");
    }
    if (!std::isfinite(batch_loss)) {
      throw NumericError("non-finite pretrain loss at step " + std::to_string(step));
    }
    opt.step(lr, [&](const Tensor* p) { return acc.lookup(p); });

    loss_value = batch_loss;
    if (step == start_step) res.initial_loss = batch_loss;
    if (step % cfg.log_every == 0 || step + 1 == cfg.total_steps) {
      logger.log(step, batch_loss, lr);
    }
    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 &&
        step + 1 < cfg.total_steps) {
      Checkpoint ck = checkpoint_shell(cfg, step + 1);
      pack_params(ck, model);
      pack_optimizer(ck, opt);
      save_checkpoint(out_dir / step_ckpt_name(step + 1), ck);
    }
  }

  Checkpoint final = checkpoint_shell(cfg, cfg.total_steps);
  pack_params(final, model);
  res.checkpoint = out_dir / "checkpoint_final.ckpt";
  save_checkpoint(res.checkpoint, final);
  res.final_loss = loss_value;

  ordered_json summary;
  summary["initial_loss"] = res.initial_loss;
  summary["final_loss"] = res.final_loss;
  summary["steps"] = cfg.total_steps;
  summary["config_hash"] = cfg.hash();
  write_json(out_dir / "summary.json", summary);
  return res;
}

// ---------------------------------------------------------------------------
// Phase II

TrainResult finetune_run(const RunConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  if (cfg.task != "phenotype" && cfg.task != "seg") {
    throw ConfigError("finetune_run got task '" + cfg.task + "'");
  }
  DatasetManifest manifest = DatasetManifest::load(cfg.data);
  const std::vector<int64_t>& split = named_split(manifest, "finetune");
  ViewFilter vf = view_filter_from_string(cfg.views);

  RunLock lock(out_dir);
  write_json(out_dir / "run_config.json", cfg.to_json());

  auto model = MaeModelT<float>::init(cfg.model, cfg.seed);
  if (cfg.init != "random") {
    Checkpoint ck = load_checkpoint(cfg.init);
    RunConfig src = RunConfig::from_json(ck.run_config);
    if (model_to_json(src.model) != model_to_json(cfg.model)) {
      throw ConfigError("finetune model config differs from the checkpoint's");
    }
    load_encoder_into(ck, model);
  }

  Rng head_rng(derive_seed(cfg.seed, kTagHead));
  PhenHeadT<float> phen;
  SegHeadT<float> seg_head;
  Standardizer standardizer;
  Standardizer feat_std;
  bool is_phen = cfg.task == "phenotype";
  if (is_phen) {
    phen = PhenHeadT<float>::init(cfg.model.dim, cfg.phen_hidden, head_rng);
    standardizer = Standardizer::fit(split_targets(manifest, split));
    // One pass over the split with the initial encoder to fit the feature
    // standardizer; the encoder barely moves in phase II, so the statistics
    // stay representative.
    std::vector<std::vector<double>> rows;
    for (int64_t subject : split) {
      SubjectData s = load_subject(manifest, subject, vf, cfg.model);
      GraphT<float> g;
      const Tensor& v = g.value(pooled_representation(g, encode_full(g, model, s.batch).normed));
      rows.emplace_back(v.data.begin(), v.data.end());
    }
    feat_std = Standardizer::fit(rows);
  } else {
    seg_head = SegHeadT<float>::init(cfg.seg, cfg.model, head_rng);
  }

  AdamWConfig ocfg;
  ocfg.weight_decay = cfg.weight_decay;
  AdamW opt(ocfg);
  visit_encoder_params(model, [&](const std::string& name, Tensor& t) {
    opt.add_param(&t, name, 1.0);
  });
  if (is_phen) {
    visit_params(phen, [&](const std::string& name, Tensor& t) {
      opt.add_param(&t, name, cfg.head_lr_mult);
    });
  } else {
    visit_params(seg_head, [&](const std::string& name, Tensor& t) {
      opt.add_param(&t, name, cfg.head_lr_mult);
    });
  }

  StepLogger logger(out_dir / "log.jsonl", false);
  TrainResult res;
  double loss_value = 0;

  for (int64_t step = 0; step < cfg.total_steps; ++step) {
    double lr = cosine_lr(step, cfg.total_steps, cfg.lr_max, cfg.lr_floor(),
                          cfg.warmup_steps());
    GradAccum acc;
    double batch_loss = 0;
    try {
      for (int64_t k = 0; k < cfg.batch_size; ++k) {
        int64_t subject = draw_subject(split, cfg.seed, step, k);
        SubjectData s = load_subject(manifest, subject, vf, cfg.model);
        GraphT<float> g(/*check_finite=*/true);
        auto enc = encode_full(g, model, s.batch);
        typename GraphT<float>::NodeId loss;
        if (is_phen) {
          auto pooled = pooled_representation(g, enc.normed);
          auto targets = standardize_targets<float>(
              standardizer, {load_phenotypes(manifest.subject_dir(subject)).targets()});
          loss = phenotype_loss(g, phen_forward(g, phen, feature_norm(g, pooled, feat_std)),
                                targets);
        } else {
          auto labels = load_label_planes(manifest.subject_dir(subject), vf);
          SegTargets t = seg_targets(labels, s.batch, cfg.model, cfg.seg);
          loss = seg_loss(g, seg_forward(g, seg_head, enc, s.batch, cfg.model), t);
        }
        double lv = double(g.value(loss).data[0]);
        g.backward(loss);
        acc.add(g, opt.slots(), 1.0 / double(cfg.batch_size));
        batch_loss += lv / double(cfg.batch_size);
      }
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " (" + cfg.task + " step " +
                         std::to_string(step) + ")");
    }
    if (!std::isfinite(batch_loss)) {
      throw NumericError("non-finite " + cfg.task + " loss at step " + std::to_string(step));
    }
    opt.step(lr, [&](const Tensor* p) { return acc.lookup(p); });

    loss_value = batch_loss;
    if (step == 0) res.initial_loss = batch_loss;
    if (step % cfg.log_every == 0 || step + 1 == cfg.total_steps) {
      logger.log(step, batch_loss, lr);
    }
  }

  Checkpoint ck = checkpoint_shell(cfg, cfg.total_steps);
  visit_encoder_params(model, [&](const std::string& name, Tensor& t) {
    ck.put_f32(name, t.shape, t.data);
  });
  if (is_phen) {
    pack_params(ck, phen);
    pack_standardizer(ck, "phen.norm", standardizer);
    pack_standardizer(ck, "phen.feat", feat_std);
  } else {
    pack_params(ck, seg_head);
  }
  res.checkpoint = out_dir / "checkpoint_final.ckpt";
  save_checkpoint(res.checkpoint, ck);
  res.final_loss = loss_value;

  ordered_json summary;
  summary["initial_loss"] = res.initial_loss;
  summary["final_loss"] = res.final_loss;
  summary["steps"] = cfg.total_steps;
  summary["config_hash"] = cfg.hash();
  write_json(out_dir / "summary.json", summary);
  return res;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

EvalReport eval_recon(LoadedCheckpoint& lc, const DatasetManifest& manifest,
                      const std::string& split_name) {
  if (!lc.full_model) {
    throw DataError("reconstruction evaluation needs a pretraining checkpoint");
  }
  ViewFilter vf = view_filter_from_string(lc.rc.views);
  MaeModelT<float>& model = lc.model;

  EvalReport rep;
  for (int64_t subject : named_split(manifest, split_name)) {
    SubjectData s = load_subject(manifest, subject, vf, lc.rc.model);
    MaskPlan plan = sample_mask(s.batch.n_tokens(), lc.rc.model.mask_ratio,
                                derive_seed(kTagEval, uint64_t(subject)));
    GraphT<float> g;
    auto fwd = mae_forward(g, model, s.batch, plan);

    TokenBatch recon = s.batch;
    recon.values = g.value(fwd.pred);
    PlaneStack rebuilt = unpatchify(recon);

    double span = double(s.batch.norm_max) - double(s.batch.norm_min);
    double lo = double(s.batch.norm_min);
    std::vector<double> sa, la;
    for (size_t p = 0; p < rebuilt.planes.size(); ++p) {
      Tensor denorm = rebuilt.planes[p].vol;
      for (float& v : denorm.data) v = float(double(v) * span + lo);
      double db = psnr(s.raw.planes[p].vol, denorm, 1.0);
      (view_is_sa(rebuilt.planes[p].view) ? sa : la).push_back(db);
    }
    std::map<std::string, double> row;
    std::vector<double> all = sa;
    all.insert(all.end(), la.begin(), la.end());
    row["psnr_all"] = mean_std(all).mean;
    if (!sa.empty()) row["psnr_sa"] = mean_std(sa).mean;
    if (!la.empty()) row["psnr_la"] = mean_std(la).mean;
    rep.add(subject, std::move(row));
  }
  rep.meta["note"] =
      "per-plane PSNR in raw intensity units (peak 1.0), averaged within view groups; "
      "masked forward with a per-subject mask seed";
  return rep;
}

EvalReport eval_phenotype(LoadedCheckpoint& lc, const DatasetManifest& manifest,
                          const std::string& split_name) {
  if (!lc.ck.has("phen.fc1.w")) {
    throw DataError("checkpoint has no phenotype head");
  }
  MaeModelT<float>& model = lc.model;
  Rng rng(0);
  PhenHeadT<float> head = PhenHeadT<float>::init(lc.rc.model.dim, lc.rc.phen_hidden, rng);
  unpack_params(lc.ck, head);
  Standardizer z = standardizer_from(lc.ck, "phen.norm", kNumTargets);
  Standardizer fz = standardizer_from(lc.ck, "phen.feat", lc.rc.model.dim);
  ViewFilter vf = view_filter_from_string(lc.rc.views);

  EvalReport rep;
  for (int64_t subject : named_split(manifest, split_name)) {
    SubjectData s = load_subject(manifest, subject, vf, lc.rc.model);
    GraphT<float> g;
    auto enc = encode_full(g, model, s.batch);
    auto pred =
        phen_forward(g, head, feature_norm(g, pooled_representation(g, enc.normed), fz));
    std::vector<double> phys = destandardize_row(z, g.value(pred), 0);
    std::vector<double> truth = load_phenotypes(manifest.subject_dir(subject)).targets();

    std::map<std::string, double> row;
    for (size_t j = 0; j < size_t(kNumTargets); ++j) {
      row["ae_" + std::string(kTargetNames[j])] = std::abs(phys[j] - truth[j]);
      // the constant predictor at the fine-tuning-split mean
      row["baseline_ae_" + std::string(kTargetNames[j])] = std::abs(z.mean[j] - truth[j]);
      row["pred_" + std::string(kTargetNames[j])] = phys[j];
    }
    rep.add(subject, std::move(row));
  }
  rep.meta["note"] =
      "absolute errors in native units; baseline is the fine-tuning split mean stored "
      "with the head";
  return rep;
}

EvalReport eval_seg(LoadedCheckpoint& lc, const DatasetManifest& manifest,
                    const std::string& split_name) {
  if (!lc.ck.has("seg.entry.w")) {
    throw DataError("checkpoint has no segmentation head");
  }
  MaeModelT<float>& model = lc.model;
  Rng rng(0);
  SegHeadT<float> head = SegHeadT<float>::init(lc.rc.seg, lc.rc.model, rng);
  unpack_params(lc.ck, head);
  ViewFilter vf = view_filter_from_string(lc.rc.views);

  EvalReport rep;
  for (int64_t subject : named_split(manifest, split_name)) {
    SubjectData s = load_subject(manifest, subject, vf, lc.rc.model);
    auto truth = load_label_planes(manifest.subject_dir(subject), vf);

    GraphT<float> g;
    auto enc = encode_full(g, model, s.batch);
    auto logits = seg_forward(g, head, enc, s.batch, lc.rc.model);
    auto planes = seg_rows_to_planes(seg_decode(g.value(logits)),
                                     int64_t(truth.size()), lc.rc.model);

    // pool pixels per view group, then Dice per class
    std::vector<uint8_t> sa_pred, sa_true, la_pred, la_true, all_pred, all_true;
    for (size_t p = 0; p < planes.size(); ++p) {
      auto& pv = view_is_sa(s.batch.plane_views[p]) ? sa_pred : la_pred;
      auto& tv = view_is_sa(s.batch.plane_views[p]) ? sa_true : la_true;
      pv.insert(pv.end(), planes[p].data.begin(), planes[p].data.end());
      tv.insert(tv.end(), truth[p].data.begin(), truth[p].data.end());
      all_pred.insert(all_pred.end(), planes[p].data.begin(), planes[p].data.end());
      all_true.insert(all_true.end(), truth[p].data.begin(), truth[p].data.end());
    }

    std::map<std::string, double> row;
    double bp = 0;
    for (uint8_t c = 1; c < uint8_t(kNumClasses); ++c) {
      double d = dice(all_pred, all_true, c);
      row["dice_" + std::string(kClassNames[c])] = d;
      if (c != 2) bp += d / 4.0;  // the four blood pools
    }
    row["dice_bp_mean"] = bp;
    if (!sa_pred.empty()) {
      for (uint8_t c : {uint8_t(1), uint8_t(2), uint8_t(3)}) {
        row["dice_sa_" + std::string(kClassNames[c])] = dice(sa_pred, sa_true, c);
      }
    }
    if (!la_pred.empty()) {
      for (uint8_t c : {uint8_t(4), uint8_t(5)}) {
        row["dice_la_" + std::string(kClassNames[c])] = dice(la_pred, la_true, c);
      }
    }
    rep.add(subject, std::move(row));
  }
  rep.meta["note"] =
      "per-class Dice over pixels pooled within view groups per subject; ventricular "
      "classes reported on SA planes, atrial classes on LA planes";
  return rep;
}

}  // namespace

EvalReport evaluate_run(const std::string& task, const fs::path& ckpt_path,
                        const std::string& split, const std::string& data_override) {
  LoadedCheckpoint lc = load_model_checkpoint(ckpt_path);
  std::string data = data_override.empty() ? lc.rc.data : data_override;
  DatasetManifest manifest = DatasetManifest::load(data);

  EvalReport rep;
  if (task == "recon") {
    rep = eval_recon(lc, manifest, split);
  } else if (task == "phenotype") {
    rep = eval_phenotype(lc, manifest, split);
  } else if (task == "seg") {
    rep = eval_seg(lc, manifest, split);
  } else {
    throw ConfigError("eval task must be recon, phenotype or seg, got '" + task + "'");
  }
  rep.meta["task"] = task;
  rep.meta["checkpoint"] = ckpt_path.string();
  rep.meta["step"] = lc.ck.step;
  rep.meta["config_hash"] = lc.ck.config_hash;
  rep.meta["split"] = split;
  rep.meta["views"] = lc.rc.views;
  return rep;
}

// ---------------------------------------------------------------------------
// Robustness

ordered_json robustness_run(const fs::path& ckpt_path, const std::string& split,
                            int64_t n_drop, int64_t trials,
                            const std::string& data_override) {
  if (n_drop < 0) throw ConfigError("n_drop must be non-negative");
  if (trials <= 0) throw ConfigError("trials must be positive");
  LoadedCheckpoint lc = load_model_checkpoint(ckpt_path);
  std::string data = data_override.empty() ? lc.rc.data : data_override;
  DatasetManifest manifest = DatasetManifest::load(data);
  ViewFilter vf = view_filter_from_string(lc.rc.views);
  MaeModelT<float>& model = lc.model;

  bool with_head = lc.ck.has("phen.fc1.w");
  PhenHeadT<float> head;
  Standardizer z;
  Standardizer fz;
  if (with_head) {
    Rng rng(0);
    head = PhenHeadT<float>::init(lc.rc.model.dim, lc.rc.phen_hidden, rng);
    unpack_params(lc.ck, head);
    z = standardizer_from(lc.ck, "phen.norm", kNumTargets);
    fz = standardizer_from(lc.ck, "phen.feat", lc.rc.model.dim);
  }

  ordered_json per_trial = ordered_json::array();
  std::vector<double> cosines;
  std::vector<std::vector<double>> deltas(static_cast<size_t>(kNumTargets));

  for (int64_t subject : named_split(manifest, split)) {
    SubjectData s = load_subject(manifest, subject, vf, lc.rc.model);
    int64_t planes = int64_t(s.batch.plane_views.size());
    if (n_drop >= planes) {
      throw ConfigError("n_drop " + std::to_string(n_drop) + " leaves no planes (subject has " +
                        std::to_string(planes) + ")");
    }

    GraphT<float> g0;
    auto enc0 = encode_full(g0, model, s.batch);
    std::vector<float> full_vec = pooled_vector(g0, enc0.normed);
    std::vector<double> full_pred;
    if (with_head) {
      auto p = phen_forward(
          g0, head, feature_norm(g0, pooled_representation(g0, enc0.normed), fz));
      full_pred = destandardize_row(z, g0.value(p), 0);
    }

    for (int64_t trial = 0; trial < trials; ++trial) {
      Rng rng(derive_seed(kTagRobust, uint64_t(subject), uint64_t(trial)));
      std::set<int64_t> positions;
      while (int64_t(positions.size()) < n_drop) {
        positions.insert(int64_t(rng.below(uint64_t(planes))));
      }
      TokenBatch partial = drop_planes(s.batch, positions);

      GraphT<float> g1;
      auto enc1 = encode_full(g1, model, partial);
      std::vector<float> drop_vec = pooled_vector(g1, enc1.normed);
      double cos = cosine_similarity(full_vec, drop_vec);
      cosines.push_back(cos);

      ordered_json t;
      t["subject"] = subject;
      t["trial"] = trial;
      ordered_json dropped = ordered_json::array();
      for (int64_t p : positions) dropped.push_back(s.batch.plane_views[size_t(p)]);
      t["dropped"] = dropped;
      t["cosine"] = cos;
      if (with_head) {
        auto p = phen_forward(
            g1, head, feature_norm(g1, pooled_representation(g1, enc1.normed), fz));
        std::vector<double> drop_pred = destandardize_row(z, g1.value(p), 0);
        for (size_t j = 0; j < size_t(kNumTargets); ++j) {
          double d = std::abs(drop_pred[j] - full_pred[j]);
          t["delta_" + std::string(kTargetNames[j])] = d;
          deltas[j].push_back(d);
        }
      }
      per_trial.push_back(std::move(t));
    }
  }

  ordered_json rep;
  rep["meta"] = {{"checkpoint", ckpt_path.string()},
                 {"config_hash", lc.ck.config_hash},
                 {"split", split},
                 {"views", lc.rc.views},
                 {"n_drop", n_drop},
                 {"trials", trials},
                 {"phenotype_head", with_head}};
  rep["per_trial"] = std::move(per_trial);
  MetricStat c = mean_std(cosines);
  rep["aggregate"]["cosine_mean"] = c.mean;
  rep["aggregate"]["cosine_std"] = c.stdev;
  rep["aggregate"]["cosine_min"] = *std::min_element(cosines.begin(), cosines.end());
  if (with_head) {
    for (size_t j = 0; j < size_t(kNumTargets); ++j) {
      MetricStat d = mean_std(deltas[j]);
      std::string name = kTargetNames[j];
      rep["aggregate"]["delta_" + name + "_mean"] = d.mean;
      rep["aggregate"]["delta_" + name + "_max"] =
          *std::max_element(deltas[j].begin(), deltas[j].end());
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Embedding export

int64_t export_embeddings(const fs::path& ckpt_path, const std::string& split,
                          const fs::path& out_csv, const std::string& data_override) {
  LoadedCheckpoint lc = load_model_checkpoint(ckpt_path);
  std::string data = data_override.empty() ? lc.rc.data : data_override;
  DatasetManifest manifest = DatasetManifest::load(data);
  ViewFilter vf = view_filter_from_string(lc.rc.views);
  MaeModelT<float>& model = lc.model;
  const std::vector<int64_t>& subjects = named_split(manifest, split);

  std::vector<std::vector<float>> embeddings;
  std::vector<std::vector<double>> targets;
  for (int64_t subject : subjects) {
    SubjectData s = load_subject(manifest, subject, vf, lc.rc.model);
    GraphT<float> g;
    auto enc = encode_full(g, model, s.batch);
    embeddings.push_back(pooled_vector(g, enc.normed));
    targets.push_back(load_phenotypes(manifest.subject_dir(subject)).targets());
  }

  std::vector<double> lvm, rvef;
  for (const auto& t : targets) {
    lvm.push_back(t[0]);
    rvef.push_back(t[1]);
  }
  std::vector<int> lvm_group = quintile_groups(lvm);
  std::vector<int> rvef_group = quintile_groups(rvef);

  std::ofstream out(out_csv, std::ios::trunc);
  if (!out.good()) throw DataError("cannot write " + out_csv.string());
  out << "subject";
  for (int64_t j = 0; j < lc.rc.model.dim; ++j) out << ",e" << j;
  for (const char* name : kTargetNames) out << "," << name;
  out << ",lvm_group,rvef_group\n";
  char buf[32];
  for (size_t i = 0; i < subjects.size(); ++i) {
    out << subjects[i];
    for (float v : embeddings[i]) {
      std::snprintf(buf, sizeof(buf), "%.9g", double(v));
      out << "," << buf;
    }
    for (double v : targets[i]) {
      std::snprintf(buf, sizeof(buf), "%.10g", v);
      out << "," << buf;
    }
    out << "," << lvm_group[i] << "," << rvef_group[i] << "\n";
  }
  if (!out.good()) throw DataError("short write on " + out_csv.string());
  out.close();

  ordered_json meta;
  meta["checkpoint"] = ckpt_path.string();
  meta["config_hash"] = lc.ck.config_hash;
  meta["split"] = split;
  meta["rows"] = subjects.size();
  meta["dim"] = lc.rc.model.dim;
  write_json(fs::path(out_csv.string() + ".meta.json"), meta);
  return int64_t(subjects.size());
}

}  // namespace wholeheart
