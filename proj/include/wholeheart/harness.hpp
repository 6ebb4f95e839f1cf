#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "wholeheart/checkpoint.hpp"
#include "wholeheart/dataset.hpp"
#include "wholeheart/heads.hpp"
#include "wholeheart/metrics.hpp"
#include "wholeheart/model.hpp"

namespace wholeheart {

// Everything a training run needs, serialized into run_config.json and every
// checkpoint manifest. Unknown JSON keys are rejected so typos cannot
// silently fall back to defaults.
struct RunConfig {
  std::string task = "pretrain";  // pretrain | phenotype | seg
  uint64_t seed = 2024;
  int64_t total_steps = 1200;
  int64_t batch_size = 1;
  double lr_max = 1e-4;
  double lr_min = 0.0;  // 0 selects lr_max / 100
  double weight_decay = 0.05;
  double warmup_frac = 0.05;
  double head_lr_mult = 100.0;  // fresh task heads learn faster than the encoder
  std::string loss_scope = "all";
  std::string views = "all";  // all | sa | la
  std::string data;
  std::string init = "random";  // finetune: checkpoint path or "random"
  int64_t phen_hidden = 64;
  int64_t log_every = 10;
  int64_t checkpoint_every = 0;  // 0 = final checkpoint only
  ModelConfig model;
  SegConfig seg;

  double lr_floor() const { return lr_min > 0 ? lr_min : lr_max / 100.0; }
  int64_t warmup_steps() const;

  void validate() const;
  ordered_json to_json() const;
  static RunConfig from_json(const ordered_json& j);
  static RunConfig load(const std::filesystem::path& path);
  std::string hash() const { return config_hash(to_json()); }
};

// One process owns a run directory. The lock file is created exclusively and
// removed on destruction; a leftover lock means another run is live (or died
// hard and the user must remove it).
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path file_;
};

struct TrainResult {
  std::filesystem::path checkpoint;  // final checkpoint path
  double initial_loss = 0;           // loss at the first step taken
  double final_loss = 0;             // loss at the last step
};

// Phase I. Writes run_config.json, log.jsonl, checkpoint_final.ckpt (and
// checkpoint_step_*.ckpt with optimizer state when checkpoint_every > 0)
// under out_dir. resume_from continues a mid-training checkpoint
// bit-identically to an uninterrupted run.
TrainResult pretrain_run(const RunConfig& cfg, const std::filesystem::path& out_dir,
                         const std::filesystem::path& resume_from = {});

// Phase II: loads the encoder from cfg.init (or starts from random weights),
// attaches the task head, trains without masking. The saved checkpoint holds
// encoder + head tensors only; the reconstruction decoder is dropped.
TrainResult finetune_run(const RunConfig& cfg, const std::filesystem::path& out_dir);

// task = recon | phenotype | seg; split = pretrain | finetune | test.
// data_override replaces the dataset path recorded in the checkpoint.
EvalReport evaluate_run(const std::string& task, const std::filesystem::path& ckpt_path,
                        const std::string& split, const std::string& data_override = "");

// Inference-time plane dropout: per subject and trial, the pooled
// representation from all planes vs. from all-but-n_drop planes (token
// omission, no retraining). Reports per-trial cosine similarity and, when the
// checkpoint carries a phenotype head, per-target prediction deltas.
ordered_json robustness_run(const std::filesystem::path& ckpt_path, const std::string& split,
                            int64_t n_drop, int64_t trials,
                            const std::string& data_override = "");

// CSV: subject, e0..e{dim-1}, the five phenotype targets, and quintile group
// indices for LVM and RVEF. Returns the number of subject rows written.
int64_t export_embeddings(const std::filesystem::path& ckpt_path, const std::string& split,
                          const std::filesystem::path& out_csv,
                          const std::string& data_override = "");

}  // namespace wholeheart
