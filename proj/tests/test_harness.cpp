#include <cstdint>
#include <filesystem>
#include <fstream>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "wholeheart/harness.hpp"

using namespace wholeheart;
namespace fs = std::filesystem;

namespace {

std::vector<uint8_t> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(in),
                              std::istreambuf_iterator<char>());
}

// Shared 7-subject dataset (pretrain 4 / finetune 2 / test 1), generated once.
const fs::path& small_dataset() {
  static fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "wh_harness_ds";
    fs::remove_all(d);
    build_dataset(7, 77, d.string(), 64);
    return d;
  }();
  return dir;
}

RunConfig short_pretrain(int64_t steps) {
  RunConfig cfg;
  cfg.task = "pretrain";
  cfg.data = small_dataset().string();
  cfg.total_steps = steps;
  cfg.log_every = 1;
  return cfg;
}

fs::path fresh_dir(const std::string& name) {
  fs::path d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  return d;
}

}  // namespace

TEST_CASE("run config json roundtrip is strict and hash-stable") {
  RunConfig cfg;
  cfg.task = "seg";
  cfg.seed = 99;
  cfg.data = "/some/where";
  cfg.views = "sa";
  cfg.model.image = 64;
  cfg.seg.entry_dim = 32;

  ordered_json j = cfg.to_json();
  RunConfig back = RunConfig::from_json(j);
  CHECK(back.to_json() == j);
  CHECK(back.hash() == cfg.hash());

  ordered_json typo = j;
  typo["loss_sc0pe"] = "all";
  CHECK_THROWS_AS(RunConfig::from_json(typo), ConfigError);
  ordered_json typo2 = j;
  typo2["model"]["dimension"] = 128;
  CHECK_THROWS_AS(RunConfig::from_json(typo2), ConfigError);
  ordered_json typo3 = j;
  typo3["seg"]["stage_dims"] = {1, 2};
  CHECK_THROWS_AS(RunConfig::from_json(typo3), ConfigError);

  // partial configs overlay defaults
  RunConfig part = RunConfig::from_json(ordered_json{{"total_steps", 5}});
  CHECK(part.total_steps == 5);
  CHECK(part.lr_max == RunConfig{}.lr_max);

  // a different seed changes the hash
  ordered_json j2 = j;
  j2["seed"] = 100;
  CHECK(config_hash(j2) != cfg.hash());
}

TEST_CASE("run config validation rejects bad fields") {
  RunConfig cfg;
  cfg.data = "x";
  CHECK_NOTHROW(cfg.validate());

  RunConfig bad = cfg;
  bad.task = "classify";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.total_steps = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.warmup_frac = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.loss_scope = "some";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.views = "axial";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.data = "";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.lr_max = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  // lr_min = 0 selects the 1% floor
  CHECK(cfg.lr_floor() == doctest::Approx(cfg.lr_max / 100.0));
  cfg.lr_min = 3e-6;
  CHECK(cfg.lr_floor() == 3e-6);
}

TEST_CASE("run lock is exclusive and released on destruction") {
  fs::path dir = fresh_dir("wh_lock_test");
  {
    RunLock lock(dir);
    CHECK(fs::exists(dir / "run.lock"));
    CHECK_THROWS_AS(RunLock{dir}, DataError);
  }
  CHECK(!fs::exists(dir / "run.lock"));
  CHECK_NOTHROW(RunLock{dir});
}

TEST_CASE("identical pretraining runs produce byte-identical outputs") {
  RunConfig cfg = short_pretrain(3);
  fs::path a = fresh_dir("wh_det_a"), b = fresh_dir("wh_det_b");
  TrainResult ra = pretrain_run(cfg, a);
  TrainResult rb = pretrain_run(cfg, b);
  CHECK(ra.final_loss == rb.final_loss);
  CHECK(file_bytes(a / "checkpoint_final.ckpt") == file_bytes(b / "checkpoint_final.ckpt"));
  CHECK(file_bytes(a / "log.jsonl") == file_bytes(b / "log.jsonl"));

  // a different seed diverges
  RunConfig other = cfg;
  other.seed += 1;
  fs::path c = fresh_dir("wh_det_c");
  pretrain_run(other, c);
  CHECK(file_bytes(a / "checkpoint_final.ckpt") != file_bytes(c / "checkpoint_final.ckpt"));
}

TEST_CASE("resuming a mid-training checkpoint matches the uninterrupted run") {
  RunConfig cfg = short_pretrain(4);
  cfg.checkpoint_every = 2;
  fs::path full = fresh_dir("wh_resume_full");
  pretrain_run(cfg, full);
  fs::path mid = full / "checkpoint_step_000002.ckpt";
  REQUIRE(fs::exists(mid));

  fs::path resumed = fresh_dir("wh_resume_cont");
  pretrain_run(cfg, resumed, mid);
  CHECK(file_bytes(full / "checkpoint_final.ckpt") ==
        file_bytes(resumed / "checkpoint_final.ckpt"));

  // a config mismatch is rejected before any training
  RunConfig other = cfg;
  other.lr_max *= 2;
  fs::path bad = fresh_dir("wh_resume_bad");
  CHECK_THROWS_AS(pretrain_run(other, bad, mid), ConfigError);
}

TEST_CASE("finetune saves encoder plus head and eval routes by content") {
  RunConfig pre = short_pretrain(2);
  fs::path pre_dir = fresh_dir("wh_ft_pre");
  TrainResult pr = pretrain_run(pre, pre_dir);

  RunConfig fin;
  fin.task = "phenotype";
  fin.data = small_dataset().string();
  fin.init = pr.checkpoint.string();
  fin.total_steps = 2;
  fin.batch_size = 2;
  fs::path fin_dir = fresh_dir("wh_ft_run");
  TrainResult fr = finetune_run(fin, fin_dir);

  Checkpoint ck = load_checkpoint(fr.checkpoint);
  CHECK(ck.has("patch_embed.w"));
  CHECK(ck.has("enc.0.q.w"));
  CHECK(ck.has("phen.fc1.w"));
  CHECK(ck.has("phen.norm.mean"));
  CHECK(ck.has("phen.feat.mean"));
  CHECK(ck.has("phen.feat.std"));
  CHECK(!ck.has("dec_embed.w"));
  CHECK(!ck.has("mask_token"));
  CHECK(!ck.has("out_head.w"));

  // phenotype eval works on it; reconstruction eval cannot
  EvalReport rep = evaluate_run("phenotype", fr.checkpoint, "test");
  REQUIRE(rep.subjects.size() == 1);
  CHECK(rep.subjects[0].second.count("ae_lvm") == 1);
  CHECK(rep.subjects[0].second.count("baseline_ae_rvef") == 1);
  CHECK_THROWS_AS(evaluate_run("recon", fr.checkpoint, "test"), DataError);
  CHECK_THROWS_AS(evaluate_run("seg", fr.checkpoint, "test"), DataError);

  // the pretraining checkpoint has no head
  CHECK_THROWS_AS(evaluate_run("phenotype", pr.checkpoint, "test"), DataError);
}

TEST_CASE("view-restricted training and robustness plane accounting") {
  RunConfig pre = short_pretrain(2);
  pre.views = "sa";
  fs::path dir = fresh_dir("wh_views_sa");
  TrainResult r = pretrain_run(pre, dir);

  // reconstruction eval under the sa filter reports no LA planes
  EvalReport rep = evaluate_run("recon", r.checkpoint, "test");
  REQUIRE(rep.subjects.size() == 1);
  CHECK(rep.subjects[0].second.count("psnr_sa") == 1);
  CHECK(rep.subjects[0].second.count("psnr_la") == 0);

  // six SA planes: dropping all of them is rejected, dropping five is not
  CHECK_THROWS_AS(robustness_run(r.checkpoint, "test", 6, 1), ConfigError);
  ordered_json rob = robustness_run(r.checkpoint, "test", 5, 2);
  CHECK(rob["per_trial"].size() == 2);
  CHECK(rob["aggregate"]["cosine_mean"].get<double>() <= 1.0);

  // dropping zero planes is the identity: cosine exactly 1
  ordered_json none = robustness_run(r.checkpoint, "test", 0, 1);
  CHECK(none["aggregate"]["cosine_mean"].get<double>() == 1.0);
}
