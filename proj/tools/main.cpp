// Command-line entry point: dataset generation, the two training phases,
// evaluation, plane-dropout robustness and embedding export.
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "wholeheart/harness.hpp"
#include "wholeheart/phantom.hpp"

namespace fs = std::filesystem;
using namespace wholeheart;

namespace {

void emit_json(const ordered_json& j, const std::string& out) {
  if (out.empty()) {
    std::cout << j.dump(2) << "\n";
  } else {
    write_json(out, j);
    std::fprintf(stderr, "wrote %s\n", out.c_str());
  }
}

// Overlay CLI flags on top of an optional config file; flags win.
RunConfig base_config(const std::string& config_path) {
  return config_path.empty() ? RunConfig{} : RunConfig::load(config_path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"whole-heart 3D+T representation learning from sparse cine planes"};
  app.require_subcommand(1);

  // phantom-gen
  auto* gen = app.add_subcommand("phantom-gen", "generate a synthetic cine dataset");
  int64_t gen_n = 224;
  uint64_t gen_seed = 2024;
  std::string gen_out;
  int64_t gen_size = 64;
  gen->add_option("--n", gen_n, "number of subjects");
  gen->add_option("--seed", gen_seed, "generation seed");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--size", gen_size, "plane resolution")->check(CLI::IsMember({64, 128}));

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "masked-autoencoder pretraining");
  std::string pre_data, pre_config, pre_out, pre_views, pre_scope, pre_resume;
  pre->add_option("--data", pre_data, "dataset directory")->required();
  pre->add_option("--config", pre_config, "run config JSON")->required();
  pre->add_option("--out", pre_out, "run directory")->required();
  pre->add_option("--views", pre_views, "plane subset")->check(CLI::IsMember({"all", "sa", "la"}));
  pre->add_option("--loss-scope", pre_scope, "reconstruction loss scope")
      ->check(CLI::IsMember({"all", "masked"}));
  pre->add_option("--resume", pre_resume, "mid-training checkpoint to continue from");

  // finetune
  auto* fin = app.add_subcommand("finetune", "supervised fine-tuning of a task head");
  std::string fin_task, fin_init, fin_data, fin_out, fin_config, fin_views;
  int64_t fin_steps = -1;
  fin->add_option("--task", fin_task, "phenotype or seg")
      ->required()
      ->check(CLI::IsMember({"phenotype", "seg"}));
  fin->add_option("--init", fin_init, "pretraining checkpoint or 'random'")->required();
  fin->add_option("--data", fin_data, "dataset directory")->required();
  fin->add_option("--out", fin_out, "run directory")->required();
  fin->add_option("--config", fin_config, "run config JSON");
  fin->add_option("--views", fin_views, "plane subset")->check(CLI::IsMember({"all", "sa", "la"}));
  fin->add_option("--steps", fin_steps, "override total_steps");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  std::string ev_task, ev_ckpt, ev_split, ev_data, ev_out;
  ev->add_option("--task", ev_task, "recon, phenotype or seg")
      ->required()
      ->check(CLI::IsMember({"recon", "phenotype", "seg"}));
  ev->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
  ev->add_option("--split", ev_split, "pretrain, finetune or test")->required();
  ev->add_option("--data", ev_data, "override the dataset recorded in the checkpoint");
  ev->add_option("--out", ev_out, "report path (default: stdout)");

  // robustness
  auto* rob = app.add_subcommand("robustness", "plane-dropout robustness probe");
  std::string rob_ckpt, rob_split, rob_data, rob_out;
  int64_t rob_drop = 1, rob_trials = 4;
  rob->add_option("--ckpt", rob_ckpt, "checkpoint path")->required();
  rob->add_option("--split", rob_split, "subject split")->required();
  rob->add_option("--drop", rob_drop, "planes to drop per trial")->required();
  rob->add_option("--trials", rob_trials, "trials per subject")->required();
  rob->add_option("--data", rob_data, "override the dataset recorded in the checkpoint");
  rob->add_option("--out", rob_out, "report path (default: stdout)");

  // export-emb
  auto* exp = app.add_subcommand("export-emb", "export pooled embeddings as CSV");
  std::string exp_ckpt, exp_split, exp_out, exp_data;
  exp->add_option("--ckpt", exp_ckpt, "checkpoint path")->required();
  exp->add_option("--split", exp_split, "subject split")->required();
  exp->add_option("--out", exp_out, "CSV path")->required();
  exp->add_option("--data", exp_data, "override the dataset recorded in the checkpoint");

  try {
    app.parse(argc, argv);

    if (app.got_subcommand(gen)) {
      DatasetManifest m = build_dataset(gen_n, gen_seed, gen_out, gen_size);
      std::fprintf(stderr, "wrote %lld subjects to %s (pretrain %zu, finetune %zu, test %zu)\n",
                   (long long)m.n, gen_out.c_str(), m.pretrain.size(), m.finetune.size(),
                   m.test.size());
    } else if (app.got_subcommand(pre)) {
      RunConfig cfg = base_config(pre_config);
      cfg.task = "pretrain";
      cfg.data = pre_data;
      if (!pre_views.empty()) cfg.views = pre_views;
      if (!pre_scope.empty()) cfg.loss_scope = pre_scope;
      TrainResult r = pretrain_run(cfg, pre_out, pre_resume);
      std::fprintf(stderr, "pretraining done: loss %.6f -> %.6f, checkpoint %s\n",
                   r.initial_loss, r.final_loss, r.checkpoint.c_str());
    } else if (app.got_subcommand(fin)) {
      RunConfig cfg = base_config(fin_config);
      cfg.task = fin_task;
      cfg.init = fin_init;
      cfg.data = fin_data;
      if (!fin_views.empty()) cfg.views = fin_views;
      if (fin_steps > 0) cfg.total_steps = fin_steps;
      TrainResult r = finetune_run(cfg, fin_out);
      std::fprintf(stderr, "fine-tuning done: loss %.6f -> %.6f, checkpoint %s\n",
                   r.initial_loss, r.final_loss, r.checkpoint.c_str());
    } else if (app.got_subcommand(ev)) {
      EvalReport rep = evaluate_run(ev_task, ev_ckpt, ev_split, ev_data);
      emit_json(rep.to_json(), ev_out);
    } else if (app.got_subcommand(rob)) {
      emit_json(robustness_run(rob_ckpt, rob_split, rob_drop, rob_trials, rob_data), rob_out);
    } else if (app.got_subcommand(exp)) {
      int64_t n = export_embeddings(exp_ckpt, exp_split, exp_out, exp_data);
      std::fprintf(stderr, "wrote %lld embedding rows to %s\n", (long long)n, exp_out.c_str());
    }
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kExitNumeric;
  }
  return kExitOk;
}
