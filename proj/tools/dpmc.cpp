// Copyright (c) 2026 The dpmc Authors
// SPDX-License-Identifier: Apache-2.0
//
// dpmc command line: differentially private training, distillation and
// pruning of small layered classifiers, plus pure accounting queries.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dpmc/dpmc.hpp"

namespace {

// Shared flags for the training subcommands; mirrors PipelineConfig.
void add_common_training_options(CLI::App* cmd, dpmc::PipelineConfig& cfg,
                                 std::string& preset) {
  cmd->add_option("--data", cfg.data_path, "training CSV (f0,...,fD-1,label)")
      ->required();
  cmd->add_option("--eval-data", cfg.eval_data_path,
                  "held-out CSV for eval_accuracy (default: training data)");
  cmd->add_option("--classes", cfg.classes, "class count (0 = infer)");
  cmd->add_option("--hidden", cfg.hidden, "hidden width H");
  cmd->add_option("--epochs", cfg.epochs, "total training epochs");
  cmd->add_option("--lr", cfg.learning_rate, "learning rate");
  cmd->add_option("--clip-norm", cfg.clip_norm, "per-example l2 clip norm C");
  cmd->add_option("--batch", cfg.batch, "expected batch size");
  cmd->add_option("--epsilon", cfg.epsilon, "total privacy budget epsilon");
  cmd->add_option("--delta", cfg.delta, "privacy delta (0 = 1/(10N))");
  cmd->add_option("--preset", preset,
                  "named budget preset: paper-eps4.0 | paper-eps4.25");
  cmd->add_flag("--fixed-batches", [&cfg](std::int64_t) { cfg.poisson = false; },
                "shuffled fixed-size batches instead of Poisson sampling "
                "(accounting becomes approximate)");
  cmd->add_option("--seed", cfg.seed, "run seed")->required();
  cmd->add_option("--name", cfg.name, "run name (output directory leaf)");
  cmd->add_option("--out", cfg.out_root, "output root directory");
}

void apply_preset(const std::string& preset, dpmc::PipelineConfig& cfg) {
  if (preset.empty()) return;
  if (preset == "paper-eps4.0") {
    cfg.epsilon = 4.0;
  } else if (preset == "paper-eps4.25") {
    cfg.epsilon = 4.25;
  } else {
    throw dpmc::ConfigError("unknown preset '" + preset + "'");
  }
}

int execute_run(dpmc::PipelineConfig& cfg, const std::string& preset) {
  apply_preset(preset, cfg);
  const dpmc::RunResult result = dpmc::run(cfg);
  std::cout << "run " << result.dir.string() << "\n"
            << "  accuracy " << result.metrics["eval_accuracy"].get<double>()
            << ", blocks " << result.metrics["block_count"].get<std::size_t>()
            << ", sparsity " << result.metrics["sparsity"].get<double>() << "%\n";
  if (result.privacy["total_epsilon"].is_number()) {
    std::cout << "  epsilon " << result.privacy["total_epsilon"].get<double>()
              << " at delta " << result.privacy["delta"].get<double>() << " ("
              << result.privacy["accountant"].get<std::string>() << ")\n";
  } else {
    std::cout << "  non-private run\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"differentially private model compression at desk scale"};
  app.require_subcommand(1);

  // ---- training subcommands ----
  dpmc::PipelineConfig ft_cfg;
  std::string ft_preset;
  bool ft_no_dp = false;
  CLI::App* ft = app.add_subcommand("finetune", "DPSGD fine-tuning");
  add_common_training_options(ft, ft_cfg, ft_preset);
  ft->add_option("--blocks", ft_cfg.blocks, "block count when starting fresh");
  ft->add_option("--checkpoint", ft_cfg.checkpoint, "starting checkpoint");
  ft->add_flag("--no-dp", ft_no_dp, "plain SGD (no clipping, no noise)");

  dpmc::PipelineConfig kd_cfg;
  kd_cfg.kind = dpmc::PipelineKind::kDpkd;
  kd_cfg.blocks = 4;
  std::string kd_preset;
  CLI::App* kd = app.add_subcommand("dpkd", "private knowledge distillation");
  add_common_training_options(kd, kd_cfg, kd_preset);
  kd->add_option("--teacher-checkpoint", kd_cfg.teacher_checkpoint,
                 "pre-trained teacher checkpoint (fresh random teacher if unset)");
  kd->add_option("--teacher-blocks", kd_cfg.teacher_blocks,
                 "teacher depth when no checkpoint is given");
  kd->add_option("--blocks", kd_cfg.blocks, "student block count");
  kd->add_option("--init", kd_cfg.init,
                 "student init: random | zero-shot-pt | zero-shot-ft");
  kd->add_option("--lambda", kd_cfg.lambda, "distillation weight");
  kd->add_option("--temperature", kd_cfg.temperature, "softmax temperature");
  kd->add_option("--teacher-fraction", kd_cfg.teacher_epoch_fraction,
                 "teacher share of total epochs");

  dpmc::PipelineConfig st_cfg;
  st_cfg.kind = dpmc::PipelineKind::kDpimpStructured;
  std::string st_preset;
  CLI::App* st = app.add_subcommand("dpimp-structured",
                                    "iterative magnitude pruning: block drops");
  add_common_training_options(st, st_cfg, st_preset);
  st->add_option("--checkpoint", st_cfg.checkpoint, "starting checkpoint");
  st->add_option("--blocks", st_cfg.blocks, "block count when starting fresh");
  st->add_option("--drop", st_cfg.layers_to_drop, "number of blocks to drop");
  st->add_option("--alpha", st_cfg.alpha_pct, "bottom-magnitude percent per round");
  st->add_option("--prune-epochs", st_cfg.prune_epochs,
                 "epochs across pruning rounds (0 = epochs/2)");
  st->add_option("--final-epochs", st_cfg.final_epochs,
                 "epochs of final fine-tuning (0 = epochs/2)");

  dpmc::PipelineConfig un_cfg;
  un_cfg.kind = dpmc::PipelineKind::kDpimpUnstructured;
  std::string un_preset;
  CLI::App* un = app.add_subcommand(
      "dpimp-unstructured", "iterative magnitude pruning: mask with reset");
  add_common_training_options(un, un_cfg, un_preset);
  un->add_option("--checkpoint", un_cfg.checkpoint, "starting checkpoint");
  un->add_option("--blocks", un_cfg.blocks, "block count when starting fresh");
  un->add_option("--sparsity", un_cfg.sparsity_pct, "target sparsity S%");
  un->add_option("--alpha", un_cfg.alpha_pct, "percent pruned per round");
  un->add_option("--prune-epochs", un_cfg.prune_epochs,
                 "epochs across pruning rounds (0 = epochs/2)");
  un->add_option("--final-epochs", un_cfg.final_epochs,
                 "epochs of final fine-tuning (0 = epochs/2)");

  // ---- accountant ----
  CLI::App* acct = app.add_subcommand("accountant", "pure privacy queries");
  double acct_q = 0.0, acct_sigma = 0.0, acct_delta = 0.0, acct_target = 0.0;
  std::uint64_t acct_steps = 0;
  acct->add_option("--q", acct_q, "Poisson sampling rate")->required();
  acct->add_option("--steps", acct_steps, "step count")->required();
  acct->add_option("--delta", acct_delta, "delta")->required();
  acct->add_option("--sigma", acct_sigma, "noise multiplier (query epsilon)");
  acct->add_option("--target-epsilon", acct_target,
                   "target epsilon (query the noise multiplier)");

  // ---- synth ----
  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  std::string synth_out;
  std::size_t synth_classes = 3, synth_n = 4096, synth_dim = 32;
  std::uint64_t synth_seed = 1;
  double synth_sep = 2.0;
  synth->add_option("--out", synth_out, "output CSV path")->required();
  synth->add_option("--classes", synth_classes, "class count");
  synth->add_option("--n", synth_n, "example count");
  synth->add_option("--dim", synth_dim, "feature dimension");
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--separation", synth_sep, "cluster separation");

  // ---- eval ----
  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  std::string ev_data, ev_checkpoint;
  std::size_t ev_classes = 0;
  ev->add_option("--data", ev_data, "CSV dataset")->required();
  ev->add_option("--checkpoint", ev_checkpoint, "model checkpoint")->required();
  ev->add_option("--classes", ev_classes, "class count (0 = infer)");

  // ---- compare ----
  CLI::App* cmp = app.add_subcommand("compare", "aggregate run metrics");
  std::vector<std::string> cmp_dirs;
  cmp->add_option("dirs", cmp_dirs, "run directories")->required();

  // ---- sweep ----
  dpmc::PipelineConfig sw_cfg;
  std::string sw_preset;
  CLI::App* sw = app.add_subcommand(
      "sweep", "fine-tune once per learning rate on the fixed grid");
  add_common_training_options(sw, sw_cfg, sw_preset);
  sw->add_option("--blocks", sw_cfg.blocks, "block count when starting fresh");
  sw->add_option("--checkpoint", sw_cfg.checkpoint, "starting checkpoint");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*ft) {
      ft_cfg.no_dp = ft_no_dp;
      return execute_run(ft_cfg, ft_preset);
    }
    if (*kd) return execute_run(kd_cfg, kd_preset);
    if (*st) return execute_run(st_cfg, st_preset);
    if (*un) return execute_run(un_cfg, un_preset);

    if (*acct) {
      if (acct_target > 0.0) {
        const dpmc::CalibrationResult cal = dpmc::calibrate_sigma(
            {acct_target, acct_delta}, acct_q, acct_steps);
        std::cout << "sigma " << cal.sigma;
        if (cal.clamped_to_floor) {
          std::cout << " (warning: clamped to the minimum representable sigma)";
        }
        std::cout << '\n';
      } else {
        dpmc::RdpAccountant a;
        a.charge("query", acct_q, acct_sigma, acct_steps);
        const dpmc::EpsilonAtOrder eps = a.epsilon(acct_delta);
        std::cout << "epsilon " << eps.epsilon << " (order " << eps.order
                  << ", rdp-subsampled-gaussian-v1)\n";
      }
      return 0;
    }

    if (*synth) {
      const dpmc::Dataset ds = dpmc::make_synthetic(synth_classes, synth_n,
                                                    synth_dim, synth_seed, synth_sep);
      dpmc::save_csv(ds, synth_out);
      std::cout << "wrote " << synth_out << " (" << ds.size() << " x "
                << ds.feature_dim << ", " << ds.class_count << " classes)\n";
      return 0;
    }

    if (*ev) {
      const dpmc::Dataset ds = dpmc::load_csv(ev_data, ev_classes);
      std::ifstream in(ev_checkpoint);
      if (!in) throw dpmc::DataError("cannot open checkpoint " + ev_checkpoint);
      nlohmann::json doc;
      in >> doc;
      const dpmc::LayeredClassifier model =
          dpmc::LayeredClassifier::from_checkpoint_json(doc);
      std::cout << "accuracy " << dpmc::evaluate(model, ds) << '\n';
      return 0;
    }

    if (*cmp) {
      std::vector<std::filesystem::path> dirs(cmp_dirs.begin(), cmp_dirs.end());
      std::cout << dpmc::compare_table(dirs);
      return 0;
    }

    if (*sw) {
      std::vector<std::filesystem::path> dirs;
      for (const double lr : dpmc::sweep_learning_rates()) {
        dpmc::PipelineConfig cfg = sw_cfg;
        apply_preset(sw_preset, cfg);
        cfg.learning_rate = lr;
        cfg.name = cfg.run_name() + "-lr" + std::to_string(lr);
        dirs.push_back(dpmc::run(cfg).dir);
      }
      std::cout << dpmc::compare_table(dirs);
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "dpmc: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
