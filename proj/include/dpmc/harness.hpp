// Copyright (c) 2026 The dpmc Authors
// SPDX-License-Identifier: Apache-2.0
//
// Run orchestration: a PipelineConfig describes one training run end to end;
// run() executes it and writes runs/<name>/{checkpoint.json, metrics.json,
// privacy.json, config.json}. Reruns with an identical config produce
// byte-identical artifacts (no timestamps, seeded everything, shortest
// round-trip number formatting).

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dpmc/accountant.hpp"
#include "dpmc/dataset.hpp"
#include "dpmc/distill.hpp"
#include "dpmc/dp_sgd.hpp"
#include "dpmc/error.hpp"
#include "dpmc/model.hpp"
#include "dpmc/pipeline.hpp"
#include "dpmc/pruning.hpp"

namespace dpmc {

enum class PipelineKind { kFinetune, kDpkd, kDpimpStructured, kDpimpUnstructured };

inline const char* pipeline_name(PipelineKind k) {
  switch (k) {
    case PipelineKind::kFinetune: return "finetune";
    case PipelineKind::kDpkd: return "dpkd";
    case PipelineKind::kDpimpStructured: return "dpimp-structured";
    case PipelineKind::kDpimpUnstructured: return "dpimp-unstructured";
  }
  return "?";
}

inline PipelineKind pipeline_from_name(const std::string& name) {
  if (name == "finetune") return PipelineKind::kFinetune;
  if (name == "dpkd") return PipelineKind::kDpkd;
  if (name == "dpimp-structured") return PipelineKind::kDpimpStructured;
  if (name == "dpimp-unstructured") return PipelineKind::kDpimpUnstructured;
  throw ConfigError("unknown pipeline '" + name + "'");
}

inline InitKind init_from_name(const std::string& name) {
  if (name == "random") return InitKind::kRandom;
  if (name == "zero-shot-pt") return InitKind::kZeroShotPt;
  if (name == "zero-shot-ft") return InitKind::kZeroShotFt;
  throw ConfigError("unknown init strategy '" + name + "'");
}

/// Epochs -> step count at the given expected batch size (ceiling).
inline std::uint64_t steps_of(double epochs, std::size_t n, double batch) {
  if (epochs <= 0.0) return 0;
  return static_cast<std::uint64_t>(
      std::ceil(epochs * static_cast<double>(n) / batch));
}

struct PipelineConfig {
  PipelineKind kind = PipelineKind::kFinetune;
  std::string name;       // output dir leaf; empty -> "<pipeline>-seed<seed>"
  std::string out_root = "runs";

  std::string data_path;
  std::string eval_data_path;  // empty -> evaluate on the training data
  std::size_t classes = 0;     // 0 -> inferred from the dataset

  // model
  std::size_t hidden = 64;
  std::size_t blocks = 8;          // depth of the trained model (student depth for dpkd)
  std::size_t teacher_blocks = 8;  // teacher depth when no checkpoint is given
  std::string checkpoint;          // starting weights (finetune / dpimp)
  std::string teacher_checkpoint;  // dpkd teacher / zero-shot source
  std::string init = "random";     // dpkd student init strategy

  // optimization (defaults follow the desk-scale conventions: clip norm 1,
  // batch 1024 scaled down to 128)
  double epochs = 10.0;
  double teacher_epoch_fraction = 1.0 / 3.0;  // dpkd: teacher share of epochs
  double prune_epochs = 0.0;                  // dpimp: x (0 -> epochs/2)
  double final_epochs = 0.0;                  // dpimp: y (0 -> epochs/2)
  double learning_rate = 0.05;
  double clip_norm = 1.0;
  double batch = 128.0;
  bool no_dp = false;
  bool poisson = true;

  // privacy
  double epsilon = 4.0;
  double delta = 0.0;  // 0 -> 1/(10N)

  // distillation
  double lambda = 1.0;
  double temperature = 2.0;

  // pruning
  double alpha_pct = 10.0;
  double sparsity_pct = 50.0;
  std::size_t layers_to_drop = 4;

  std::uint64_t seed = 1;

  std::string run_name() const {
    if (!name.empty()) return name;
    return std::string(pipeline_name(kind)) + "-seed" + std::to_string(seed);
  }

  void validate() const {
    if (data_path.empty()) throw ConfigError("config: data path is required");
    if (hidden == 0 || blocks == 0) throw ConfigError("config: empty model");
    if (!(epochs > 0.0)) throw ConfigError("config: epochs must be > 0");
    if (!(batch >= 1.0)) throw ConfigError("config: batch must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("config: lr must be > 0");
    if (!no_dp && !(epsilon > 0.0)) throw ConfigError("config: epsilon must be > 0");
    (void)init_from_name(init);
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["pipeline"] = pipeline_name(kind);
    j["name"] = run_name();
    j["out_root"] = out_root;
    j["data"] = data_path;
    j["eval_data"] = eval_data_path;
    j["classes"] = classes;
    j["hidden"] = hidden;
    j["blocks"] = blocks;
    j["teacher_blocks"] = teacher_blocks;
    j["checkpoint"] = checkpoint;
    j["teacher_checkpoint"] = teacher_checkpoint;
    j["init"] = init;
    j["epochs"] = epochs;
    j["teacher_epoch_fraction"] = teacher_epoch_fraction;
    j["prune_epochs"] = prune_epochs;
    j["final_epochs"] = final_epochs;
    j["learning_rate"] = learning_rate;
    j["clip_norm"] = clip_norm;
    j["batch"] = batch;
    j["no_dp"] = no_dp;
    j["poisson"] = poisson;
    j["epsilon"] = epsilon;
    j["delta"] = delta;
    j["lambda"] = lambda;
    j["temperature"] = temperature;
    j["alpha"] = alpha_pct;
    j["sparsity"] = sparsity_pct;
    j["layers_to_drop"] = layers_to_drop;
    j["seed"] = seed;
    return j;
  }

  static PipelineConfig from_json(const nlohmann::json& j) {
    PipelineConfig c;
    c.kind = pipeline_from_name(j.at("pipeline").get<std::string>());
    c.name = j.value("name", std::string());
    c.out_root = j.value("out_root", std::string("runs"));
    c.data_path = j.at("data").get<std::string>();
    c.eval_data_path = j.value("eval_data", std::string());
    c.classes = j.value("classes", std::size_t{0});
    c.hidden = j.value("hidden", std::size_t{64});
    c.blocks = j.value("blocks", std::size_t{8});
    c.teacher_blocks = j.value("teacher_blocks", std::size_t{8});
    c.checkpoint = j.value("checkpoint", std::string());
    c.teacher_checkpoint = j.value("teacher_checkpoint", std::string());
    c.init = j.value("init", std::string("random"));
    c.epochs = j.value("epochs", 10.0);
    c.teacher_epoch_fraction = j.value("teacher_epoch_fraction", 1.0 / 3.0);
    c.prune_epochs = j.value("prune_epochs", 0.0);
    c.final_epochs = j.value("final_epochs", 0.0);
    c.learning_rate = j.value("learning_rate", 0.05);
    c.clip_norm = j.value("clip_norm", 1.0);
    c.batch = j.value("batch", 128.0);
    c.no_dp = j.value("no_dp", false);
    c.poisson = j.value("poisson", true);
    c.epsilon = j.value("epsilon", 4.0);
    c.delta = j.value("delta", 0.0);
    c.lambda = j.value("lambda", 1.0);
    c.temperature = j.value("temperature", 2.0);
    c.alpha_pct = j.value("alpha", 10.0);
    c.sparsity_pct = j.value("sparsity", 50.0);
    c.layers_to_drop = j.value("layers_to_drop", std::size_t{4});
    c.seed = j.value("seed", std::uint64_t{1});
    return c;
  }
};

struct RunResult {
  std::filesystem::path dir;
  LayeredClassifier model;
  nlohmann::ordered_json metrics;
  nlohmann::ordered_json privacy;
};

namespace detail {

inline LayeredClassifier load_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  nlohmann::json doc;
  in >> doc;
  return LayeredClassifier::from_checkpoint_json(doc);
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << text << '\n';
}

inline nlohmann::ordered_json non_private_report() {
  nlohmann::ordered_json doc;
  doc["total_epsilon"] = nullptr;
  doc["delta"] = nullptr;
  doc["per_phase"] = nlohmann::ordered_json::array();
  doc["order_used"] = nullptr;
  doc["accountant"] = "non-private";
  return doc;
}

}  // namespace detail

/// Executes one configured run and writes its artifact bundle. Any module
/// error propagates; nothing is written on failure paths before training
/// completes.
inline RunResult run(const PipelineConfig& cfg) {
  cfg.validate();
  const Dataset data = load_csv(cfg.data_path, cfg.classes);
  const std::size_t classes = data.class_count;
  const double delta = cfg.delta > 0.0 ? cfg.delta : data.default_delta();
  const PrivacyBudget budget{cfg.epsilon, delta};
  const LayeredClassifier::Dims dims{data.feature_dim, cfg.hidden, classes};

  RunResult result;
  RdpAccountant accountant;
  std::string init_strategy = cfg.checkpoint.empty() ? "random" : "checkpoint";
  std::uint64_t steps = 0;

  switch (cfg.kind) {
    case PipelineKind::kFinetune: {
      LayeredClassifier model =
          cfg.checkpoint.empty()
              ? LayeredClassifier::random(dims, cfg.blocks, derive_seed(cfg.seed, 50))
              : detail::load_checkpoint_file(cfg.checkpoint);
      steps = steps_of(cfg.epochs, data.size(), cfg.batch);
      if (cfg.no_dp) {
        result.model = pretrain(std::move(model), data, steps, cfg.learning_rate,
                                cfg.batch, cfg.seed);
        result.privacy = detail::non_private_report();
      } else {
        DpSgdConfig dp;
        dp.clip_norm = cfg.clip_norm;
        dp.learning_rate = cfg.learning_rate;
        dp.expected_batch_size = cfg.batch;
        dp.poisson_sampling = cfg.poisson;
        dp.seed = cfg.seed;
        FinetuneResult ft = dp_finetune(std::move(model), data, budget, dp, steps);
        result.model = std::move(ft.model);
        accountant = std::move(ft.accountant);
      }
      break;
    }
    case PipelineKind::kDpkd: {
      const LayeredClassifier teacher =
          cfg.teacher_checkpoint.empty()
              ? LayeredClassifier::random(dims, cfg.teacher_blocks,
                                          derive_seed(cfg.seed, 51))
              : detail::load_checkpoint_file(cfg.teacher_checkpoint);
      const double teacher_epochs = cfg.epochs * cfg.teacher_epoch_fraction;
      const std::uint64_t teacher_steps =
          steps_of(teacher_epochs, data.size(), cfg.batch);
      const std::uint64_t distill_steps =
          steps_of(cfg.epochs - teacher_epochs, data.size(), cfg.batch);
      DpSgdConfig dp;
      dp.clip_norm = cfg.clip_norm;
      dp.learning_rate = cfg.learning_rate;
      dp.expected_batch_size = cfg.batch;
      dp.poisson_sampling = cfg.poisson;
      dp.seed = cfg.seed;
      DpkdResult kd = dpkd(teacher, init_from_name(cfg.init), cfg.blocks, data,
                           budget, {cfg.lambda, cfg.temperature}, dp,
                           teacher_steps, distill_steps);
      result.model = std::move(kd.student);
      accountant = std::move(kd.accountant);
      steps = teacher_steps + distill_steps;
      init_strategy = cfg.init;
      break;
    }
    case PipelineKind::kDpimpStructured:
    case PipelineKind::kDpimpUnstructured: {
      LayeredClassifier model =
          cfg.checkpoint.empty()
              ? LayeredClassifier::random(dims, cfg.blocks, derive_seed(cfg.seed, 50))
              : detail::load_checkpoint_file(cfg.checkpoint);
      const double prune_epochs =
          cfg.prune_epochs > 0.0 ? cfg.prune_epochs : cfg.epochs / 2.0;
      const double final_epochs =
          cfg.final_epochs > 0.0 ? cfg.final_epochs : cfg.epochs / 2.0;
      const std::uint64_t rounds =
          cfg.kind == PipelineKind::kDpimpStructured
              ? cfg.layers_to_drop
              : static_cast<std::uint64_t>(
                    std::ceil(cfg.sparsity_pct / cfg.alpha_pct - 1e-12));
      ImpConfig imp;
      imp.alpha_pct = cfg.alpha_pct;
      imp.steps_per_round =
          rounds == 0 ? 0
                      : steps_of(prune_epochs, data.size(), cfg.batch) / rounds;
      imp.final_steps = steps_of(final_epochs, data.size(), cfg.batch);
      DpSgdConfig dp;
      dp.clip_norm = cfg.clip_norm;
      dp.learning_rate = cfg.learning_rate;
      dp.expected_batch_size = cfg.batch;
      dp.poisson_sampling = cfg.poisson;
      dp.seed = cfg.seed;
      ImpResult imp_result =
          cfg.kind == PipelineKind::kDpimpStructured
              ? structured_dpimp_private(std::move(model), cfg.layers_to_drop,
                                         imp, dp, data, budget)
              : unstructured_dpimp_private(std::move(model), cfg.sparsity_pct,
                                           imp, dp, data, budget);
      result.model = std::move(imp_result.model);
      accountant = std::move(imp_result.accountant);
      steps = rounds * imp.steps_per_round + imp.final_steps;
      break;
    }
  }

  if (result.privacy.is_null()) {
    result.privacy = accountant.report(delta);
  }

  const Dataset eval_data = cfg.eval_data_path.empty()
                                ? data
                                : load_csv(cfg.eval_data_path, classes);

  result.metrics["task"] = data.name;
  result.metrics["pipeline"] = pipeline_name(cfg.kind);
  result.metrics["init_strategy"] = init_strategy;
  result.metrics["sparsity"] = result.model.sparsity() * 100.0;
  result.metrics["block_count"] = result.model.block_count();
  result.metrics["eval_accuracy"] = evaluate(result.model, eval_data);
  result.metrics["steps"] = steps;
  result.metrics["seed"] = cfg.seed;

  result.dir = std::filesystem::path(cfg.out_root) / cfg.run_name();
  std::filesystem::create_directories(result.dir);
  detail::write_text(result.dir / "checkpoint.json",
                     result.model.to_checkpoint_json().dump(2));
  detail::write_text(result.dir / "metrics.json", result.metrics.dump(2));
  detail::write_text(result.dir / "privacy.json", result.privacy.dump(2));
  detail::write_text(result.dir / "config.json", cfg.to_json().dump(2));
  return result;
}

/// Model label used in comparison tables: unstructured-pruned runs surface
/// as SparseModel(S%), everything else by its depth.
inline std::string model_label(const nlohmann::json& metrics) {
  const std::string pipeline = metrics.at("pipeline").get<std::string>();
  if (pipeline == "dpimp-unstructured") {
    const double s = metrics.at("sparsity").get<double>();
    std::ostringstream os;
    os << "SparseModel(" << std::fixed << std::setprecision(0) << s << "%)";
    return os.str();
  }
  return "Classifier-" + std::to_string(metrics.at("block_count").get<std::size_t>()) + "b";
}

/// Aggregates metrics/privacy documents from run directories into one
/// fixed-width table.
inline std::string compare_table(const std::vector<std::filesystem::path>& dirs) {
  std::ostringstream os;
  os << std::left << std::setw(28) << "run" << std::setw(12) << "task"
     << std::setw(20) << "pipeline" << std::setw(18) << "model" << std::setw(14)
     << "init" << std::setw(8) << "blocks" << std::setw(10) << "sparsity"
     << std::setw(10) << "accuracy" << std::setw(10) << "epsilon"
     << std::setw(8) << "steps" << "seed\n";
  for (const auto& dir : dirs) {
    std::ifstream metrics_in(dir / "metrics.json");
    if (!metrics_in) throw DataError("no metrics.json under " + dir.string());
    nlohmann::json metrics;
    metrics_in >> metrics;
    nlohmann::json privacy;
    std::ifstream privacy_in(dir / "privacy.json");
    if (privacy_in) privacy_in >> privacy;

    std::ostringstream eps;
    if (privacy.is_object() && privacy.contains("total_epsilon") &&
        privacy["total_epsilon"].is_number()) {
      eps << std::fixed << std::setprecision(3)
          << privacy["total_epsilon"].get<double>();
    } else {
      eps << "-";
    }
    os << std::left << std::setw(28) << dir.filename().string() << std::setw(12)
       << metrics.at("task").get<std::string>() << std::setw(20)
       << metrics.at("pipeline").get<std::string>() << std::setw(18)
       << model_label(metrics) << std::setw(14)
       << metrics.at("init_strategy").get<std::string>() << std::setw(8)
       << metrics.at("block_count").get<std::size_t>() << std::setw(10)
       << (std::ostringstream{} << std::fixed << std::setprecision(1)
                                << metrics.at("sparsity").get<double>())
              .str()
       << std::setw(10)
       << (std::ostringstream{} << std::fixed << std::setprecision(4)
                                << metrics.at("eval_accuracy").get<double>())
              .str()
       << std::setw(10) << eps.str() << std::setw(8)
       << metrics.at("steps").get<std::uint64_t>()
       << metrics.at("seed").get<std::uint64_t>() << '\n';
  }
  return os.str();
}

/// Learning-rate grid for the sweep subcommand.
inline std::vector<double> sweep_learning_rates() {
  return {0.0001, 0.0005, 0.0008, 0.001, 0.002};
}

}  // namespace dpmc
