#pragma once

// End-to-end baseline-vs-refined runner. Each stage persists its outputs and
// is marked in MANIFEST.json, so re-running on the same directory resumes
// after the last completed stage.

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "limeguard/checkpoint.hpp"
#include "limeguard/config.hpp"
#include "limeguard/figures.hpp"

namespace limeguard {

struct ExperimentData {
  LabeledBatch train;
  LabeledBatch val;
  // Evaluation splits in a fixed order; "test" first, then "ood" for synthetic data.
  std::vector<std::pair<std::string, LabeledBatch>> eval_sets;
  CorruptionSets corruptions;
  std::optional<std::vector<bool>> irrelevant;  // synthetic relevance oracle
  std::vector<std::string> warnings;

  const LabeledBatch& eval_set(const std::string& tag) const;
};

/// Loads or generates the configured dataset, carves the validation split
/// and applies the train and evaluation subsampling.
ExperimentData load_experiment_data(const ExperimentConfig& cfg);

class Experiment {
 public:
  Experiment(ExperimentConfig cfg, std::ostream& log);

  /// All stages; returns 0 on success and 1 after recording the failed stage.
  int run();

  // Individual stages. Each returns immediately when MANIFEST marks it done.
  void train_baseline();
  void refine_baseline();
  void evaluate();
  FigureReport figures();

  const ExperimentConfig& config() const { return cfg_; }
  const ExperimentData& data();
  std::filesystem::path out() const { return cfg_.output_dir; }
  std::filesystem::path baseline_path() const { return out() / "checkpoints" / "baseline.ckpt"; }
  std::filesystem::path refined_path() const { return out() / "checkpoints" / "refined.ckpt"; }
  std::filesystem::path metrics_path() const { return out() / "metrics.jsonl"; }
  bool stage_done(const std::string& stage) const;

 private:
  void load_manifest();
  void save_manifest() const;
  void begin_stage(const std::string& stage);
  void finish_stage(const std::string& stage);
  void append(const std::vector<MetricsRecord>& records);
  MetricsRecord tag(MetricsRecord r, const std::string& model, const std::string& dataset) const;
  std::vector<MetricsRecord> evaluate_model(const Classifier& model, const std::string& model_tag);

  ExperimentConfig cfg_;
  std::ostream& log_;
  std::optional<ExperimentData> data_;
  nlohmann::json manifest_;
};

/// Runs the experiment in cfg.output_dir; see Experiment::run.
int run_experiment(const ExperimentConfig& cfg, std::ostream& log);

}  // namespace limeguard
