#pragma once

// Experiment configuration and its JSON form. Unknown keys are rejected at
// every level so a typo in lambda or epsilon cannot pass silently.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "limeguard/data.hpp"
#include "limeguard/refinement.hpp"

namespace limeguard {

inline constexpr int kConfigSchemaVersion = 1;

struct DatasetConfig {
  std::string name = "synthetic";  // synthetic | cifar10 | cifar100
  std::string path;                // CIFAR archive directory
  std::string corruptions_path;    // optional directory of <tag>.npy + labels.npy
  std::optional<int> corruption_severity;
  std::size_t train_size = 0;  // stratified training subset; 0 keeps everything
  std::size_t val_size = 5000;  // carved from the end of the training split
  std::size_t max_samples = 0;  // stratified evaluation subset; 0 = full test set
  SyntheticSpuriousSpec synthetic;
  bool use_relevance_oracle = true;  // synthetic data only

  bool operator==(const DatasetConfig&) const = default;
};

struct TrainingConfig {
  int epochs = 10;
  OptimizerConfig optimizer;
  // Stop baseline training at the first epoch whose training accuracy
  // reaches this value.
  std::optional<double> target_accuracy;
  std::uint64_t seed = 0;

  bool operator==(const TrainingConfig&) const = default;
};

struct EvaluationConfig {
  std::vector<double> fgsm_epsilons{0.01, 0.03, 0.1, 0.3};
  std::vector<double> pgd_epsilons{0.01, 0.03, 0.1, 0.3};
  // Step size and step count for the PGD sweep.
  AttackConfig pgd = [] {
    AttackConfig a;
    a.family = AttackFamily::pgd;
    return a;
  }();
  bool corruptions = false;
  std::vector<AttackConfig> corruption_attacks;

  bool operator==(const EvaluationConfig&) const = default;
};

struct ExperimentConfig {
  int schema_version = kConfigSchemaVersion;
  DatasetConfig dataset;
  ModelSpec model;
  TrainingConfig training;
  RefinementConfig refinement;
  EvaluationConfig evaluation;
  std::string output_dir = "runs/default";
  bool audit = false;

  void validate() const;
  bool operator==(const ExperimentConfig&) const = default;
};

nlohmann::json to_json(const OptimizerConfig& c);
OptimizerConfig optimizer_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ModelSpec& s);
ModelSpec model_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const LimeConfig& c);
LimeConfig lime_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const DetectionConfig& c);
DetectionConfig detection_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RefinementConfig& c);
RefinementConfig refinement_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);

/// Canonical text form: sorted keys, two-space indent, trailing newline.
std::string dump_config(const ExperimentConfig& c);
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Desk-scale defaults for the planted-watermark experiment.
ExperimentConfig synthetic_experiment_defaults();
/// Defaults for cifar10 / cifar100; keys omitted from a config file take the
/// defaults of the dataset it names.
ExperimentConfig cifar_experiment_defaults(const std::string& name);

}  // namespace limeguard
