#pragma once

// Accuracy metrics, epsilon and corruption sweeps, and the JSONL/CSV
// metrics store.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "limeguard/attacks.hpp"
#include "limeguard/model.hpp"

namespace limeguard {

struct MetricsRecord {
  std::string model_tag;
  std::string dataset_tag;
  std::optional<std::string> corruption_tag;
  std::optional<std::string> attack_tag;
  std::optional<double> epsilon;
  double accuracy = 0.0;
  std::size_t correct = 0;
  std::size_t n_samples = 0;
  std::uint64_t seed = 0;
  double wall_time = 0.0;  // seconds
  // Training-curve rows carry the epoch and mean loss.
  std::optional<int> epoch;
  std::optional<double> loss;
  std::optional<std::string> warning;
  // Per-sample correctness, kept in memory for audit output; not part of the row.
  std::vector<std::uint8_t> correctness;
};

nlohmann::json to_json(const MetricsRecord& r);
MetricsRecord metrics_record_from_json(const nlohmann::json& j);

/// Fraction of argmax hits; throws ConfigError on an empty dataset.
MetricsRecord standard_accuracy(const ProbabilisticModel& model, const LabeledBatch& data);

/// White-box accuracy on adversarial examples generated against model.
MetricsRecord adversarial_accuracy(const Classifier& model, const LabeledBatch& data, const AttackConfig& cfg);

/// One record per epsilon, all over the same samples in the same order.
/// base supplies the step size and step count for PGD.
std::vector<MetricsRecord> epsilon_sweep(const Classifier& model, const LabeledBatch& data, AttackFamily family,
                                         const std::vector<double>& epsilons, const AttackConfig& base = {});

/// A missing dataset (nullopt) yields warning records instead of metrics.
using CorruptionSets = std::map<std::string, std::optional<LabeledBatch>>;

/// |corruptions| x (1 + |attacks|) records, clean-input rows included.
std::vector<MetricsRecord> corruption_sweep(const Classifier& model, const CorruptionSets& corruptions,
                                            const std::vector<AttackConfig>& attacks);

/// Label-stratified subset of at most max_samples items, original order kept.
LabeledBatch stratified_subsample(const LabeledBatch& data, std::size_t max_samples, std::uint64_t seed);

/// Append-only JSONL file of metrics rows, with an optional audit file of
/// per-sample correctness bitmaps next to it.
class MetricsStore {
 public:
  explicit MetricsStore(std::filesystem::path path, bool audit = false);

  void append(const MetricsRecord& r);
  std::vector<MetricsRecord> read_all() const;
  /// Writes a CSV whose columns mirror the JSONL fields.
  void export_csv(const std::filesystem::path& csv) const;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path audit_path() const;

 private:
  std::filesystem::path path_;
  bool audit_;
};

std::string encode_bitmap(const std::vector<std::uint8_t>& bits);
std::vector<std::uint8_t> decode_bitmap(const std::string& hex, std::size_t n);

}  // namespace limeguard
