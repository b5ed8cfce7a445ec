#pragma once

// Spurious-feature detection: per-input criteria (importance, gradient
// sensitivity, explanation instability), the flagging rule and aggregation
// over a dataset onto a fixed feature template.

#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "limeguard/lime.hpp"
#include "limeguard/model.hpp"

namespace limeguard {

enum Criterion : std::uint8_t {
  kImportance = 1,
  kSensitivity = 2,
  kInstability = 4,
};

struct DetectionThresholds {
  double tau = std::numeric_limits<double>::infinity();       // on |beta_j|
  double eps_sens = std::numeric_limits<double>::infinity();  // on mean |df_c/dx| per segment
  double delta = std::numeric_limits<double>::infinity();     // on variance of beta_j across redraws
  // Per template feature: true when the feature is known to be task-irrelevant.
  std::optional<std::vector<bool>> irrelevant;

  void validate() const;
  bool operator==(const DetectionThresholds&) const = default;
};

/// Mean |grad| over every input element that belongs to each segment.
std::vector<double> feature_sensitivity(const Tensor& gradient, const Segmentation& seg);
/// Same, with the gradient of the model's top-class probability.
std::vector<double> feature_sensitivity(const Classifier& model, const Tensor& x, const Segmentation& seg);

/// Population variance of each coefficient over redrawn explanations.
std::vector<double> feature_instability(const std::vector<FeatureExplanation>& expls);

struct InputFlags {
  std::optional<GridTemplate> grid;  // template of the segmentation the flags refer to
  std::vector<std::uint8_t> fired;   // Criterion bits per feature; 0 means not flagged

  bool flagged(std::size_t j) const { return fired[j] != 0; }
  std::size_t count() const;
};

InputFlags flag_features(const FeatureExplanation& expl, const std::vector<double>& sens,
                         const std::vector<double>& instab, const DetectionThresholds& th);

enum class AggregationRule { any, majority };
std::string to_string(AggregationRule r);
AggregationRule parse_aggregation_rule(const std::string& s);

struct SpuriousFeature {
  std::size_t id = 0;
  std::size_t importance_votes = 0;
  std::size_t sensitivity_votes = 0;
  std::size_t instability_votes = 0;
  std::size_t support = 0;  // inputs on which the feature counted under the rule

  bool operator==(const SpuriousFeature&) const = default;
};

struct SpuriousFeatureSet {
  GridTemplate grid;
  std::vector<SpuriousFeature> flagged;  // ascending id
  AggregationRule rule = AggregationRule::any;
  double min_support = 0.3;
  std::size_t num_inputs = 0;
  DetectionThresholds thresholds;
  std::string source;

  bool contains(std::size_t id) const;
  std::vector<std::size_t> ids() const;
  /// Row-major (height, width) pixel mask: 1 on pixels of flagged cells.
  std::vector<std::uint8_t> pixel_mask(std::size_t height, std::size_t width) const;
  bool operator==(const SpuriousFeatureSet&) const = default;
};

/// A feature enters the set when support / num_inputs >= min_support.
/// Under the majority rule an input counts only if at least two of the three
/// criteria fired for it.
SpuriousFeatureSet aggregate_spurious(const std::vector<InputFlags>& flags, AggregationRule rule,
                                      double min_support);

/// Linear-interpolation percentile (q in [0, 100]) of the values.
double percentile(std::vector<double> values, double q);

struct DetectionConfig {
  LimeConfig lime;
  std::size_t redraws = 5;  // explanations per input, base draw included
  double percentile = 90.0;
  std::optional<DetectionThresholds> thresholds;  // unset: calibrate on the detection inputs
  AggregationRule rule = AggregationRule::any;
  double min_support = 0.3;
  std::optional<std::vector<bool>> irrelevant;

  bool operator==(const DetectionConfig&) const = default;
};

struct DetectionReport {
  std::vector<FeatureExplanation> explanations;  // base explanation per input
  std::vector<std::vector<double>> sensitivity;
  std::vector<std::vector<double>> instability;
  std::vector<InputFlags> flags;
  DetectionThresholds thresholds;
  SpuriousFeatureSet spurious;
};

/// Thresholds at the given percentile of the pooled per-feature statistics.
DetectionThresholds calibrate_thresholds(const std::vector<FeatureExplanation>& expls,
                                         const std::vector<std::vector<double>>& sens,
                                         const std::vector<std::vector<double>>& instab, double q);

/// Explains every input, computes the criteria, flags and aggregates. Input i
/// uses LIME seeds lime.seed + i * redraws + r.
DetectionReport detect_spurious(const Classifier& model, const Tensor& inputs, const DetectionConfig& cfg);

nlohmann::json to_json(const DetectionThresholds& th);
DetectionThresholds thresholds_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SpuriousFeatureSet& s);
SpuriousFeatureSet spurious_set_from_json(const nlohmann::json& j);

}  // namespace limeguard
