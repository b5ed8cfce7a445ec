#pragma once

// Refinement against spurious features: input masking, the input-gradient
// penalty over flagged features, the combined task/adversarial/penalty
// objective and the outer refine / re-explain loop.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "limeguard/attacks.hpp"
#include "limeguard/detection.hpp"
#include "limeguard/model.hpp"

namespace limeguard {

enum class MaskingMode { off, zero_fill, mean_fill };
enum class PenaltyForm { squared, unsquared };

std::string to_string(MaskingMode m);
MaskingMode parse_masking_mode(const std::string& s);
std::string to_string(PenaltyForm p);
PenaltyForm parse_penalty_form(const std::string& s);

struct ConvergenceConfig {
  double min_gain = 0.25;  // accuracy points on the probe attack
  int patience = 1;

  bool operator==(const ConvergenceConfig&) const = default;
};

struct RefinementConfig {
  double lambda = 1.0;
  double alpha_adv = 0.5;
  MaskingMode masking = MaskingMode::zero_fill;
  double mask_probability = 0.5;
  PenaltyForm penalty = PenaltyForm::squared;
  AttackConfig attack;  // attack used to build L_adv during training
  DetectionConfig detection;
  std::size_t detection_samples = 200;
  int outer_iterations = 3;
  int epochs_per_iteration = 2;
  OptimizerConfig optimizer;
  ConvergenceConfig convergence;
  double probe_epsilon = 0.01;  // FGSM budget of the robustness probe
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const RefinementConfig&) const = default;
};

/// Flagged pixels of a spurious set laid out on an image plane.
struct FeaturePixels {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<int> feature_of_pixel;  // index into the flagged list, -1 when unflagged
  std::size_t num_features = 0;

  static FeaturePixels from(const SpuriousFeatureSet& set, const InputShape& shape);
  bool empty() const { return num_features == 0; }
};

/// Replaces flagged pixels by zero or by channel_mean[c]; other pixels are
/// copied unchanged.
Tensor apply_mask(const Tensor& x, const SpuriousFeatureSet& set, MaskingMode policy,
                  const std::vector<double>& channel_mean = {});

std::vector<double> channel_means(const Tensor& data);

struct PenaltyResult {
  double value = 0.0;
  bool empty_set = false;
};

/// Squared form: batch mean over inputs of (1/|F|) sum_j ||d p_c / d x_j||^2.
/// Unsquared form: batch mean of sum_j ||d p_c / d x_j||. The class c is the
/// argmax on each input. When param_grad is non-empty, weight * d value /
/// d params is added to it.
PenaltyResult sensitivity_penalty(const Classifier& model, const Tensor& inputs, const FeaturePixels& pixels,
                                  PenaltyForm form, double weight = 1.0, std::span<double> param_grad = {});

PenaltyResult sensitivity_reg_loss(const Classifier& model, const LabeledBatch& batch, const SpuriousFeatureSet& set,
                                   std::span<double> param_grad = {});

/// Throws UnsupportedCapability unless the model provides mixed second
/// derivatives.
void require_second_order(const Classifier& model);

struct LossBreakdown {
  double task = 0.0;
  double adversarial = 0.0;
  double regularizer = 0.0;
  double total = 0.0;
  bool empty_set = false;
  std::size_t correct = 0;
};

/// L_task + alpha * L_adv + lambda * L_reg on one batch. Adversarial examples
/// are treated as constants with respect to the parameters.
LossBreakdown combined_loss(const Classifier& model, const LabeledBatch& batch, const RefinementConfig& cfg,
                            const SpuriousFeatureSet& set, std::span<double> param_grad = {});

/// L_task + lambda * sum_j ||d p_c / d x_j|| (unsquared penalty).
LossBreakdown augmented_loss(const Classifier& model, const LabeledBatch& batch, const SpuriousFeatureSet& set,
                             double lambda, std::span<double> param_grad = {});

/// Mean over inputs of the mean per-feature L2 norm of d p_c / d x_j.
double mean_spurious_gradient_norm(const Classifier& model, const Tensor& inputs, const SpuriousFeatureSet& set);

struct RefinementRecord {
  int iteration = 0;
  SpuriousFeatureSet spurious;
  double clean_accuracy = 0.0;
  double probe_accuracy = 0.0;
  double spurious_grad_norm = 0.0;   // on this iteration's flagged set
  double reference_grad_norm = 0.0;  // on the first iteration's flagged set
  double train_loss = 0.0;
  bool diverged = false;
};

nlohmann::json to_json(const RefinementRecord& r);
RefinementRecord refinement_record_from_json(const nlohmann::json& j);

struct RefinementTrace {
  double initial_clean_accuracy = 0.0;
  double initial_probe_accuracy = 0.0;
  double initial_grad_norm = 0.0;  // pre-refinement model on the first flagged set
  std::vector<RefinementRecord> records;
  int best_iteration = 0;  // 0 when no iteration completed

  void write_jsonl(const std::filesystem::path& path) const;
};

struct RefineResult {
  Classifier model;
  RefinementTrace trace;
};

using RecordCallback = std::function<void(const RefinementRecord&, const Classifier&)>;

RefineResult refine(const Classifier& model, const LabeledBatch& train, const LabeledBatch& val,
                    const RefinementConfig& cfg, const RecordCallback& on_record = {},
                    const EpochCallback& on_epoch = {});

}  // namespace limeguard
