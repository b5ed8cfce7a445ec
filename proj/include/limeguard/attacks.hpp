#pragma once

// White-box L-infinity attacks driven by the input gradient of the task loss
// against the true labels. All attacks are deterministic.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "limeguard/model.hpp"

namespace limeguard {

enum class AttackFamily { fgsm, pgd, fgsm_spurious };
std::string to_string(AttackFamily f);
AttackFamily parse_attack_family(const std::string& s);

struct AttackConfig {
  AttackFamily family = AttackFamily::fgsm;
  double epsilon = 0.03;
  double step_size = 0.01;  // pgd only
  int steps = 40;           // pgd only
  double clamp_lo = 0.0;
  double clamp_hi = 1.0;
  // fgsm_spurious only: row-major (height, width) mask shared by all channels.
  std::optional<std::vector<std::uint8_t>> spurious_mask;

  void validate() const;
  bool operator==(const AttackConfig&) const = default;
};

nlohmann::json to_json(const AttackConfig& cfg);
AttackConfig attack_config_from_json(const nlohmann::json& j);

/// Called after every PGD step with the step index (1-based) and the iterate.
using PgdObserver = std::function<void(int step, const Tensor& iterate)>;

Tensor fgsm(const Classifier& model, const LabeledBatch& batch, const AttackConfig& cfg);
Tensor pgd(const Classifier& model, const LabeledBatch& batch, const AttackConfig& cfg,
           const PgdObserver& observer = {});

struct SpuriousAttackResult {
  Tensor adversarial;
  bool empty_mask = false;  // nothing to perturb; adversarial == inputs
};
SpuriousAttackResult fgsm_spurious(const Classifier& model, const LabeledBatch& batch, const AttackConfig& cfg);

/// Dispatches on cfg.family.
Tensor run_attack(const Classifier& model, const LabeledBatch& batch, const AttackConfig& cfg);

}  // namespace limeguard
