#include "limeguard/attacks.hpp"

#include <algorithm>
#include <cmath>

namespace limeguard {

namespace {

constexpr std::size_t kAttackChunk = 128;

double sign(double g) { return g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0); }

// Input gradient of the task loss, computed in chunks to bound memory.
Tensor loss_gradient(const Classifier& model, const LabeledBatch& batch) {
  if (batch.size() <= kAttackChunk) return input_gradient(model, batch);
  Tensor out(batch.size(), batch.inputs.shape());
  const std::size_t sz = batch.inputs.sample_size();
  for (std::size_t start = 0; start < batch.size(); start += kAttackChunk) {
    const Tensor g = input_gradient(model, batch.slice(start, start + kAttackChunk));
    std::copy(g.storage().begin(), g.storage().end(), out.data() + start * sz);
  }
  return out;
}

// x + step * sign(g) on masked-in elements, then clip to the eps-ball around
// x0 and to the clamp range.
void signed_step(Tensor& x, const Tensor& x0, const Tensor& g, double step, double eps, const AttackConfig& cfg,
                 const std::vector<std::uint8_t>* pixel_mask) {
  const InputShape s = x.shape();
  const std::size_t plane = s.plane();
  for (std::size_t q = 0; q < x.size(); ++q) {
    if (pixel_mask && !(*pixel_mask)[q % plane]) continue;
    double v = x[q] + step * sign(g[q]);
    v = std::clamp(v, x0[q] - eps, x0[q] + eps);
    x[q] = std::clamp(v, cfg.clamp_lo, cfg.clamp_hi);
  }
}

void require(const AttackConfig& cfg, AttackFamily f) {
  cfg.validate();
  if (cfg.family != f) throw ConfigError("attack called with a config for " + to_string(cfg.family));
}

}  // namespace

std::string to_string(AttackFamily f) {
  switch (f) {
    case AttackFamily::fgsm:
      return "fgsm";
    case AttackFamily::pgd:
      return "pgd";
    case AttackFamily::fgsm_spurious:
      return "fgsm-spurious";
  }
  return "fgsm";
}

AttackFamily parse_attack_family(const std::string& s) {
  if (s == "fgsm") return AttackFamily::fgsm;
  if (s == "pgd") return AttackFamily::pgd;
  if (s == "fgsm-spurious") return AttackFamily::fgsm_spurious;
  throw ConfigError("unknown attack family '" + s + "'");
}

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("attack epsilon must lie in [0, 1]");
  if (!(clamp_lo < clamp_hi)) throw ConfigError("attack clamp range is empty");
  if (family == AttackFamily::pgd && (!(step_size > 0.0) || steps < 1)) {
    throw ConfigError("pgd requires step_size > 0 and steps >= 1");
  }
  if (family == AttackFamily::fgsm_spurious && !spurious_mask) {
    throw ConfigError("fgsm-spurious requires a spurious pixel mask");
  }
}

nlohmann::json to_json(const AttackConfig& cfg) {
  nlohmann::json j = {{"family", to_string(cfg.family)}, {"epsilon", cfg.epsilon},
                      {"step_size", cfg.step_size},      {"steps", cfg.steps},
                      {"clamp", {cfg.clamp_lo, cfg.clamp_hi}}};
  return j;
}

AttackConfig attack_config_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> known = {"family", "epsilon", "step_size", "steps", "clamp"};
  for (const auto& [k, v] : j.items()) {
    if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError("unknown attack key '" + k + "'");
  }
  AttackConfig cfg;
  cfg.family = parse_attack_family(j.value("family", std::string("fgsm")));
  cfg.epsilon = j.value("epsilon", cfg.epsilon);
  cfg.step_size = j.value("step_size", cfg.step_size);
  cfg.steps = j.value("steps", cfg.steps);
  if (j.contains("clamp")) {
    cfg.clamp_lo = j.at("clamp").at(0).get<double>();
    cfg.clamp_hi = j.at("clamp").at(1).get<double>();
  }
  if (cfg.family != AttackFamily::fgsm_spurious) cfg.validate();
  return cfg;
}

Tensor fgsm(const Classifier& model, const LabeledBatch& batch, const AttackConfig& cfg) {
  require(cfg, AttackFamily::fgsm);
  Tensor x = batch.inputs;
  if (cfg.epsilon == 0.0) return x;
  signed_step(x, batch.inputs, loss_gradient(model, batch), cfg.epsilon, cfg.epsilon, cfg, nullptr);
  return x;
}

Tensor pgd(const Classifier& model, const LabeledBatch& batch, const AttackConfig& cfg, const PgdObserver& observer) {
  require(cfg, AttackFamily::pgd);
  LabeledBatch cur = batch;
  for (int t = 1; t <= cfg.steps; ++t) {
    if (cfg.epsilon > 0.0) {
      const Tensor g = loss_gradient(model, cur);
      signed_step(cur.inputs, batch.inputs, g, cfg.step_size, cfg.epsilon, cfg, nullptr);
    }
    if (observer) observer(t, cur.inputs);
  }
  return cur.inputs;
}

SpuriousAttackResult fgsm_spurious(const Classifier& model, const LabeledBatch& batch, const AttackConfig& cfg) {
  require(cfg, AttackFamily::fgsm_spurious);
  const auto& mask = *cfg.spurious_mask;
  if (mask.size() != batch.inputs.shape().plane()) throw ConfigError("spurious mask does not match input plane");
  SpuriousAttackResult out{batch.inputs, false};
  if (std::none_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; })) {
    out.empty_mask = true;
    return out;
  }
  if (cfg.epsilon == 0.0) return out;
  signed_step(out.adversarial, batch.inputs, loss_gradient(model, batch), cfg.epsilon, cfg.epsilon, cfg, &mask);
  return out;
}

Tensor run_attack(const Classifier& model, const LabeledBatch& batch, const AttackConfig& cfg) {
  switch (cfg.family) {
    case AttackFamily::fgsm:
      return fgsm(model, batch, cfg);
    case AttackFamily::pgd:
      return pgd(model, batch, cfg);
    case AttackFamily::fgsm_spurious:
      return fgsm_spurious(model, batch, cfg).adversarial;
  }
  return batch.inputs;
}

}  // namespace limeguard
