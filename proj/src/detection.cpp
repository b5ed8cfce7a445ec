#include "limeguard/detection.hpp"

#include <algorithm>
#include <cmath>

#include "limeguard/detail/parallel.hpp"

namespace limeguard {

namespace {

constexpr std::size_t kGradientChunk = 64;

void check_nonnegative(double v, const char* name) {
  if (!(v >= 0.0)) throw ConfigError(std::string("detection threshold ") + name + " must be >= 0");
}

nlohmann::json threshold_value(double v) {
  return std::isinf(v) ? nlohmann::json("inf") : nlohmann::json(v);
}

double threshold_from(const nlohmann::json& j) {
  if (j.is_string()) {
    if (j.get<std::string>() == "inf") return std::numeric_limits<double>::infinity();
    throw ConfigError("threshold must be a number or \"inf\"");
  }
  return j.get<double>();
}

}  // namespace

void DetectionThresholds::validate() const {
  check_nonnegative(tau, "tau");
  check_nonnegative(eps_sens, "eps_sens");
  check_nonnegative(delta, "delta");
}

std::vector<double> feature_sensitivity(const Tensor& gradient, const Segmentation& seg) {
  const InputShape s = gradient.shape();
  if (gradient.batch() != 1 || s.height != seg.height || s.width != seg.width) {
    throw ConfigError("feature_sensitivity: gradient does not match segmentation");
  }
  std::vector<double> sums(seg.num_segments, 0.0);
  for (std::size_t c = 0; c < s.channels; ++c) {
    for (std::size_t p = 0; p < s.plane(); ++p) {
      sums[static_cast<std::size_t>(seg.labels[p])] += std::abs(gradient[c * s.plane() + p]);
    }
  }
  const auto counts = seg.pixel_counts();
  for (std::size_t j = 0; j < sums.size(); ++j) sums[j] /= static_cast<double>(counts[j] * s.channels);
  return sums;
}

std::vector<double> feature_sensitivity(const Classifier& model, const Tensor& x, const Segmentation& seg) {
  return feature_sensitivity(output_gradient(model, x), seg);
}

std::vector<double> feature_instability(const std::vector<FeatureExplanation>& expls) {
  if (expls.size() < 2) throw ConfigError("feature_instability needs at least two explanations");
  const auto d = expls.front().coefficients.size();
  for (const auto& e : expls) {
    if (e.coefficients.size() != d || !(e.segmentation == expls.front().segmentation)) {
      throw ConfigError("feature_instability: explanations use different segmentations");
    }
  }
  std::vector<double> var(static_cast<std::size_t>(d), 0.0);
  const double n = static_cast<double>(expls.size());
  for (Eigen::Index j = 0; j < d; ++j) {
    double mean = 0.0;
    for (const auto& e : expls) mean += e.coefficients[j];
    mean /= n;
    double acc = 0.0;
    for (const auto& e : expls) acc += (e.coefficients[j] - mean) * (e.coefficients[j] - mean);
    var[static_cast<std::size_t>(j)] = acc / n;
  }
  return var;
}

std::size_t InputFlags::count() const {
  return static_cast<std::size_t>(std::count_if(fired.begin(), fired.end(), [](std::uint8_t f) { return f != 0; }));
}

InputFlags flag_features(const FeatureExplanation& expl, const std::vector<double>& sens,
                         const std::vector<double>& instab, const DetectionThresholds& th) {
  const auto d = static_cast<std::size_t>(expl.coefficients.size());
  if (sens.size() != d || instab.size() != d) throw ConfigError("flag_features: criterion vectors must have length d");
  if (th.irrelevant && th.irrelevant->size() != d) throw ConfigError("relevance oracle does not match feature count");
  InputFlags out;
  out.grid = expl.segmentation.grid;
  out.fired.assign(d, 0);
  for (std::size_t j = 0; j < d; ++j) {
    if (th.irrelevant && !(*th.irrelevant)[j]) continue;
    std::uint8_t f = 0;
    if (std::abs(expl.coefficients[static_cast<Eigen::Index>(j)]) > th.tau) f |= kImportance;
    if (sens[j] > th.eps_sens) f |= kSensitivity;
    if (instab[j] > th.delta) f |= kInstability;
    out.fired[j] = f;
  }
  return out;
}

std::string to_string(AggregationRule r) { return r == AggregationRule::any ? "any" : "majority"; }

AggregationRule parse_aggregation_rule(const std::string& s) {
  if (s == "any") return AggregationRule::any;
  if (s == "majority") return AggregationRule::majority;
  throw ConfigError("unknown aggregation rule '" + s + "'");
}

bool SpuriousFeatureSet::contains(std::size_t id) const {
  return std::any_of(flagged.begin(), flagged.end(), [&](const SpuriousFeature& f) { return f.id == id; });
}

std::vector<std::size_t> SpuriousFeatureSet::ids() const {
  std::vector<std::size_t> out;
  for (const auto& f : flagged) out.push_back(f.id);
  return out;
}

std::vector<std::uint8_t> SpuriousFeatureSet::pixel_mask(std::size_t height, std::size_t width) const {
  const Segmentation seg = grid_segmentation(grid, height, width);
  std::vector<std::uint8_t> mask(height * width, 0);
  for (std::size_t p = 0; p < mask.size(); ++p) mask[p] = contains(static_cast<std::size_t>(seg.labels[p])) ? 1 : 0;
  return mask;
}

SpuriousFeatureSet aggregate_spurious(const std::vector<InputFlags>& flags, AggregationRule rule,
                                      double min_support) {
  if (!(min_support >= 0.0 && min_support <= 1.0)) throw ConfigError("min_support must lie in [0, 1]");
  if (flags.empty()) throw ConfigError("aggregate_spurious: no inputs");
  for (const auto& f : flags) {
    if (!f.grid) throw ConfigError("aggregation requires fixed-grid segmentations");
    if (!(*f.grid == *flags.front().grid) || f.fired.size() != flags.front().grid->size()) {
      throw ConfigError("aggregation requires every input to share one grid template");
    }
  }
  SpuriousFeatureSet set;
  set.grid = *flags.front().grid;
  set.rule = rule;
  set.min_support = min_support;
  set.num_inputs = flags.size();
  const double n = static_cast<double>(flags.size());
  for (std::size_t j = 0; j < set.grid.size(); ++j) {
    SpuriousFeature f;
    f.id = j;
    for (const auto& in : flags) {
      const std::uint8_t bits = in.fired[j];
      const int votes = ((bits & kImportance) ? 1 : 0) + ((bits & kSensitivity) ? 1 : 0) + ((bits & kInstability) ? 1 : 0);
      const bool counts = rule == AggregationRule::any ? votes >= 1 : votes >= 2;
      if (!counts) continue;
      ++f.support;
      f.importance_votes += (bits & kImportance) ? 1 : 0;
      f.sensitivity_votes += (bits & kSensitivity) ? 1 : 0;
      f.instability_votes += (bits & kInstability) ? 1 : 0;
    }
    if (f.support > 0 && static_cast<double>(f.support) / n >= min_support) set.flagged.push_back(f);
  }
  return set;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ConfigError("percentile of an empty set");
  if (!(q >= 0.0 && q <= 100.0)) throw ConfigError("percentile must lie in [0, 100]");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

DetectionThresholds calibrate_thresholds(const std::vector<FeatureExplanation>& expls,
                                         const std::vector<std::vector<double>>& sens,
                                         const std::vector<std::vector<double>>& instab, double q) {
  std::vector<double> imp, s, v;
  for (const auto& e : expls) {
    const auto i = e.importance();
    imp.insert(imp.end(), i.begin(), i.end());
  }
  for (const auto& row : sens) s.insert(s.end(), row.begin(), row.end());
  for (const auto& row : instab) v.insert(v.end(), row.begin(), row.end());
  DetectionThresholds th;
  th.tau = percentile(imp, q);
  th.eps_sens = percentile(s, q);
  th.delta = percentile(v, q);
  return th;
}

DetectionReport detect_spurious(const Classifier& model, const Tensor& inputs, const DetectionConfig& cfg) {
  if (cfg.redraws < 2) throw ConfigError("detection needs at least two explanation redraws");
  if (cfg.lime.segmentation.mode == SegmentationMode::superpixel) {
    throw ConfigError("dataset-level detection requires grid or tabular segmentation");
  }
  const std::size_t n = inputs.batch();
  if (n == 0) throw ConfigError("detect_spurious: no inputs");
  DetectionReport rep;
  rep.explanations.resize(n);
  rep.sensitivity.resize(n);
  rep.instability.resize(n);

  std::vector<Tensor> grads(n);
  for (std::size_t start = 0; start < n; start += kGradientChunk) {
    const std::size_t stop = std::min(n, start + kGradientChunk);
    const std::size_t sz = inputs.sample_size();
    Tensor chunk(stop - start, inputs.shape(),
                 std::vector<double>(inputs.data() + start * sz, inputs.data() + stop * sz));
    const Tensor g = output_gradient(model, chunk);
    for (std::size_t i = start; i < stop; ++i) grads[i] = take_sample(g, i - start);
  }

  detail::parallel_for(n, [&](std::size_t i) {
    LimeConfig lc = cfg.lime;
    lc.seed = cfg.lime.seed + i * cfg.redraws;
    auto draws = explain_redraws(model, take_sample(inputs, i), lc, cfg.redraws);
    rep.sensitivity[i] = feature_sensitivity(grads[i], draws.front().segmentation);
    rep.instability[i] = feature_instability(draws);
    rep.explanations[i] = std::move(draws.front());
  });

  if (cfg.thresholds) {
    rep.thresholds = *cfg.thresholds;
  } else {
    rep.thresholds = calibrate_thresholds(rep.explanations, rep.sensitivity, rep.instability, cfg.percentile);
  }
  if (cfg.irrelevant) rep.thresholds.irrelevant = cfg.irrelevant;
  rep.thresholds.validate();

  rep.flags.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    rep.flags.push_back(flag_features(rep.explanations[i], rep.sensitivity[i], rep.instability[i], rep.thresholds));
  }
  rep.spurious = aggregate_spurious(rep.flags, cfg.rule, cfg.min_support);
  rep.spurious.thresholds = rep.thresholds;
  return rep;
}

nlohmann::json to_json(const DetectionThresholds& th) {
  nlohmann::json j = {{"tau", threshold_value(th.tau)},
                      {"eps_sens", threshold_value(th.eps_sens)},
                      {"delta", threshold_value(th.delta)}};
  if (th.irrelevant) j["irrelevant"] = *th.irrelevant;
  return j;
}

DetectionThresholds thresholds_from_json(const nlohmann::json& j) {
  DetectionThresholds th;
  th.tau = threshold_from(j.at("tau"));
  th.eps_sens = threshold_from(j.at("eps_sens"));
  th.delta = threshold_from(j.at("delta"));
  if (j.contains("irrelevant")) th.irrelevant = j.at("irrelevant").get<std::vector<bool>>();
  th.validate();
  return th;
}

nlohmann::json to_json(const SpuriousFeatureSet& s) {
  nlohmann::json flagged = nlohmann::json::array();
  for (const auto& f : s.flagged) {
    flagged.push_back({{"id", f.id},
                       {"votes",
                        {{"importance", f.importance_votes},
                         {"sensitivity", f.sensitivity_votes},
                         {"instability", f.instability_votes}}},
                       {"support", f.support}});
  }
  nlohmann::json tmpl = {{"grid_h", s.grid.rows}, {"grid_w", s.grid.cols}, {"cell_h", s.grid.cell_h},
                         {"cell_w", s.grid.cell_w}};
  if (s.grid.rows == 1 && s.grid.cell_h == 1 && s.grid.cell_w == 1) tmpl["columns"] = s.grid.cols;
  return {{"template", tmpl},
          {"flagged", flagged},
          {"thresholds", to_json(s.thresholds)},
          {"rule", to_string(s.rule)},
          {"min_support", s.min_support},
          {"num_inputs", s.num_inputs},
          {"source", s.source}};
}

SpuriousFeatureSet spurious_set_from_json(const nlohmann::json& j) {
  SpuriousFeatureSet s;
  const auto& t = j.at("template");
  if (t.contains("grid_h")) {
    s.grid = {t.at("grid_h").get<std::size_t>(), t.at("grid_w").get<std::size_t>(),
              t.at("cell_h").get<std::size_t>(), t.at("cell_w").get<std::size_t>()};
  } else {
    s.grid = {1, t.at("columns").get<std::size_t>(), 1, 1};
  }
  for (const auto& f : j.at("flagged")) {
    SpuriousFeature sf;
    sf.id = f.at("id").get<std::size_t>();
    if (sf.id >= s.grid.size()) throw ConfigError("spurious feature id outside the template");
    sf.importance_votes = f.at("votes").at("importance").get<std::size_t>();
    sf.sensitivity_votes = f.at("votes").at("sensitivity").get<std::size_t>();
    sf.instability_votes = f.at("votes").at("instability").get<std::size_t>();
    sf.support = f.at("support").get<std::size_t>();
    s.flagged.push_back(sf);
  }
  std::sort(s.flagged.begin(), s.flagged.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  s.thresholds = thresholds_from_json(j.at("thresholds"));
  s.rule = parse_aggregation_rule(j.at("rule").get<std::string>());
  s.min_support = j.value("min_support", 0.3);
  s.num_inputs = j.value("num_inputs", std::size_t{0});
  s.source = j.value("source", std::string());
  return s;
}

}  // namespace limeguard
