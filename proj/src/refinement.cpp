#include "limeguard/refinement.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "limeguard/eval.hpp"
#include "limeguard/io.hpp"

namespace limeguard {

namespace {

struct InputGradient {
  Tensor grad;           // d p_c / d x
  std::vector<int> cls;  // argmax class per sample
  Matrix logits;
};

InputGradient class_gradient(const Classifier& model, const Tensor& inputs) {
  Tape<double> tape;
  model.forward(inputs, tape);
  const auto n = static_cast<Eigen::Index>(inputs.batch());
  const int k = model.num_classes();
  InputGradient out;
  out.logits = Eigen::Map<const Matrix>(tape.logits.data(), n, k);
  const Matrix p = softmax(out.logits);
  Tensor seed(inputs.batch(), {static_cast<std::size_t>(k), 1, 1});
  out.cls.resize(inputs.batch());
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index c = 0;
    p.row(i).maxCoeff(&c);
    out.cls[static_cast<std::size_t>(i)] = static_cast<int>(c);
    for (Eigen::Index j = 0; j < k; ++j) {
      seed[static_cast<std::size_t>(i * k + j)] = p(i, c) * ((j == c ? 1.0 : 0.0) - p(i, j));
    }
  }
  out.grad = model.backward(tape, seed, std::span<double>{}, true);
  return out;
}

// Squared L2 norm of each sample's gradient on each flagged feature, (n, |F|).
Matrix feature_sq_norms(const Tensor& g, const FeaturePixels& px) {
  const InputShape s = g.shape();
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(g.batch()), static_cast<Eigen::Index>(px.num_features));
  for (std::size_t i = 0; i < g.batch(); ++i) {
    const double* gi = g.data() + i * s.size();
    for (std::size_t c = 0; c < s.channels; ++c) {
      for (std::size_t p = 0; p < s.plane(); ++p) {
        const int f = px.feature_of_pixel[p];
        if (f >= 0) out(static_cast<Eigen::Index>(i), f) += gi[c * s.plane() + p] * gi[c * s.plane() + p];
      }
    }
  }
  return out;
}

// Adds the parameter gradient of sum_i grad_x p_c(x_i) . v_i, with v held
// fixed, by pushing the tangent direction v through a dual-number pass.
void add_directional_param_grad(const Classifier& model, const Tensor& x, const Tensor& v,
                                const std::vector<int>& cls, std::span<double> param_grad) {
  BasicTensor<Dual> xd(x.batch(), x.shape());
  for (std::size_t q = 0; q < x.size(); ++q) xd[q] = Dual(x[q], v[q]);
  Tape<Dual> tape;
  model.forward(xd, tape);
  const std::size_t k = static_cast<std::size_t>(model.num_classes());
  BasicTensor<Dual> seed(x.batch(), {k, 1, 1});
  std::vector<Dual> e(k);
  for (std::size_t i = 0; i < x.batch(); ++i) {
    Dual mx = tape.logits[i * k];
    for (std::size_t j = 1; j < k; ++j)
      if (tape.logits[i * k + j] > mx) mx = tape.logits[i * k + j];
    Dual sum(0.0);
    for (std::size_t j = 0; j < k; ++j) {
      e[j] = exp(tape.logits[i * k + j] - mx);
      sum += e[j];
    }
    const auto c = static_cast<std::size_t>(cls[i]);
    const Dual pc = e[c] / sum;
    for (std::size_t j = 0; j < k; ++j) seed[i * k + j] = pc * (Dual(j == c ? 1.0 : 0.0) - e[j] / sum);
  }
  std::vector<Dual> gd(model.num_parameters());
  model.backward(tape, seed, std::span<Dual>(gd), false);
  for (std::size_t q = 0; q < gd.size(); ++q) param_grad[q] += gd[q].d;
}

}  // namespace

std::string to_string(MaskingMode m) {
  switch (m) {
    case MaskingMode::off:
      return "off";
    case MaskingMode::zero_fill:
      return "zero-fill";
    case MaskingMode::mean_fill:
      return "mean-fill";
  }
  return "off";
}

MaskingMode parse_masking_mode(const std::string& s) {
  if (s == "off") return MaskingMode::off;
  if (s == "zero-fill") return MaskingMode::zero_fill;
  if (s == "mean-fill") return MaskingMode::mean_fill;
  throw ConfigError("unknown masking mode '" + s + "'");
}

std::string to_string(PenaltyForm p) { return p == PenaltyForm::squared ? "squared" : "unsquared"; }

PenaltyForm parse_penalty_form(const std::string& s) {
  if (s == "squared") return PenaltyForm::squared;
  if (s == "unsquared") return PenaltyForm::unsquared;
  throw ConfigError("unknown penalty form '" + s + "'");
}

void RefinementConfig::validate() const {
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  if (!(alpha_adv >= 0.0)) throw ConfigError("alpha_adv must be >= 0");
  if (!(mask_probability >= 0.0 && mask_probability <= 1.0)) throw ConfigError("mask_probability must lie in [0, 1]");
  if (outer_iterations < 1) throw ConfigError("outer_iterations must be >= 1");
  if (epochs_per_iteration < 1) throw ConfigError("epochs_per_iteration must be >= 1");
  if (detection_samples == 0) throw ConfigError("detection_samples must be positive");
  if (convergence.patience < 1) throw ConfigError("convergence patience must be >= 1");
  if (!(probe_epsilon >= 0.0 && probe_epsilon <= 1.0)) throw ConfigError("probe_epsilon must lie in [0, 1]");
  if (attack.family == AttackFamily::pgd) attack.validate();
  if (!(attack.epsilon >= 0.0 && attack.epsilon <= 1.0)) throw ConfigError("training attack epsilon must lie in [0, 1]");
}

FeaturePixels FeaturePixels::from(const SpuriousFeatureSet& set, const InputShape& shape) {
  const Segmentation seg = grid_segmentation(set.grid, shape.height, shape.width);
  FeaturePixels px;
  px.height = shape.height;
  px.width = shape.width;
  px.num_features = set.flagged.size();
  std::vector<int> index(set.grid.size(), -1);
  for (std::size_t f = 0; f < set.flagged.size(); ++f) {
    if (set.flagged[f].id >= index.size()) throw ConfigError("flagged feature outside the grid template");
    index[set.flagged[f].id] = static_cast<int>(f);
  }
  px.feature_of_pixel.resize(seg.labels.size());
  for (std::size_t p = 0; p < seg.labels.size(); ++p) px.feature_of_pixel[p] = index[static_cast<std::size_t>(seg.labels[p])];
  return px;
}

std::vector<double> channel_means(const Tensor& data) {
  const InputShape s = data.shape();
  std::vector<double> mean(s.channels, 0.0);
  if (data.batch() == 0) return mean;
  for (std::size_t i = 0; i < data.batch(); ++i)
    for (std::size_t c = 0; c < s.channels; ++c)
      for (std::size_t p = 0; p < s.plane(); ++p) mean[c] += data[i * s.size() + c * s.plane() + p];
  for (double& m : mean) m /= static_cast<double>(data.batch() * s.plane());
  return mean;
}

Tensor apply_mask(const Tensor& x, const SpuriousFeatureSet& set, MaskingMode policy,
                  const std::vector<double>& channel_mean) {
  if (policy == MaskingMode::off || set.flagged.empty()) {
    if (policy != MaskingMode::off) FeaturePixels::from(set, x.shape());  // template check
    return x;
  }
  const InputShape s = x.shape();
  const FeaturePixels px = FeaturePixels::from(set, s);
  if (policy == MaskingMode::mean_fill && channel_mean.size() != s.channels) {
    throw ConfigError("mean-fill masking needs one mean per channel");
  }
  Tensor out = x;
  for (std::size_t i = 0; i < x.batch(); ++i)
    for (std::size_t c = 0; c < s.channels; ++c) {
      const double fill = policy == MaskingMode::mean_fill ? channel_mean[c] : 0.0;
      for (std::size_t p = 0; p < s.plane(); ++p) {
        if (px.feature_of_pixel[p] >= 0) out[i * s.size() + c * s.plane() + p] = fill;
      }
    }
  return out;
}

void require_second_order(const Classifier& model) {
  if (!model.supports_second_order()) {
    throw UnsupportedCapability("the sensitivity penalty needs second-order differentiation of " +
                                to_string(model.spec().architecture));
  }
}

PenaltyResult sensitivity_penalty(const Classifier& model, const Tensor& inputs, const FeaturePixels& px,
                                  PenaltyForm form, double weight, std::span<double> param_grad) {
  PenaltyResult r;
  if (px.empty()) {
    r.empty_set = true;
    return r;
  }
  if (px.height != inputs.shape().height || px.width != inputs.shape().width) {
    throw ConfigError("sensitivity penalty: feature pixels do not match the input shape");
  }
  const InputGradient ig = class_gradient(model, inputs);
  const Matrix sq = feature_sq_norms(ig.grad, px);
  const double n = static_cast<double>(inputs.batch());
  const double nf = static_cast<double>(px.num_features);
  r.value = form == PenaltyForm::squared ? sq.sum() / (n * nf) : sq.cwiseSqrt().sum() / n;
  if (param_grad.empty() || weight == 0.0) return r;
  if (param_grad.size() != model.num_parameters()) throw ConfigError("parameter gradient has the wrong length");

  // d value / d theta = d/d theta sum_i grad_x p_c(x_i) . v_i with
  // v = 2 P g / (n |F|) (squared) or sum_j P_j g / (n ||P_j g||) (unsquared).
  const InputShape s = inputs.shape();
  Tensor v(inputs.batch(), s);
  bool any = false;
  for (std::size_t i = 0; i < inputs.batch(); ++i)
    for (std::size_t c = 0; c < s.channels; ++c)
      for (std::size_t p = 0; p < s.plane(); ++p) {
        const int f = px.feature_of_pixel[p];
        if (f < 0) continue;
        const std::size_t q = i * s.size() + c * s.plane() + p;
        double scale = 0.0;
        if (form == PenaltyForm::squared) {
          scale = 2.0 / (n * nf);
        } else {
          const double norm = std::sqrt(sq(static_cast<Eigen::Index>(i), f));
          scale = norm > 0.0 ? 1.0 / (n * norm) : 0.0;
        }
        v[q] = weight * scale * ig.grad[q];
        any = any || v[q] != 0.0;
      }
  if (any) add_directional_param_grad(model, inputs, v, ig.cls, param_grad);
  return r;
}

PenaltyResult sensitivity_reg_loss(const Classifier& model, const LabeledBatch& batch, const SpuriousFeatureSet& set,
                                   std::span<double> param_grad) {
  return sensitivity_penalty(model, batch.inputs, FeaturePixels::from(set, batch.inputs.shape()),
                             PenaltyForm::squared, 1.0, param_grad);
}

LossBreakdown combined_loss(const Classifier& model, const LabeledBatch& batch, const RefinementConfig& cfg,
                            const SpuriousFeatureSet& set, std::span<double> param_grad) {
  LossBreakdown b;
  const LossResult task = task_loss_and_grad(model, batch, param_grad);
  b.task = task.loss;
  b.correct = task.correct;
  if (cfg.alpha_adv > 0.0) {
    AttackConfig attack = cfg.attack;
    if (attack.family == AttackFamily::fgsm_spurious) {
      attack.spurious_mask = set.pixel_mask(batch.inputs.shape().height, batch.inputs.shape().width);
    }
    LabeledBatch adv{run_attack(model, batch, attack), batch.labels};
    std::vector<double> g;
    if (!param_grad.empty()) g.assign(param_grad.size(), 0.0);
    b.adversarial = task_loss_and_grad(model, adv, g).loss;
    for (std::size_t q = 0; q < g.size(); ++q) param_grad[q] += cfg.alpha_adv * g[q];
  }
  if (cfg.lambda > 0.0) {
    const PenaltyResult pen = sensitivity_penalty(model, batch.inputs, FeaturePixels::from(set, batch.inputs.shape()),
                                                  cfg.penalty, cfg.lambda, param_grad);
    b.regularizer = pen.value;
    b.empty_set = pen.empty_set;
  } else {
    b.empty_set = set.flagged.empty();
  }
  b.total = b.task + cfg.alpha_adv * b.adversarial + cfg.lambda * b.regularizer;
  return b;
}

LossBreakdown augmented_loss(const Classifier& model, const LabeledBatch& batch, const SpuriousFeatureSet& set,
                             double lambda, std::span<double> param_grad) {
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  LossBreakdown b;
  const LossResult task = task_loss_and_grad(model, batch, param_grad);
  b.task = task.loss;
  b.correct = task.correct;
  const PenaltyResult pen = sensitivity_penalty(model, batch.inputs, FeaturePixels::from(set, batch.inputs.shape()),
                                                PenaltyForm::unsquared, lambda, param_grad);
  b.regularizer = pen.value;
  b.empty_set = pen.empty_set;
  b.total = b.task + lambda * b.regularizer;
  return b;
}

double mean_spurious_gradient_norm(const Classifier& model, const Tensor& inputs, const SpuriousFeatureSet& set) {
  const FeaturePixels px = FeaturePixels::from(set, inputs.shape());
  if (px.empty() || inputs.batch() == 0) return 0.0;
  double total = 0.0;
  constexpr std::size_t chunk = 100;
  for (std::size_t start = 0; start < inputs.batch(); start += chunk) {
    const std::size_t stop = std::min(inputs.batch(), start + chunk);
    const std::size_t sz = inputs.sample_size();
    const Tensor part(stop - start, inputs.shape(),
                      std::vector<double>(inputs.data() + start * sz, inputs.data() + stop * sz));
    total += feature_sq_norms(class_gradient(model, part).grad, px).cwiseSqrt().sum();
  }
  return total / (static_cast<double>(inputs.batch()) * static_cast<double>(px.num_features));
}

nlohmann::json to_json(const RefinementRecord& r) {
  return {{"iteration", r.iteration},
          {"spurious", to_json(r.spurious)},
          {"clean_accuracy", r.clean_accuracy},
          {"probe_accuracy", r.probe_accuracy},
          {"spurious_grad_norm", r.spurious_grad_norm},
          {"reference_grad_norm", r.reference_grad_norm},
          {"train_loss", r.train_loss},
          {"diverged", r.diverged}};
}

RefinementRecord refinement_record_from_json(const nlohmann::json& j) {
  RefinementRecord r;
  r.iteration = j.at("iteration").get<int>();
  r.spurious = spurious_set_from_json(j.at("spurious"));
  r.clean_accuracy = j.at("clean_accuracy").get<double>();
  r.probe_accuracy = j.at("probe_accuracy").get<double>();
  r.spurious_grad_norm = j.at("spurious_grad_norm").get<double>();
  r.reference_grad_norm = j.at("reference_grad_norm").get<double>();
  r.train_loss = j.at("train_loss").get<double>();
  r.diverged = j.at("diverged").get<bool>();
  return r;
}

void RefinementTrace::write_jsonl(const std::filesystem::path& path) const {
  std::string out;
  for (const auto& r : records) out += to_json(r).dump() + "\n";
  atomic_write(path, out);
}

RefineResult refine(const Classifier& model, const LabeledBatch& train, const LabeledBatch& val,
                    const RefinementConfig& cfg, const RecordCallback& on_record, const EpochCallback& on_epoch) {
  cfg.validate();
  if (cfg.lambda > 0.0) require_second_order(model);
  if (val.empty()) throw ConfigError("refine needs a validation set");

  const std::vector<double> means =
      cfg.masking == MaskingMode::mean_fill ? channel_means(train.inputs) : std::vector<double>{};
  const Tensor detect_inputs = val.slice(0, cfg.detection_samples).inputs;
  AttackConfig probe;
  probe.family = AttackFamily::fgsm;
  probe.epsilon = cfg.probe_epsilon;

  RefineResult result{model, {}};
  RefinementTrace& trace = result.trace;
  trace.initial_clean_accuracy = standard_accuracy(model, val).accuracy;
  trace.initial_probe_accuracy = adversarial_accuracy(model, val, probe).accuracy;

  Classifier current = model;
  std::optional<SpuriousFeatureSet> first_set;
  double best_probe = -std::numeric_limits<double>::infinity();
  double previous_probe = trace.initial_probe_accuracy;
  int stalled = 0;

  for (int it = 1; it <= cfg.outer_iterations; ++it) {
    DetectionReport report = detect_spurious(current, detect_inputs, cfg.detection);
    SpuriousFeatureSet set = std::move(report.spurious);
    set.source = "validation[0:" + std::to_string(detect_inputs.batch()) + "]";
    if (!first_set) {
      first_set = set;
      trace.initial_grad_norm = mean_spurious_gradient_norm(current, detect_inputs, set);
    }

    RefinementRecord rec;
    rec.iteration = it;
    Classifier candidate = current;
    const LossFn loss_fn = [&](const Classifier& m, const LabeledBatch& b, std::mt19937_64& rng,
                               std::vector<double>& grad) {
      const LabeledBatch* used = &b;
      LabeledBatch masked;
      if (cfg.masking != MaskingMode::off && std::uniform_real_distribution<double>(0.0, 1.0)(rng) < cfg.mask_probability) {
        masked = LabeledBatch{apply_mask(b.inputs, set, cfg.masking, means), b.labels};
        used = &masked;
      }
      const LossBreakdown br = combined_loss(m, *used, cfg, set, grad);
      return LossResult{br.total, br.correct};
    };
    try {
      // Epochs are numbered across iterations for the caller.
      const int first_epoch = (it - 1) * cfg.epochs_per_iteration;
      const EpochCallback relay = [&](int e, const Classifier& m, double loss, double acc) {
        if (on_epoch) on_epoch(first_epoch + e, m, loss, acc);
      };
      const TrainingStats stats = train_epochs(candidate, train, loss_fn, cfg.optimizer, cfg.epochs_per_iteration,
                                               cfg.seed + static_cast<std::uint64_t>(it), relay);
      rec.train_loss = stats.loss.back();
    } catch (const DivergenceError&) {
      rec.diverged = true;
      rec.train_loss = std::numeric_limits<double>::quiet_NaN();
      candidate = current;
    }
    current = candidate;

    rec.spurious = set;
    rec.clean_accuracy = standard_accuracy(current, val).accuracy;
    rec.probe_accuracy = adversarial_accuracy(current, val, probe).accuracy;
    rec.spurious_grad_norm = mean_spurious_gradient_norm(current, detect_inputs, set);
    rec.reference_grad_norm = mean_spurious_gradient_norm(current, detect_inputs, *first_set);
    trace.records.push_back(rec);
    if (on_record) on_record(rec, current);

    if (!rec.diverged && rec.probe_accuracy >= best_probe) {  // ties go to the later, longer-trained model
      best_probe = rec.probe_accuracy;
      result.model = current;
      trace.best_iteration = it;
    }
    const double gain_points = 100.0 * (rec.probe_accuracy - previous_probe);
    previous_probe = rec.probe_accuracy;
    stalled = gain_points < cfg.convergence.min_gain ? stalled + 1 : 0;
    if (stalled >= cfg.convergence.patience) break;
  }
  return result;
}

}  // namespace limeguard
