#include "limeguard/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace limeguard {

namespace {

using namespace detail;

constexpr std::size_t kInferenceChunk = 16;  // small chunks keep im2col buffers in cache

std::vector<LayerPtr> build_small_cnn(const ModelSpec& s) {
  const InputShape in = s.input_shape;
  if (in.height < 4 || in.width < 4) throw ConfigError("small-cnn needs inputs of at least 4x4");
  const std::size_t flat = 32 * (in.height / 4) * (in.width / 4);
  return {
      std::make_shared<Conv2d>(in.channels, 16, 3, 1, 1),
      std::make_shared<Relu>(),
      std::make_shared<MaxPool2>(),
      std::make_shared<Conv2d>(16, 32, 3, 1, 1),
      std::make_shared<Relu>(),
      std::make_shared<MaxPool2>(),
      std::make_shared<Flatten>(),
      std::make_shared<Dense>(flat, 128),
      std::make_shared<Relu>(),
      std::make_shared<Dense>(128, static_cast<std::size_t>(s.num_classes)),
  };
}

LayerPtr basic_block(std::size_t in, std::size_t out, std::size_t stride) {
  std::vector<LayerPtr> body{
      std::make_shared<Conv2d>(in, out, 3, stride, 1),
      std::make_shared<Relu>(),
      // Zero-initialised second conv: each block starts as the identity, which
      // keeps the normalisation-free residual stack trainable.
      std::make_shared<Conv2d>(out, out, 3, 1, 1, /*zero_init=*/true),
  };
  std::vector<LayerPtr> shortcut;
  if (stride != 1 || in != out) shortcut.push_back(std::make_shared<Conv2d>(in, out, 1, stride, 0));
  return std::make_shared<Residual>(std::move(body), std::move(shortcut));
}

std::vector<LayerPtr> build_resnet18(const ModelSpec& s) {
  const std::size_t w = s.resnet_width;
  if (w == 0) throw ConfigError("resnet width must be positive");
  std::vector<LayerPtr> layers{std::make_shared<Conv2d>(s.input_shape.channels, w, 3, 1, 1),
                               std::make_shared<Relu>()};
  std::size_t in = w;
  const std::size_t widths[4] = {w, 2 * w, 4 * w, 8 * w};
  for (std::size_t stage = 0; stage < 4; ++stage) {
    for (std::size_t b = 0; b < 2; ++b) {
      const std::size_t stride = (stage > 0 && b == 0) ? 2 : 1;
      layers.push_back(basic_block(in, widths[stage], stride));
      layers.push_back(std::make_shared<Relu>());
      in = widths[stage];
    }
  }
  layers.push_back(std::make_shared<GlobalAvgPool>());
  layers.push_back(std::make_shared<Flatten>());
  layers.push_back(std::make_shared<Dense>(in, static_cast<std::size_t>(s.num_classes)));
  return layers;
}

std::vector<LayerPtr> build_linear(const ModelSpec& s) {
  return {std::make_shared<Flatten>(),
          std::make_shared<Dense>(s.input_shape.size(), static_cast<std::size_t>(s.num_classes))};
}

template <class T>
BasicTensor<T> to_logit_tensor(const Matrix& m) {
  BasicTensor<T> t(static_cast<std::size_t>(m.rows()), InputShape{static_cast<std::size_t>(m.cols()), 1, 1});
  for (Eigen::Index q = 0; q < m.size(); ++q) t[static_cast<std::size_t>(q)] = T(m.data()[q]);
  return t;
}

Matrix logits_of(const Tape<double>& tape) {
  const auto n = static_cast<Eigen::Index>(tape.logits.batch());
  const auto k = static_cast<Eigen::Index>(tape.logits.sample_size());
  return Eigen::Map<const Matrix>(tape.logits.data(), n, k);
}

std::vector<int> argmax_rows(const Matrix& m) {
  std::vector<int> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Eigen::Index best = 0;
    m.row(i).maxCoeff(&best);
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

}  // namespace

std::string to_string(Architecture a) {
  switch (a) {
    case Architecture::small_cnn:
      return "small-cnn";
    case Architecture::resnet18_class:
      return "resnet18-class";
    case Architecture::linear:
      return "linear";
  }
  return "unknown";
}

Architecture parse_architecture(const std::string& s) {
  if (s == "small-cnn") return Architecture::small_cnn;
  if (s == "resnet18-class") return Architecture::resnet18_class;
  if (s == "linear") return Architecture::linear;
  throw ConfigError("unknown architecture '" + s + "'");
}

Classifier::Classifier(ModelSpec spec, std::uint64_t seed) : spec_(spec) {
  if (spec_.num_classes < 1) throw ConfigError("num_classes must be positive");
  if (spec_.input_shape.size() == 0) throw ConfigError("input shape must be non-empty");
  switch (spec_.architecture) {
    case Architecture::small_cnn:
      layers_ = build_small_cnn(spec_);
      break;
    case Architecture::resnet18_class:
      layers_ = build_resnet18(spec_);
      break;
    case Architecture::linear:
      layers_ = build_linear(spec_);
      break;
  }
  InputShape shape = spec_.input_shape;
  std::size_t total = 0;
  for (const auto& l : layers_) {
    shape = l->output_shape(shape);
    offsets_.push_back(total);
    total += l->num_params();
  }
  if (shape.size() != static_cast<std::size_t>(spec_.num_classes)) throw ConfigError("network output size mismatch");
  params_.assign(total, 0.0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    layers_[i]->init_params(rng, std::span<double>(params_).subspan(offsets_[i], layers_[i]->num_params()));
  }
}

bool Classifier::parameters_finite() const {
  return std::all_of(params_.begin(), params_.end(), [](double v) { return std::isfinite(v); });
}

void Classifier::check_input(const Tensor& inputs) const {
  if (!(inputs.shape() == spec_.input_shape)) {
    throw ConfigError("input shape " + inputs.shape().str() + " does not match model input shape " +
                      spec_.input_shape.str());
  }
}

template <class T>
void Classifier::forward(const BasicTensor<T>& inputs, Tape<T>& tape) const {
  if (!(inputs.shape() == spec_.input_shape)) {
    throw ConfigError("input shape " + inputs.shape().str() + " does not match model input shape " +
                      spec_.input_shape.str());
  }
  tape.caches.assign(layers_.size(), {});
  const std::span<const double> p(params_);
  BasicTensor<T> cur = inputs;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    cur = layers_[i]->forward(cur, p.subspan(offsets_[i], layers_[i]->num_params()), &tape.caches[i]);
  }
  tape.logits = std::move(cur);
}

template <class T>
BasicTensor<T> Classifier::backward(const Tape<T>& tape, const BasicTensor<T>& grad_logits,
                                    std::span<T> param_grad, bool need_input_grad) const {
  if (grad_logits.size() != tape.logits.size()) throw ConfigError("backward: seed size mismatch");
  if (!param_grad.empty() && param_grad.size() != params_.size()) {
    throw ConfigError("backward: parameter gradient buffer has wrong size");
  }
  const std::span<const double> p(params_);
  BasicTensor<T> g = grad_logits;
  g.reshape(tape.logits.shape());
  for (std::size_t r = layers_.size(); r-- > 0;) {
    const auto& l = layers_[r];
    auto pg = param_grad.empty() ? param_grad : param_grad.subspan(offsets_[r], l->num_params());
    const bool need = need_input_grad || r > 0;
    g = l->backward(g, p.subspan(offsets_[r], l->num_params()), tape.caches[r], pg, need);
  }
  return need_input_grad ? g : BasicTensor<T>{};
}

template void Classifier::forward<double>(const BasicTensor<double>&, Tape<double>&) const;
template void Classifier::forward<Dual>(const BasicTensor<Dual>&, Tape<Dual>&) const;
template BasicTensor<double> Classifier::backward<double>(const Tape<double>&, const BasicTensor<double>&,
                                                          std::span<double>, bool) const;
template BasicTensor<Dual> Classifier::backward<Dual>(const Tape<Dual>&, const BasicTensor<Dual>&, std::span<Dual>,
                                                      bool) const;

Matrix Classifier::logits(const Tensor& inputs) const {
  check_input(inputs);
  const std::size_t n = inputs.batch();
  const auto k = static_cast<Eigen::Index>(spec_.num_classes);
  Matrix out(static_cast<Eigen::Index>(n), k);
  const std::span<const double> p(params_);
  const std::size_t d = inputs.sample_size();
  for (std::size_t start = 0; start < n; start += kInferenceChunk) {
    const std::size_t stop = std::min(n, start + kInferenceChunk);
    Tensor cur(stop - start, inputs.shape(),
               std::vector<double>(inputs.data() + start * d, inputs.data() + stop * d));
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      cur = layers_[i]->forward(cur, p.subspan(offsets_[i], layers_[i]->num_params()), nullptr);
    }
    out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(stop - start)) =
        Eigen::Map<const Matrix>(cur.data(), static_cast<Eigen::Index>(stop - start), k);
  }
  return out;
}

Matrix Classifier::predict_proba(const Tensor& inputs) const { return softmax(logits(inputs)); }

std::vector<int> Classifier::predict(const Tensor& inputs) const { return argmax_rows(logits(inputs)); }

NumericsCounters& numerics_counters() {
  static NumericsCounters counters;
  return counters;
}

Matrix softmax(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    double s = 0.0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      p(i, j) = std::exp(logits(i, j) - mx);
      s += p(i, j);
    }
    p.row(i) /= s;
  }
  return p;
}

Matrix forward(const Classifier& model, const LabeledBatch& batch) {
  model.check_input(batch.inputs);
  Matrix p = model.predict_proba(batch.inputs);
  if (!p.allFinite()) throw NumericalError("forward produced non-finite probabilities");
  return p;
}

double task_loss(const Classifier& model, const LabeledBatch& batch) {
  batch.validate_labels(model.num_classes());
  // Same arithmetic path as the training objective, so the two agree bitwise.
  return task_loss_and_grad(model, batch, {}).loss;
}

LossResult task_loss_and_grad(const Classifier& model, const LabeledBatch& batch, std::span<double> param_grad,
                              Tensor* input_grad) {
  if (batch.empty()) throw ConfigError("task_loss on empty batch");
  if (batch.inputs.batch() != batch.size()) throw ConfigError("inputs/labels size mismatch");
  Tape<double> tape;
  model.forward(batch.inputs, tape);
  const Matrix p = softmax(logits_of(tape));
  if (!p.allFinite()) throw NumericalError("forward produced non-finite probabilities");
  const auto n = static_cast<Eigen::Index>(batch.size());
  const double inv_n = 1.0 / static_cast<double>(n);
  Matrix seed = p * inv_n;
  LossResult res;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = batch.labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= model.num_classes()) throw ConfigError("label outside class range");
    double py = p(i, y);
    if (py < kProbabilityFloor) {
      // The clamp is flat, so this sample contributes no gradient.
      py = kProbabilityFloor;
      numerics_counters().probability_floor_hits.fetch_add(1, std::memory_order_relaxed);
      seed.row(i).setZero();
    } else {
      seed(i, y) -= inv_n;
    }
    res.loss -= std::log(py);
    Eigen::Index best = 0;
    p.row(i).maxCoeff(&best);
    if (best == y) ++res.correct;
  }
  res.loss *= inv_n;
  if (param_grad.empty() && !input_grad) return res;
  Tensor g = model.backward(tape, to_logit_tensor<double>(seed), param_grad, input_grad != nullptr);
  if (input_grad) *input_grad = std::move(g);
  return res;
}

Tensor input_gradient(const Classifier& model, const LabeledBatch& batch) {
  Tensor g;
  task_loss_and_grad(model, batch, {}, &g);
  return g;
}

Tensor output_gradient(const Classifier& model, const Tensor& inputs, std::span<const int> classes) {
  Tape<double> tape;
  model.forward(inputs, tape);
  const Matrix p = softmax(logits_of(tape));
  std::vector<int> cls(classes.begin(), classes.end());
  if (cls.empty()) cls = argmax_rows(p);
  if (cls.size() != inputs.batch()) throw ConfigError("output_gradient: one class per sample required");
  Matrix seed(p.rows(), p.cols());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const int c = cls[static_cast<std::size_t>(i)];
    // d p_c / d z_j = p_c (1[j=c] - p_j)
    for (Eigen::Index j = 0; j < p.cols(); ++j) seed(i, j) = p(i, c) * ((j == c ? 1.0 : 0.0) - p(i, j));
  }
  return model.backward(tape, to_logit_tensor<double>(seed), std::span<double>{}, true);
}

// ----------------------------------------------------------------- training

Optimizer::Optimizer(OptimizerConfig cfg, std::size_t num_params)
    : cfg_(std::move(cfg)), m_(num_params, 0.0), v_(num_params, 0.0) {
  if (cfg_.kind != "adam" && cfg_.kind != "sgd") throw ConfigError("unknown optimizer '" + cfg_.kind + "'");
  if (!(cfg_.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (cfg_.batch_size == 0) throw ConfigError("batch size must be positive");
}

void Optimizer::step(std::vector<double>& params, const std::vector<double>& grad) {
  ++t_;
  const std::size_t n = params.size();
  if (cfg_.kind == "sgd") {
    for (std::size_t i = 0; i < n; ++i) {
      const double g = grad[i] + cfg_.weight_decay * params[i];
      m_[i] = cfg_.momentum * m_[i] + g;
      params[i] -= cfg_.learning_rate * m_[i];
    }
    return;
  }
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grad[i] + cfg_.weight_decay * params[i];
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g * g;
    params[i] -= cfg_.learning_rate * (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + cfg_.epsilon);
  }
}

LossFn plain_task_loss() {
  return [](const Classifier& model, const LabeledBatch& batch, std::mt19937_64&, std::vector<double>& grad) {
    return task_loss_and_grad(model, batch, grad);
  };
}

TrainingStats train_epochs(Classifier& model, const LabeledBatch& data, const LossFn& loss_fn,
                           const OptimizerConfig& opt_cfg, int epochs, std::uint64_t seed,
                           const EpochCallback& on_epoch, std::optional<double> stop_at_accuracy) {
  if (epochs < 1) throw ConfigError("train_epochs: epochs must be >= 1");
  if (data.empty()) throw ConfigError("train_epochs: empty training set");
  data.validate(model.num_classes());
  model.check_input(data.inputs);

  Optimizer opt(opt_cfg, model.num_parameters());
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(data.size());
  std::vector<double> grad(model.num_parameters());
  TrainingStats stats;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += opt_cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + opt_cfg.batch_size);
      const LabeledBatch batch =
          data.subset(std::span<const std::size_t>(order).subspan(start, stop - start));
      std::fill(grad.begin(), grad.end(), 0.0);
      const LossResult r = loss_fn(model, batch, rng, grad);
      if (!std::isfinite(r.loss)) {
        throw DivergenceError("loss became non-finite in epoch " + std::to_string(epoch), epoch);
      }
      opt.step(model.parameters(), grad);
      if (!model.parameters_finite()) {
        throw DivergenceError("parameters became non-finite in epoch " + std::to_string(epoch), epoch);
      }
      loss_sum += r.loss * static_cast<double>(batch.size());
      correct += r.correct;
    }
    const double n = static_cast<double>(data.size());
    stats.loss.push_back(loss_sum / n);
    stats.accuracy.push_back(static_cast<double>(correct) / n);
    if (on_epoch) on_epoch(epoch, model, stats.loss.back(), stats.accuracy.back());
    if (stop_at_accuracy && stats.accuracy.back() >= *stop_at_accuracy) break;
  }
  return stats;
}

}  // namespace limeguard
