#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "limeguard/detail/layers.hpp"
#include "limeguard/dual.hpp"
#include "limeguard/tensor.hpp"

namespace limeguard {

/// Anything that maps a batch of inputs to class probabilities. Explanations
/// and clean-accuracy evaluation only need this much.
class ProbabilisticModel {
 public:
  virtual ~ProbabilisticModel() = default;
  virtual Matrix predict_proba(const Tensor& inputs) const = 0;
  virtual int num_classes() const = 0;
  virtual InputShape input_shape() const = 0;
};

enum class Architecture { small_cnn, resnet18_class, linear };

std::string to_string(Architecture a);
Architecture parse_architecture(const std::string& s);

struct ModelSpec {
  Architecture architecture = Architecture::small_cnn;
  int num_classes = 10;
  InputShape input_shape{3, 32, 32};
  // Base channel width of the residual network; ignored by the other architectures.
  std::size_t resnet_width = 64;

  bool operator==(const ModelSpec&) const = default;
};

/// Saved activations of one forward pass, reusable by several backward passes.
template <class T>
struct Tape {
  std::vector<detail::LayerCache<T>> caches;
  BasicTensor<T> logits;  // shape (n, k, 1, 1)
};

/// Feed-forward classifier with softmax output.
///
/// Forward and gradient evaluation never mutate the object, so a frozen model
/// can be shared between threads. Parameters live in one flat vector.
class Classifier : public ProbabilisticModel {
 public:
  Classifier(ModelSpec spec, std::uint64_t seed);

  const ModelSpec& spec() const { return spec_; }
  int num_classes() const override { return spec_.num_classes; }
  InputShape input_shape() const override { return spec_.input_shape; }

  std::vector<double>& parameters() { return params_; }
  const std::vector<double>& parameters() const { return params_; }
  std::size_t num_parameters() const { return params_.size(); }
  bool parameters_finite() const;

  // Every shipped layer propagates Dual tangents, so mixed second derivatives
  // (input direction, parameters) are available.
  bool supports_second_order() const { return true; }

  Matrix logits(const Tensor& inputs) const;
  Matrix predict_proba(const Tensor& inputs) const override;
  std::vector<int> predict(const Tensor& inputs) const;

  // Differentiation primitives. backward() accumulates into param_grad when
  // it is non-empty and returns the gradient with respect to the input when
  // need_input_grad is set.
  template <class T>
  void forward(const BasicTensor<T>& inputs, Tape<T>& tape) const;
  template <class T>
  BasicTensor<T> backward(const Tape<T>& tape, const BasicTensor<T>& grad_logits, std::span<T> param_grad,
                          bool need_input_grad) const;

  void check_input(const Tensor& inputs) const;

 private:
  ModelSpec spec_;
  std::vector<detail::LayerPtr> layers_;
  std::vector<std::size_t> offsets_;
  std::vector<double> params_;
};

/// Counts probability-floor clamps inside the cross-entropy.
struct NumericsCounters {
  std::atomic<std::uint64_t> probability_floor_hits{0};
};
NumericsCounters& numerics_counters();

inline constexpr double kProbabilityFloor = 1e-12;

Matrix softmax(const Matrix& logits);

/// Row-stochastic probability matrix (n, k). Throws ConfigError on shape
/// mismatch and NumericalError on non-finite output.
Matrix forward(const Classifier& model, const LabeledBatch& batch);

/// Mean cross-entropy -(1/n) sum log max(p_y, 1e-12).
double task_loss(const Classifier& model, const LabeledBatch& batch);

/// d task_loss / d input, same shape as batch.inputs.
Tensor input_gradient(const Classifier& model, const LabeledBatch& batch);

/// d p_c / d input for the per-sample class c (the argmax class when
/// classes is empty).
Tensor output_gradient(const Classifier& model, const Tensor& inputs, std::span<const int> classes = {});

struct LossResult {
  double loss = 0.0;
  std::size_t correct = 0;  // clean-input argmax hits, for training accuracy
};

/// Cross-entropy with gradient with respect to parameters (accumulated into
/// param_grad when non-empty) and, optionally, inputs.
LossResult task_loss_and_grad(const Classifier& model, const LabeledBatch& batch, std::span<double> param_grad,
                              Tensor* input_grad = nullptr);

// ----------------------------------------------------------------- training

struct OptimizerConfig {
  std::string kind = "adam";  // "adam" | "sgd"
  double learning_rate = 1e-3;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t batch_size = 64;

  bool operator==(const OptimizerConfig&) const = default;
};

class Optimizer {
 public:
  Optimizer(OptimizerConfig cfg, std::size_t num_params);
  void step(std::vector<double>& params, const std::vector<double>& grad);

 private:
  OptimizerConfig cfg_;
  std::vector<double> m_;
  std::vector<double> v_;
  std::uint64_t t_ = 0;
};

/// Fills grad (pre-zeroed, length = num params) and returns the batch loss.
using LossFn = std::function<LossResult(const Classifier&, const LabeledBatch&, std::mt19937_64&,
                                        std::vector<double>& grad)>;

LossFn plain_task_loss();

struct TrainingStats {
  std::vector<double> loss;      // mean batch loss per epoch
  std::vector<double> accuracy;  // clean training accuracy per epoch
};

using EpochCallback = std::function<void(int epoch, const Classifier&, double loss, double accuracy)>;

/// Mini-batch training with a per-epoch shuffle drawn from seed. Same seed,
/// config and data give a bit-identical parameter trajectory. Stops after the
/// first epoch whose training accuracy reaches stop_at_accuracy, when set.
TrainingStats train_epochs(Classifier& model, const LabeledBatch& data, const LossFn& loss_fn,
                           const OptimizerConfig& opt, int epochs, std::uint64_t seed,
                           const EpochCallback& on_epoch = {},
                           std::optional<double> stop_at_accuracy = std::nullopt);

}  // namespace limeguard
