#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "limeguard/data.hpp"
#include "limeguard/refinement.hpp"
#include "test_util.hpp"

using namespace limeguard;

namespace {

const InputShape kShape{2, 8, 8};

SpuriousFeatureSet grid_set(std::vector<std::size_t> ids, std::size_t cell = 4) {
  SpuriousFeatureSet s;
  s.grid = make_grid_template(kShape.height, kShape.width, cell, cell);
  for (auto id : ids) s.flagged.push_back({id, 1, 1, 0, 1});
  return s;
}

Classifier jittered_cnn(std::uint64_t seed) {
  Classifier m({Architecture::small_cnn, 3, kShape}, seed);
  std::mt19937_64 rng(seed + 100);
  std::normal_distribution<double> nd(0.0, 0.05);
  for (double& p : m.parameters()) p += nd(rng);
  return m;
}

RefinementConfig bare_config() {
  RefinementConfig c;
  c.lambda = 0.0;
  c.alpha_adv = 0.0;
  c.masking = MaskingMode::off;
  return c;
}

// Central-difference check of an analytic parameter gradient on a sample of
// coordinates; returns the fraction within the relative tolerance.
double param_fd_agreement(Classifier& m, const std::function<double(const Classifier&)>& f,
                          const std::vector<double>& analytic, std::size_t samples, double tol) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<std::size_t> pick(0, m.num_parameters() - 1);
  const double h = 1e-5;
  std::size_t ok = 0;
  for (std::size_t s = 0; s < samples; ++s) {
    const std::size_t q = pick(rng);
    const double keep = m.parameters()[q];
    m.parameters()[q] = keep + h;
    const double fp = f(m);
    m.parameters()[q] = keep - h;
    const double fm = f(m);
    m.parameters()[q] = keep;
    const double fd = (fp - fm) / (2 * h);
    const double rel = std::abs(fd - analytic[q]) / std::max({std::abs(fd), std::abs(analytic[q]), 1e-7});
    if (rel < tol) ++ok;
  }
  return static_cast<double>(ok) / static_cast<double>(samples);
}

}  // namespace

TEST(Masking, EmptySetIsIdentityAndFullZeroFillZeroes) {
  const auto b = test::random_batch(kShape, 3, 3, 1);
  EXPECT_EQ(apply_mask(b.inputs, grid_set({}), MaskingMode::zero_fill).storage(), b.inputs.storage());
  const Tensor z = apply_mask(b.inputs, grid_set({0, 1, 2, 3}), MaskingMode::zero_fill);
  EXPECT_TRUE(std::all_of(z.storage().begin(), z.storage().end(), [](double v) { return v == 0.0; }));
}

TEST(Masking, IdempotentAndNeverTouchesUnflaggedPixels) {
  const auto b = test::random_batch(kShape, 4, 3, 2);
  const auto set = grid_set({1, 2});
  const auto means = channel_means(b.inputs);
  for (auto mode : {MaskingMode::zero_fill, MaskingMode::mean_fill}) {
    const Tensor once = apply_mask(b.inputs, set, mode, means);
    EXPECT_EQ(apply_mask(once, set, mode, means).storage(), once.storage());
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t y = 0; y < 8; ++y)
          for (std::size_t x = 0; x < 8; ++x) {
            const std::size_t cell = (y / 4) * 2 + x / 4;
            if (cell == 1 || cell == 2) {
              EXPECT_EQ(once.at(i, c, y, x), mode == MaskingMode::zero_fill ? 0.0 : means[c]);
            } else {
              EXPECT_EQ(once.at(i, c, y, x), b.inputs.at(i, c, y, x));
            }
          }
  }
}

TEST(Masking, TemplateMismatchIsRejected) {
  const auto b = test::random_batch(kShape, 1, 3, 3);
  SpuriousFeatureSet s;
  s.grid = make_grid_template(16, 16, 4, 4);
  s.flagged.push_back({0, 1, 0, 0, 1});
  EXPECT_THROW(apply_mask(b.inputs, s, MaskingMode::zero_fill), ConfigError);
  EXPECT_THROW(apply_mask(b.inputs, s, MaskingMode::mean_fill, {0.5}), ConfigError);
}

TEST(Penalty, ConstantModelAndEmptySetGiveZero) {
  Classifier m({Architecture::small_cnn, 3, kShape}, 4);
  const auto b = test::random_batch(kShape, 3, 3, 5);
  const auto e = sensitivity_reg_loss(m, b, grid_set({}));
  EXPECT_EQ(e.value, 0.0);
  EXPECT_TRUE(e.empty_set);
  std::fill(m.parameters().begin(), m.parameters().end(), 0.0);
  EXPECT_EQ(sensitivity_reg_loss(m, b, grid_set({0, 3})).value, 0.0);
}

TEST(Penalty, MatchesScalarLoopOverRawInputGradient) {
  const Classifier m = jittered_cnn(6);
  const auto b = test::random_batch(kShape, 5, 3, 7);
  const std::vector<std::size_t> ids = {0, 3};
  const Tensor g = output_gradient(m, b.inputs);
  double oracle = 0.0, oracle_unsq = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t id : ids) {
      double sq = 0.0;
      for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t y = 0; y < 8; ++y)
          for (std::size_t x = 0; x < 8; ++x)
            if ((y / 4) * 2 + x / 4 == id) sq += g.at(i, c, y, x) * g.at(i, c, y, x);
      oracle += sq / ids.size();
      oracle_unsq += std::sqrt(sq);
    }
  }
  EXPECT_LT(std::abs(sensitivity_reg_loss(m, b, grid_set(ids)).value - oracle / 5), 1e-8);
  const auto px = FeaturePixels::from(grid_set(ids), kShape);
  EXPECT_LT(std::abs(sensitivity_penalty(m, b.inputs, px, PenaltyForm::unsquared).value - oracle_unsq / 5), 1e-8);
  EXPECT_NEAR(mean_spurious_gradient_norm(m, b.inputs, grid_set(ids)), oracle_unsq / 10, 1e-10);
}

TEST(Penalty, ParameterGradientMatchesFiniteDifferences) {
  Classifier m = jittered_cnn(8);
  const auto b = test::random_batch(kShape, 3, 3, 9);
  const auto px = FeaturePixels::from(grid_set({1, 2}), kShape);
  for (auto form : {PenaltyForm::squared, PenaltyForm::unsquared}) {
    std::vector<double> grad(m.num_parameters(), 0.0);
    sensitivity_penalty(m, b.inputs, px, form, 1.0, grad);
    const double frac = param_fd_agreement(
        m, [&](const Classifier& mm) { return sensitivity_penalty(mm, b.inputs, px, form).value; }, grad, 200, 1e-3);
    EXPECT_GE(frac, 0.97) << to_string(form);
  }
}

TEST(CombinedLoss, ZeroWeightsReduceToTaskLossExactly) {
  const Classifier m = jittered_cnn(10);
  const auto b = test::random_batch(kShape, 6, 3, 11);
  const auto br = combined_loss(m, b, bare_config(), grid_set({0}));
  EXPECT_EQ(br.total, task_loss(m, b));
  std::vector<double> g1(m.num_parameters(), 0.0), g2(m.num_parameters(), 0.0);
  combined_loss(m, b, bare_config(), grid_set({0}), g1);
  task_loss_and_grad(m, b, g2);
  EXPECT_EQ(g1, g2);
}

TEST(CombinedLoss, IdentityAttackDoublesTaskTerm) {
  const Classifier m = jittered_cnn(12);
  const auto b = test::random_batch(kShape, 6, 3, 13);
  RefinementConfig c;
  c.alpha_adv = 0.7;
  c.lambda = 2.0;
  c.attack.epsilon = 0.0;
  const auto set = grid_set({2});
  const auto br = combined_loss(m, b, c, set);
  const double reg = sensitivity_reg_loss(m, b, set).value;
  EXPECT_NEAR(br.total, 1.7 * task_loss(m, b) + 2.0 * reg, 1e-7);
}

TEST(CombinedLoss, TotalEqualsHandSummedBreakdown) {
  std::mt19937_64 rng(14);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  const Classifier m = jittered_cnn(15);
  const auto b = test::random_batch(kShape, 4, 3, 16);
  for (int trial = 0; trial < 5; ++trial) {
    RefinementConfig c;
    c.alpha_adv = u(rng);
    c.lambda = u(rng);
    c.attack.epsilon = 0.05 * u(rng);
    c.penalty = trial % 2 ? PenaltyForm::unsquared : PenaltyForm::squared;
    const auto br = combined_loss(m, b, c, grid_set({0, 3}));
    EXPECT_NEAR(br.total, br.task + c.alpha_adv * br.adversarial + c.lambda * br.regularizer, 1e-9);
    EXPECT_EQ(br.task, task_loss(m, b));
  }
}

TEST(CombinedLoss, GradientWithPenaltyMatchesFiniteDifferences) {
  Classifier m = jittered_cnn(17);
  const auto b = test::random_batch(kShape, 3, 3, 18);
  RefinementConfig c = bare_config();
  c.lambda = 3.0;
  const auto set = grid_set({0, 2});
  std::vector<double> grad(m.num_parameters(), 0.0);
  combined_loss(m, b, c, set, grad);
  const double frac =
      param_fd_agreement(m, [&](const Classifier& mm) { return combined_loss(mm, b, c, set).total; }, grad, 200, 1e-3);
  EXPECT_GE(frac, 0.97);
}

TEST(AugmentedLoss, ReductionsAndTermSum) {
  Classifier m = jittered_cnn(19);
  const auto b = test::random_batch(kShape, 4, 3, 20);
  const auto set = grid_set({1, 3});
  EXPECT_EQ(augmented_loss(m, b, set, 0.0).total, task_loss(m, b));

  const Tensor g = output_gradient(m, b.inputs);
  double norms = 0.0;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t id : {1u, 3u}) {
      double sq = 0.0;
      for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t y = 0; y < 8; ++y)
          for (std::size_t x = 0; x < 8; ++x)
            if ((y / 4) * 2 + x / 4 == id) sq += g.at(i, c, y, x) * g.at(i, c, y, x);
      norms += std::sqrt(sq);
    }
  EXPECT_NEAR(augmented_loss(m, b, set, 1.5).total, task_loss(m, b) + 1.5 * norms / 4, 1e-8);

  std::fill(m.parameters().begin(), m.parameters().end(), 0.0);
  EXPECT_EQ(augmented_loss(m, b, set, 5.0).total, task_loss(m, b));
}

TEST(Capability, SecondOrderIsDeclared) {
  const Classifier m({Architecture::resnet18_class, 3, kShape, 2}, 1);
  EXPECT_NO_THROW(require_second_order(m));
}

TEST(Refine, BareSingleIterationIsPlainRetraining) {
  const auto train = test::random_batch(kShape, 40, 3, 21);
  const auto val = test::random_batch(kShape, 12, 3, 22);
  const Classifier m = jittered_cnn(23);
  RefinementConfig c = bare_config();
  c.outer_iterations = 1;
  c.epochs_per_iteration = 2;
  c.detection.lime.segmentation = {SegmentationMode::grid, 4, 4};
  c.detection.lime.num_samples = 20;
  c.detection.redraws = 2;
  c.detection_samples = 4;
  const auto r = refine(m, train, val, c);
  ASSERT_EQ(r.trace.records.size(), 1u);
  Classifier expected = m;
  train_epochs(expected, train, plain_task_loss(), c.optimizer, 2, c.seed + 1);
  EXPECT_EQ(r.model.parameters(), expected.parameters());
}

TEST(Refine, TraceIsBoundedAndBestModelDominatesEarlierProbes) {
  const auto train = test::random_batch(kShape, 30, 3, 24);
  const auto val = test::random_batch(kShape, 10, 3, 25);
  RefinementConfig c;
  c.outer_iterations = 3;
  c.epochs_per_iteration = 1;
  c.convergence.min_gain = -100.0;  // never stop early
  c.detection.lime.segmentation = {SegmentationMode::grid, 4, 4};
  c.detection.lime.num_samples = 20;
  c.detection.redraws = 2;
  c.detection_samples = 4;
  int callbacks = 0;
  const auto r = refine(jittered_cnn(26), train, val, c, [&](const RefinementRecord&, const Classifier&) { ++callbacks; });
  EXPECT_LE(r.trace.records.size(), 3u);
  EXPECT_EQ(callbacks, static_cast<int>(r.trace.records.size()));
  ASSERT_GE(r.trace.best_iteration, 1);
  const double best = r.trace.records[static_cast<std::size_t>(r.trace.best_iteration - 1)].probe_accuracy;
  for (int i = 0; i < r.trace.best_iteration; ++i) EXPECT_GE(best, r.trace.records[static_cast<std::size_t>(i)].probe_accuracy - 1e-9);
  for (const auto& rec : r.trace.records) {
    const auto back = refinement_record_from_json(nlohmann::json::parse(to_json(rec).dump()));
    EXPECT_EQ(back.spurious, rec.spurious);
    EXPECT_EQ(back.probe_accuracy, rec.probe_accuracy);
  }
}

TEST(Refine, InvalidConfigRejected) {
  RefinementConfig c;
  c.outer_iterations = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = RefinementConfig{};
  c.lambda = -1;
  EXPECT_THROW(c.validate(), ConfigError);
}

// Same start, seed and epochs; only lambda differs.
TEST(Refine, PenaltyLowersWatermarkGradientNorm) {
  SyntheticSpuriousSpec spec;
  spec.n_train = 600;
  spec.n_test = 200;
  spec.n_ood = 10;
  spec.signal_strength = 0.1;
  spec.noise = 0.25;
  const SyntheticData data = generate_synthetic_spurious(spec);
  Classifier base({Architecture::small_cnn, 2, spec.image}, 3);
  OptimizerConfig opt;
  train_epochs(base, data.train, plain_task_loss(), opt, 3, 4);

  SpuriousFeatureSet set;
  set.grid = data.grid;
  set.flagged.push_back({data.watermark_cell, 1, 1, 0, 1});
  RefinementConfig c;
  c.alpha_adv = 0.0;
  c.masking = MaskingMode::off;
  auto norm_after = [&](double lambda) {
    c.lambda = lambda;
    Classifier m = base;
    const LossFn fn = [&](const Classifier& mm, const LabeledBatch& b, std::mt19937_64&, std::vector<double>& g) {
      const LossBreakdown br = combined_loss(mm, b, c, set, g);
      return LossResult{br.total, br.correct};
    };
    train_epochs(m, data.train, fn, opt, 1, 5);
    return mean_spurious_gradient_norm(m, data.test.inputs, set);
  };
  const double plain = norm_after(0.0), penalised = norm_after(10.0);
  EXPECT_LT(penalised, 0.8 * plain) << "lambda=0: " << plain << ", lambda=10: " << penalised;
}
