#include <gtest/gtest.h>

#include <Eigen/LU>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>

#include "limeguard/lime.hpp"
#include "test_util.hpp"

using namespace limeguard;

namespace {

// Wraps a per-sample function into a ProbabilisticModel.
class FunctionModel : public ProbabilisticModel {
 public:
  using Fn = std::function<std::vector<double>(std::span<const double>)>;
  FunctionModel(InputShape shape, int k, Fn fn) : shape_(shape), k_(k), fn_(std::move(fn)) {}

  Matrix predict_proba(const Tensor& inputs) const override {
    Matrix p(static_cast<Eigen::Index>(inputs.batch()), k_);
    for (std::size_t i = 0; i < inputs.batch(); ++i) {
      const auto row = fn_(inputs.sample(i));
      for (int c = 0; c < k_; ++c) p(static_cast<Eigen::Index>(i), c) = row[static_cast<std::size_t>(c)];
    }
    return p;
  }
  int num_classes() const override { return k_; }
  InputShape input_shape() const override { return shape_; }

 private:
  InputShape shape_;
  int k_;
  Fn fn_;
};

Tensor filled(InputShape s, double v) {
  Tensor t(1, s);
  std::fill(t.storage().begin(), t.storage().end(), v);
  return t;
}

Tensor noise_image(InputShape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor t(1, s);
  for (auto& v : t.storage()) v = u(rng);
  return t;
}

PerturbationSet random_set(std::size_t n, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  PerturbationSet p;
  p.num_samples = n;
  p.num_features = d;
  p.masks.resize(n * d);
  for (auto& m : p.masks) m = coin(rng) ? 1 : 0;
  p.outputs.resize(static_cast<Eigen::Index>(n));
  p.weights.resize(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    p.outputs[static_cast<Eigen::Index>(i)] = u(rng);
    p.weights[static_cast<Eigen::Index>(i)] = u(rng);
  }
  return p;
}

double ridge_objective(const PerturbationSet& p, double b0, const Vector& b, double ridge) {
  double loss = 0.0;
  for (std::size_t i = 0; i < p.num_samples; ++i) {
    double g = b0;
    for (std::size_t j = 0; j < p.num_features; ++j) g += b[static_cast<Eigen::Index>(j)] * p.mask(i, j);
    const double r = p.outputs[static_cast<Eigen::Index>(i)] - g;
    loss += p.weights[static_cast<Eigen::Index>(i)] * r * r;
  }
  return loss + ridge * b.squaredNorm();
}

const InputShape kImage{3, 32, 32};

}  // namespace

TEST(Segmentation, GridOn32x32With8x8CellsHas16SegmentsOf64Pixels) {
  SegmentationConfig cfg;
  const Segmentation seg = segment_input(noise_image(kImage, 1), cfg);
  EXPECT_EQ(seg.num_segments, 16u);
  for (auto c : seg.pixel_counts()) EXPECT_EQ(c, 64u);
  ASSERT_TRUE(seg.grid.has_value());
  EXPECT_EQ(seg.at(0, 8), 1);
  EXPECT_EQ(seg.at(8, 0), 4);
}

TEST(Segmentation, ConstantImageFallsBackToGrid) {
  SegmentationConfig cfg;
  cfg.mode = SegmentationMode::superpixel;
  const Segmentation seg = segment_input(filled(kImage, 0.4), cfg);
  EXPECT_TRUE(seg.fell_back_to_grid);
  EXPECT_EQ(seg.num_segments, 16u);
}

TEST(Segmentation, SuperpixelLabelsAreContiguousAndDeterministic) {
  SegmentationConfig cfg;
  cfg.mode = SegmentationMode::superpixel;
  // Two flat halves plus noise: superpixels should not straddle the edge.
  Tensor img = noise_image(kImage, 3);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x) img.at(0, c, y, x) = 0.1 * img.at(0, c, y, x) + (x < 16 ? 0.0 : 0.8);
  const Segmentation a = segment_input(img, cfg);
  const Segmentation b = segment_input(img, cfg);
  EXPECT_EQ(a, b);
  ASSERT_GE(a.num_segments, 2u);
  std::vector<bool> seen(a.num_segments, false);
  for (int l : a.labels) {
    ASSERT_GE(l, 0);
    ASSERT_LT(l, static_cast<int>(a.num_segments));
    seen[static_cast<std::size_t>(l)] = true;
  }
  EXPECT_TRUE(std::all_of(seen.begin(), seen.end(), [](bool s) { return s; }));
  for (std::size_t y = 0; y < 32; ++y) EXPECT_NE(a.at(y, 15), a.at(y, 16));
}

TEST(Segmentation, TabularUsesOneFeaturePerCoordinate) {
  SegmentationConfig cfg;
  cfg.mode = SegmentationMode::tabular;
  const Segmentation seg = segment_input(noise_image({1, 1, 5}, 2), cfg);
  EXPECT_EQ(seg.num_segments, 5u);
}

TEST(Kernel, ClosedFormValues) {
  const Tensor x = noise_image(kImage, 4);
  EXPECT_EQ(kernel_weight(x, x, 2.0), 1.0);
  Tensor z = x;
  z[0] += 3.0;
  z[1] += 4.0;  // distance 5
  EXPECT_NEAR(kernel_weight(x, z, 5.0), 0.367879441171, 1e-10);
  EXPECT_THROW(kernel_weight(x, z, 0.0), ConfigError);
  EXPECT_THROW(kernel_weight(x, z, -1.0), ConfigError);
}

TEST(Kernel, MatchesScalarLoopOracle) {
  const Tensor x = noise_image(kImage, 5), z = noise_image(kImage, 6);
  long double acc = 0.0L;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t xx = 0; xx < 32; ++xx) {
        const long double diff = x.at(0, c, y, xx) - z.at(0, c, y, xx);
        acc += diff * diff;
      }
  const double sigma = default_sigma(kImage);
  EXPECT_NEAR(kernel_weight(x, z, sigma), std::exp(-static_cast<double>(acc) / (sigma * sigma)), 1e-10);
}

TEST(Perturbations, IdentityRowAndBaselineRow) {
  const Tensor x = noise_image(kImage, 7);
  const Segmentation seg = segment_input(x, {});
  std::vector<std::uint8_t> ones(16, 1), zeros(16, 0);
  EXPECT_EQ(apply_segment_mask(x, seg, ones, BaselinePolicy::zero).storage(), x.storage());
  const Tensor z = apply_segment_mask(x, seg, zeros, BaselinePolicy::zero);
  EXPECT_TRUE(std::all_of(z.storage().begin(), z.storage().end(), [](double v) { return v == 0.0; }));
  const Tensor m = apply_segment_mask(x, seg, zeros, BaselinePolicy::mean_fill);
  double mean0 = 0.0;
  for (std::size_t p = 0; p < 1024; ++p) mean0 += x[p];
  EXPECT_NEAR(m[5], mean0 / 1024.0, 1e-12);
}

TEST(Perturbations, RowZeroIsIdentityWithUnitWeightAndMasksReproduce) {
  const Tensor x = noise_image(kImage, 8);
  const Segmentation seg = segment_input(x, {});
  FunctionModel model(kImage, 2, [](std::span<const double> s) {
    const double m = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
    return std::vector<double>{m, 1.0 - m};
  });
  const auto a = sample_perturbations(x, seg, model, 100, 42, BaselinePolicy::zero, default_sigma(kImage));
  const auto b = sample_perturbations(x, seg, model, 100, 42, BaselinePolicy::zero, default_sigma(kImage));
  EXPECT_EQ(a.masks, b.masks);
  for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(a.mask(0, j), 1);
  EXPECT_EQ(a.weights[0], 1.0);
  const Matrix p = model.predict_proba(x);
  EXPECT_EQ(a.outputs[0], p(0, a.explained_class));
  for (Eigen::Index i = 0; i < a.weights.size(); ++i) {
    EXPECT_GT(a.weights[i], 0.0);
    EXPECT_LE(a.weights[i], 1.0);
  }
  EXPECT_THROW(sample_perturbations(x, seg, model, 17, 1, BaselinePolicy::zero, 1.0), ConfigError);
}

TEST(Perturbations, NonFiniteModelOutputCarriesSampleIndex) {
  const Tensor x = filled(kImage, 0.5);
  const Segmentation seg = segment_input(x, {});
  FunctionModel model(kImage, 2, [](std::span<const double> s) {
    const bool intact = std::all_of(s.begin(), s.end(), [](double v) { return v > 0.0; });
    return intact ? std::vector<double>{0.9, 0.1} : std::vector<double>{NAN, NAN};
  });
  try {
    sample_perturbations(x, seg, model, 50, 3, BaselinePolicy::zero, 1.0);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_GE(e.sample_index(), 1);
  }
}

TEST(Surrogate, RecoversPlantedLinearFunction) {
  PerturbationSet p = random_set(200, 12, 9);
  std::mt19937_64 rng(10);
  std::normal_distribution<double> g;
  const double c0 = 0.3;
  Vector c(12);
  for (auto& v : c) v = g(rng);
  for (std::size_t i = 0; i < p.num_samples; ++i) {
    double f = c0;
    for (std::size_t j = 0; j < 12; ++j) f += c[static_cast<Eigen::Index>(j)] * p.mask(i, j);
    p.outputs[static_cast<Eigen::Index>(i)] = f;
  }
  const auto e = fit_surrogate(p, 0.0);
  EXPECT_NEAR(e.intercept, c0, 1e-6);
  for (Eigen::Index j = 0; j < 12; ++j) EXPECT_NEAR(e.coefficients[j], c[j], 1e-6);
  EXPECT_NEAR(e.surrogate_loss, 0.0, 1e-12);
  EXPECT_FALSE(e.settings.ridge_retry);
}

TEST(Surrogate, MatchesGramMatrixOracleAtMinimalSampleCount) {
  const std::size_t d = 8, n = d + 2;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    PerturbationSet p = random_set(n, d, 100 + seed);
    p.weights.setOnes();
    Matrix x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d + 1));
    for (std::size_t i = 0; i < n; ++i) {
      x(static_cast<Eigen::Index>(i), 0) = 1.0;
      for (std::size_t j = 0; j < d; ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j + 1)) = p.mask(i, j);
    }
    const Matrix gram = x.transpose() * x;
    Eigen::FullPivLU<Matrix> lu(gram);
    if (lu.rank() < static_cast<Eigen::Index>(d + 1)) continue;  // oracle needs full rank
    const Vector beta = lu.solve(Vector(x.transpose() * p.outputs));
    const auto e = fit_surrogate(p, 0.0);
    EXPECT_NEAR(e.intercept, beta[0], 1e-8);
    for (std::size_t j = 0; j < d; ++j) {
      EXPECT_NEAR(e.coefficients[static_cast<Eigen::Index>(j)], beta[static_cast<Eigen::Index>(j + 1)], 1e-8);
    }
  }
}

TEST(Surrogate, ConstantOutputsGiveZeroCoefficients) {
  PerturbationSet p = random_set(60, 10, 11);
  p.outputs.setConstant(0.42);
  const auto e = fit_surrogate(p, 0.0);
  EXPECT_NEAR(e.intercept, 0.42, 1e-10);
  EXPECT_LT(e.coefficients.cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Surrogate, SingularSystemRetriesWithSmallRidge) {
  PerturbationSet p = random_set(40, 6, 12);
  for (std::size_t i = 0; i < p.num_samples; ++i) p.masks[i * 6 + 5] = p.masks[i * 6 + 4];  // duplicate column
  const auto e = fit_surrogate(p, 0.0);
  EXPECT_TRUE(e.settings.ridge_retry);
  EXPECT_EQ(e.settings.ridge, 1e-6);
  EXPECT_TRUE(e.coefficients.allFinite());
}

TEST(Surrogate, CoordinateStepsNeverDecreaseRidgeObjective) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const double ridge = seed % 2 ? 1e-4 : 0.5;
    const PerturbationSet p = random_set(80, 10, 200 + seed);
    const auto e = fit_surrogate(p, ridge);
    const double base = ridge_objective(p, e.intercept, e.coefficients, ridge);
    for (Eigen::Index j = -1; j < 10; ++j) {
      for (double step : {1e-3, -1e-3}) {
        double b0 = e.intercept;
        Vector b = e.coefficients;
        (j < 0 ? b0 : b[j]) += step;
        EXPECT_GE(ridge_objective(p, b0, b, ridge), base - 1e-12) << "seed " << seed << " coord " << j;
      }
    }
  }
}

TEST(Surrogate, RelabelingSegmentsPermutesCoefficients) {
  const PerturbationSet p = random_set(90, 9, 13);
  std::vector<std::size_t> perm(9);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(14));
  PerturbationSet q = p;
  for (std::size_t i = 0; i < p.num_samples; ++i)
    for (std::size_t j = 0; j < 9; ++j) q.masks[i * 9 + perm[j]] = p.mask(i, j);
  const auto a = fit_surrogate(p, 1e-4), b = fit_surrogate(q, 1e-4);
  for (std::size_t j = 0; j < 9; ++j) {
    EXPECT_NEAR(b.coefficients[static_cast<Eigen::Index>(perm[j])], a.coefficients[static_cast<Eigen::Index>(j)], 1e-10);
  }
}

TEST(Explain, ModelIgnoringInputHasZeroImportance) {
  FunctionModel model(kImage, 3, [](std::span<const double>) { return std::vector<double>{0.2, 0.5, 0.3}; });
  LimeConfig cfg;
  cfg.num_samples = 200;
  const auto e = explain(model, noise_image(kImage, 15), cfg);
  EXPECT_EQ(e.explained_class, 1);
  for (double v : e.importance()) EXPECT_LT(v, 1e-6);
}

TEST(Explain, PlantedSegmentThreeModelRanksSegmentThreeFirst) {
  // Logit +1 on class 1 whenever segment 3 (cell row 0, col 3) is intact.
  FunctionModel model(kImage, 2, [](std::span<const double> s) {
    const bool present = s[0 * 32 + 24] != 0.0;
    const double p1 = 1.0 / (1.0 + std::exp(-(present ? 1.0 : 0.0)));
    return std::vector<double>{1.0 - p1, p1};
  });
  LimeConfig cfg;
  cfg.num_samples = 300;
  cfg.ridge = 0.0;
  const auto e = explain(model, filled(kImage, 0.5), cfg);
  const auto imp = e.importance();
  EXPECT_EQ(std::max_element(imp.begin(), imp.end()) - imp.begin(), 3);
  EXPECT_NEAR(e.coefficients[3], 1.0 / (1.0 + std::exp(-1.0)) - 0.5, 1e-9);

  const Matrix heat = importance_heatmap(e);
  EXPECT_NEAR(heat.maxCoeff(), *std::max_element(imp.begin(), imp.end()), 1e-12);
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x) {
      const bool in3 = y < 8 && x >= 24;
      EXPECT_EQ(heat(static_cast<Eigen::Index>(y), static_cast<Eigen::Index>(x)) > 1e-9, in3);
    }
}

TEST(Explain, SameSeedGivesIdenticalExplanation) {
  auto model = test::random_batch(kImage, 1, 2, 1);  // only used for the input
  Classifier net({Architecture::linear, 3, kImage}, 5);
  LimeConfig cfg;
  cfg.num_samples = 100;
  const auto a = explain(net, model.inputs, cfg), b = explain(net, model.inputs, cfg);
  EXPECT_EQ(a.coefficients, b.coefficients);
  EXPECT_EQ(a.intercept, b.intercept);
  EXPECT_EQ(a.segmentation, b.segmentation);
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  cfg.seed = 1;
  EXPECT_NE(explain(net, model.inputs, cfg).coefficients, a.coefficients);
}

TEST(Explain, ErrorsCarryStageLabel) {
  Classifier net({Architecture::linear, 2, kImage}, 5);
  LimeConfig cfg;
  cfg.num_samples = 10;  // below d + 2
  try {
    explain(net, noise_image(kImage, 1), cfg);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("explain/sample"), std::string::npos);
  }
}

TEST(Heatmap, SumMatchesPerSegmentCountOracle) {
  SegmentationConfig sc;
  sc.mode = SegmentationMode::superpixel;
  const Tensor img = noise_image(kImage, 16);
  FeatureExplanation e;
  e.segmentation = segment_input(img, sc);
  e.coefficients = Vector::Random(static_cast<Eigen::Index>(e.segmentation.num_segments));
  const auto counts = e.segmentation.pixel_counts();
  double oracle = 0.0;
  for (std::size_t j = 0; j < counts.size(); ++j) oracle += std::abs(e.coefficients[static_cast<Eigen::Index>(j)]) * static_cast<double>(counts[j]);
  EXPECT_NEAR(importance_heatmap(e).sum(), oracle, 1e-6);

  e.coefficients.setZero();
  EXPECT_EQ(importance_heatmap(e).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Json, RoundTripPreservesExplanation) {
  Classifier net({Architecture::linear, 3, kImage}, 2);
  LimeConfig cfg;
  cfg.num_samples = 60;
  cfg.baseline = BaselinePolicy::mean_fill;
  const auto e = explain(net, noise_image(kImage, 17), cfg);
  const auto back = explanation_from_json(nlohmann::json::parse(to_json(e).dump()));
  EXPECT_EQ(back.segmentation, e.segmentation);
  EXPECT_EQ(back.coefficients, e.coefficients);
  EXPECT_EQ(back.intercept, e.intercept);
  EXPECT_EQ(back.settings, e.settings);
  EXPECT_EQ(back.explained_class, e.explained_class);
}
