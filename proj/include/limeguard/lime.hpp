#pragma once

// Local surrogate explanations: segment an input into interpretable
// features, sample masked perturbations around it, weight them by proximity
// and fit a weighted ridge linear model whose coefficients score each
// feature.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "limeguard/model.hpp"
#include "limeguard/tensor.hpp"

namespace limeguard {

enum class SegmentationMode { grid, superpixel, tabular };
enum class BaselinePolicy { zero, mean_fill };

std::string to_string(SegmentationMode m);
SegmentationMode parse_segmentation_mode(const std::string& s);
std::string to_string(BaselinePolicy p);
BaselinePolicy parse_baseline_policy(const std::string& s);

struct SegmentationConfig {
  SegmentationMode mode = SegmentationMode::grid;
  std::size_t cell_h = 8;  // grid cell size in pixels
  std::size_t cell_w = 8;
  std::size_t superpixels = 16;  // target count for superpixel mode
  double compactness = 0.5;  // spatial weight relative to colour distance in [0,1]
  int iterations = 10;
  std::size_t d_min = 1;
  std::size_t d_max = 4096;

  bool operator==(const SegmentationConfig&) const = default;
};

/// Position-aligned feature template shared by every image of a dataset.
struct GridTemplate {
  std::size_t rows = 0;  // number of cells vertically
  std::size_t cols = 0;
  std::size_t cell_h = 0;
  std::size_t cell_w = 0;

  std::size_t size() const { return rows * cols; }
  bool operator==(const GridTemplate&) const = default;
};

struct Segmentation {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<int> labels;  // row-major, one id per pixel position
  std::size_t num_segments = 0;
  std::optional<GridTemplate> grid;  // set for grid and tabular layouts
  bool fell_back_to_grid = false;

  int at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
  std::vector<std::size_t> pixel_counts() const;
  bool operator==(const Segmentation&) const = default;
};

GridTemplate make_grid_template(std::size_t height, std::size_t width, std::size_t cell_h, std::size_t cell_w);
Segmentation grid_segmentation(const GridTemplate& g, std::size_t height, std::size_t width);

/// Segments a single image (batch of one). Deterministic for a fixed config;
/// constant images and superpixel results outside [d_min, d_max] fall back
/// to the regular grid.
Segmentation segment_input(const Tensor& image, const SegmentationConfig& cfg);

struct PerturbationSet {
  std::size_t num_samples = 0;
  std::size_t num_features = 0;
  std::vector<std::uint8_t> masks;  // row-major (num_samples, num_features); row 0 is all ones
  Vector outputs;                   // f_c(z_i) for the explained class c
  Vector weights;                   // kernel weights in (0, 1]
  int explained_class = 0;
  std::uint64_t seed = 0;

  std::uint8_t mask(std::size_t i, std::size_t j) const { return masks[i * num_features + j]; }
};

/// exp(-||x - z||^2 / sigma^2) in raw input space.
double kernel_weight(const Tensor& x, const Tensor& z, double sigma);

/// Replaces masked-off segments of x with the baseline value.
Tensor apply_segment_mask(const Tensor& x, const Segmentation& seg, std::span<const std::uint8_t> mask,
                          BaselinePolicy policy);

/// Default kernel width 0.25 * sqrt(number of input elements).
double default_sigma(const InputShape& shape);

/// Draws num_samples Bernoulli(0.5) segment masks (row 0 forced to all ones)
/// and records the model's output for its top class on x.
PerturbationSet sample_perturbations(const Tensor& x, const Segmentation& seg, const ProbabilisticModel& model,
                                     std::size_t num_samples, std::uint64_t seed, BaselinePolicy policy,
                                     double sigma);

struct ExplanationSettings {
  std::size_t num_samples = 0;
  double sigma = 0.0;
  double ridge = 0.0;
  BaselinePolicy baseline = BaselinePolicy::zero;
  std::uint64_t seed = 0;
  bool ridge_retry = false;  // singular system solved again with ridge 1e-6

  bool operator==(const ExplanationSettings&) const = default;
};

struct FeatureExplanation {
  double intercept = 0.0;
  Vector coefficients;
  Segmentation segmentation;
  int explained_class = 0;
  double surrogate_loss = 0.0;  // sum_i w_i (f(z_i) - g(z_i))^2, penalty excluded
  ExplanationSettings settings;

  std::vector<double> importance() const;
};

/// Weighted ridge fit of g(z) = b0 + sum_j b_j z_j; the intercept is not
/// penalised.
FeatureExplanation fit_surrogate(const PerturbationSet& set, double ridge);

struct LimeConfig {
  SegmentationConfig segmentation;
  std::size_t num_samples = 1000;
  double sigma = 0.0;  // <= 0 selects default_sigma
  double ridge = 1e-4;
  BaselinePolicy baseline = BaselinePolicy::zero;
  std::uint64_t seed = 0;

  bool operator==(const LimeConfig&) const = default;
};

FeatureExplanation explain(const ProbabilisticModel& model, const Tensor& x, const LimeConfig& cfg);

/// Explanations over independent perturbation draws (seeds cfg.seed,
/// cfg.seed+1, ...) sharing one segmentation.
std::vector<FeatureExplanation> explain_redraws(const ProbabilisticModel& model, const Tensor& x,
                                                const LimeConfig& cfg, std::size_t draws);

/// Per-pixel |b_seg(p)|, shape (height, width).
Matrix importance_heatmap(const FeatureExplanation& expl);

nlohmann::json to_json(const FeatureExplanation& expl);
FeatureExplanation explanation_from_json(const nlohmann::json& j);

}  // namespace limeguard
