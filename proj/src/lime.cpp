#include "limeguard/lime.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <random>

#include <Eigen/QR>

namespace limeguard {

namespace {

constexpr std::size_t kPerturbationChunk = 250;
constexpr double kRetryRidge = 1e-6;

bool is_constant(const Tensor& image) {
  const auto& s = image.storage();
  return std::all_of(s.begin(), s.end(), [&](double v) { return v == s.front(); });
}

// Relabels ids to 0..d-1 in order of first appearance.
std::size_t compact_ids(std::vector<int>& labels) {
  std::vector<int> remap;
  int next = 0;
  for (int& l : labels) {
    if (l >= static_cast<int>(remap.size())) remap.resize(static_cast<std::size_t>(l) + 1, -1);
    if (remap[static_cast<std::size_t>(l)] < 0) remap[static_cast<std::size_t>(l)] = next++;
    l = remap[static_cast<std::size_t>(l)];
  }
  return static_cast<std::size_t>(next);
}

// Splits disconnected label regions and folds fragments smaller than
// min_size into an adjacent, already-labelled region.
std::vector<int> enforce_connectivity(const std::vector<int>& in, std::size_t h, std::size_t w,
                                      std::size_t min_size) {
  std::vector<int> out(in.size(), -1);
  int next = 0;
  const int dy[4] = {-1, 0, 1, 0};
  const int dx[4] = {0, -1, 0, 1};
  std::vector<std::size_t> comp;
  for (std::size_t start = 0; start < in.size(); ++start) {
    if (out[start] >= 0) continue;
    const auto sy = static_cast<int>(start / w), sx = static_cast<int>(start % w);
    int adjacent = -1;
    for (int k = 0; k < 4; ++k) {
      const int ny = sy + dy[k], nx = sx + dx[k];
      if (ny < 0 || nx < 0 || ny >= static_cast<int>(h) || nx >= static_cast<int>(w)) continue;
      const int l = out[static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx)];
      if (l >= 0) adjacent = l;
    }
    comp.clear();
    std::deque<std::size_t> queue{start};
    out[start] = next;
    while (!queue.empty()) {
      const std::size_t p = queue.front();
      queue.pop_front();
      comp.push_back(p);
      const auto py = static_cast<int>(p / w), px = static_cast<int>(p % w);
      for (int k = 0; k < 4; ++k) {
        const int ny = py + dy[k], nx = px + dx[k];
        if (ny < 0 || nx < 0 || ny >= static_cast<int>(h) || nx >= static_cast<int>(w)) continue;
        const std::size_t q = static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx);
        if (out[q] < 0 && in[q] == in[start]) {
          out[q] = next;
          queue.push_back(q);
        }
      }
    }
    if (comp.size() < min_size && adjacent >= 0) {
      for (std::size_t p : comp) out[p] = adjacent;
    } else {
      ++next;
    }
  }
  return out;
}

Segmentation superpixel_segmentation(const Tensor& image, const SegmentationConfig& cfg) {
  const InputShape s = image.shape();
  const std::size_t h = s.height, w = s.width, c = s.channels;
  const std::size_t k = std::max<std::size_t>(1, cfg.superpixels);
  const auto step = static_cast<std::size_t>(
      std::max(1.0, std::round(std::sqrt(static_cast<double>(h * w) / static_cast<double>(k)))));

  struct Center {
    double y, x;
    std::vector<double> color;
  };
  std::vector<Center> centers;
  for (std::size_t y = step / 2; y < h; y += step) {
    for (std::size_t x = step / 2; x < w; x += step) {
      Center ctr{static_cast<double>(y), static_cast<double>(x), std::vector<double>(c)};
      for (std::size_t ch = 0; ch < c; ++ch) ctr.color[ch] = image.at(0, ch, y, x);
      centers.push_back(std::move(ctr));
    }
  }
  const double spatial = (cfg.compactness / static_cast<double>(step)) * (cfg.compactness / static_cast<double>(step));
  std::vector<int> labels(h * w, -1);
  std::vector<double> dist(h * w);
  auto distance = [&](const Center& ctr, std::size_t y, std::size_t x) {
    double d = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double diff = image.at(0, ch, y, x) - ctr.color[ch];
      d += diff * diff;
    }
    const double ddy = static_cast<double>(y) - ctr.y, ddx = static_cast<double>(x) - ctr.x;
    return d + spatial * (ddy * ddy + ddx * ddx);
  };
  for (int it = 0; it < std::max(1, cfg.iterations); ++it) {
    std::fill(dist.begin(), dist.end(), std::numeric_limits<double>::infinity());
    for (std::size_t ci = 0; ci < centers.size(); ++ci) {
      const auto& ctr = centers[ci];
      const auto y0 = static_cast<std::size_t>(std::max(0.0, ctr.y - static_cast<double>(step)));
      const auto y1 = std::min(h, static_cast<std::size_t>(ctr.y + static_cast<double>(step)) + 1);
      const auto x0 = static_cast<std::size_t>(std::max(0.0, ctr.x - static_cast<double>(step)));
      const auto x1 = std::min(w, static_cast<std::size_t>(ctr.x + static_cast<double>(step)) + 1);
      for (std::size_t y = y0; y < y1; ++y) {
        for (std::size_t x = x0; x < x1; ++x) {
          const double d = distance(ctr, y, x);
          if (d < dist[y * w + x]) {
            dist[y * w + x] = d;
            labels[y * w + x] = static_cast<int>(ci);
          }
        }
      }
    }
    // Pixels outside every window go to the globally nearest center.
    for (std::size_t p = 0; p < h * w; ++p) {
      if (labels[p] >= 0) continue;
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t ci = 0; ci < centers.size(); ++ci) {
        const double d = distance(centers[ci], p / w, p % w);
        if (d < best) {
          best = d;
          labels[p] = static_cast<int>(ci);
        }
      }
    }
    std::vector<Center> acc(centers.size(), Center{0.0, 0.0, std::vector<double>(c, 0.0)});
    std::vector<std::size_t> counts(centers.size(), 0);
    for (std::size_t p = 0; p < h * w; ++p) {
      const auto ci = static_cast<std::size_t>(labels[p]);
      acc[ci].y += static_cast<double>(p / w);
      acc[ci].x += static_cast<double>(p % w);
      for (std::size_t ch = 0; ch < c; ++ch) acc[ci].color[ch] += image.at(0, ch, p / w, p % w);
      ++counts[ci];
    }
    for (std::size_t ci = 0; ci < centers.size(); ++ci) {
      if (counts[ci] == 0) continue;
      const double inv = 1.0 / static_cast<double>(counts[ci]);
      centers[ci].y = acc[ci].y * inv;
      centers[ci].x = acc[ci].x * inv;
      for (std::size_t ch = 0; ch < c; ++ch) centers[ci].color[ch] = acc[ci].color[ch] * inv;
    }
  }
  Segmentation seg;
  seg.height = h;
  seg.width = w;
  seg.labels = enforce_connectivity(labels, h, w, std::max<std::size_t>(1, step * step / 4));
  seg.num_segments = compact_ids(seg.labels);
  return seg;
}

template <class E>
[[noreturn]] void rethrow_with_stage(const E& e, const std::string& stage) {
  throw E(std::string("explain/") + stage + ": " + e.what());
}

}  // namespace

std::string to_string(SegmentationMode m) {
  switch (m) {
    case SegmentationMode::grid:
      return "grid";
    case SegmentationMode::superpixel:
      return "superpixel";
    case SegmentationMode::tabular:
      return "tabular";
  }
  return "grid";
}

SegmentationMode parse_segmentation_mode(const std::string& s) {
  if (s == "grid") return SegmentationMode::grid;
  if (s == "superpixel") return SegmentationMode::superpixel;
  if (s == "tabular") return SegmentationMode::tabular;
  throw ConfigError("unknown segmentation mode '" + s + "'");
}

std::string to_string(BaselinePolicy p) { return p == BaselinePolicy::zero ? "zero" : "mean-fill"; }

BaselinePolicy parse_baseline_policy(const std::string& s) {
  if (s == "zero") return BaselinePolicy::zero;
  if (s == "mean-fill") return BaselinePolicy::mean_fill;
  throw ConfigError("unknown baseline policy '" + s + "'");
}

std::vector<std::size_t> Segmentation::pixel_counts() const {
  std::vector<std::size_t> counts(num_segments, 0);
  for (int l : labels) ++counts[static_cast<std::size_t>(l)];
  return counts;
}

GridTemplate make_grid_template(std::size_t height, std::size_t width, std::size_t cell_h, std::size_t cell_w) {
  if (cell_h == 0 || cell_w == 0) throw ConfigError("grid cell size must be positive");
  return {(height + cell_h - 1) / cell_h, (width + cell_w - 1) / cell_w, cell_h, cell_w};
}

Segmentation grid_segmentation(const GridTemplate& g, std::size_t height, std::size_t width) {
  if (g.rows != (height + g.cell_h - 1) / g.cell_h || g.cols != (width + g.cell_w - 1) / g.cell_w) {
    throw ConfigError("grid template does not match a " + std::to_string(height) + "x" + std::to_string(width) +
                      " image");
  }
  Segmentation seg;
  seg.height = height;
  seg.width = width;
  seg.labels.resize(height * width);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      seg.labels[y * width + x] = static_cast<int>((y / g.cell_h) * g.cols + x / g.cell_w);
    }
  }
  seg.num_segments = g.size();
  seg.grid = g;
  return seg;
}

Segmentation segment_input(const Tensor& image, const SegmentationConfig& cfg) {
  if (image.batch() != 1) throw ConfigError("segment_input expects a single image");
  const InputShape s = image.shape();
  auto grid = [&] {
    Segmentation seg = grid_segmentation(make_grid_template(s.height, s.width, cfg.cell_h, cfg.cell_w), s.height,
                                         s.width);
    if (seg.num_segments < cfg.d_min || seg.num_segments > cfg.d_max) {
      throw ConfigError("grid segmentation yields " + std::to_string(seg.num_segments) +
                        " features, outside the configured range");
    }
    return seg;
  };
  switch (cfg.mode) {
    case SegmentationMode::grid:
      return grid();
    case SegmentationMode::tabular:
      return grid_segmentation(make_grid_template(s.height, s.width, 1, 1), s.height, s.width);
    case SegmentationMode::superpixel: {
      if (is_constant(image)) {
        Segmentation seg = grid();
        seg.fell_back_to_grid = true;
        return seg;
      }
      Segmentation seg = superpixel_segmentation(image, cfg);
      if (seg.num_segments < std::max<std::size_t>(cfg.d_min, 1) || seg.num_segments > cfg.d_max) {
        Segmentation fallback = grid();
        fallback.fell_back_to_grid = true;
        return fallback;
      }
      return seg;
    }
  }
  return grid();
}

double kernel_weight(const Tensor& x, const Tensor& z, double sigma) {
  if (!(sigma > 0.0)) throw ConfigError("kernel width sigma must be positive");
  if (x.size() != z.size()) throw ConfigError("kernel_weight: shape mismatch");
  double d2 = 0.0;
  for (std::size_t q = 0; q < x.size(); ++q) {
    const double diff = x[q] - z[q];
    d2 += diff * diff;
  }
  return std::exp(-d2 / (sigma * sigma));
}

double default_sigma(const InputShape& shape) { return 0.25 * std::sqrt(static_cast<double>(shape.size())); }

Tensor apply_segment_mask(const Tensor& x, const Segmentation& seg, std::span<const std::uint8_t> mask,
                          BaselinePolicy policy) {
  const InputShape s = x.shape();
  if (s.height != seg.height || s.width != seg.width) throw ConfigError("segmentation does not match input");
  if (mask.size() != seg.num_segments) throw ConfigError("mask length does not match segment count");
  std::vector<double> fill(s.channels, 0.0);
  if (policy == BaselinePolicy::mean_fill) {
    for (std::size_t c = 0; c < s.channels; ++c) {
      double acc = 0.0;
      for (std::size_t p = 0; p < s.plane(); ++p) acc += x[c * s.plane() + p];
      fill[c] = acc / static_cast<double>(s.plane());
    }
  }
  Tensor z = x;
  for (std::size_t c = 0; c < s.channels; ++c) {
    for (std::size_t p = 0; p < s.plane(); ++p) {
      if (!mask[static_cast<std::size_t>(seg.labels[p])]) z[c * s.plane() + p] = fill[c];
    }
  }
  return z;
}

PerturbationSet sample_perturbations(const Tensor& x, const Segmentation& seg, const ProbabilisticModel& model,
                                     std::size_t num_samples, std::uint64_t seed, BaselinePolicy policy,
                                     double sigma) {
  if (x.batch() != 1) throw ConfigError("sample_perturbations expects a single input");
  if (!(x.shape() == model.input_shape())) throw ConfigError("input shape does not match model");
  const std::size_t d = seg.num_segments;
  if (num_samples < d + 2) {
    throw ConfigError("need at least d + 2 = " + std::to_string(d + 2) + " perturbations, got " +
                      std::to_string(num_samples));
  }
  PerturbationSet set;
  set.num_samples = num_samples;
  set.num_features = d;
  set.seed = seed;
  set.masks.assign(num_samples * d, 1);
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  for (std::size_t i = 1; i < num_samples; ++i) {
    for (std::size_t j = 0; j < d; ++j) set.masks[i * d + j] = coin(rng) ? 1 : 0;
  }

  const Matrix p0 = model.predict_proba(x);
  if (!p0.allFinite()) throw NumericalError("model output non-finite on the unperturbed input", 0);
  Eigen::Index best = 0;
  p0.row(0).maxCoeff(&best);
  set.explained_class = static_cast<int>(best);

  set.outputs.resize(static_cast<Eigen::Index>(num_samples));
  set.weights.resize(static_cast<Eigen::Index>(num_samples));
  const std::size_t sz = x.sample_size();
  for (std::size_t start = 0; start < num_samples; start += kPerturbationChunk) {
    const std::size_t stop = std::min(num_samples, start + kPerturbationChunk);
    Tensor chunk(stop - start, x.shape());
    for (std::size_t i = start; i < stop; ++i) {
      const Tensor z = apply_segment_mask(x, seg, std::span<const std::uint8_t>(set.masks).subspan(i * d, d), policy);
      std::copy(z.storage().begin(), z.storage().end(), chunk.data() + (i - start) * sz);
      set.weights[static_cast<Eigen::Index>(i)] = kernel_weight(x, z, sigma);
    }
    const Matrix p = model.predict_proba(chunk);
    for (std::size_t i = start; i < stop; ++i) {
      const double v = p(static_cast<Eigen::Index>(i - start), best);
      if (!std::isfinite(v)) throw NumericalError("model output non-finite on perturbation", static_cast<std::ptrdiff_t>(i));
      set.outputs[static_cast<Eigen::Index>(i)] = v;
    }
  }
  return set;
}

std::vector<double> FeatureExplanation::importance() const {
  std::vector<double> out(static_cast<std::size_t>(coefficients.size()));
  for (Eigen::Index j = 0; j < coefficients.size(); ++j) out[static_cast<std::size_t>(j)] = std::abs(coefficients[j]);
  return out;
}

FeatureExplanation fit_surrogate(const PerturbationSet& set, double ridge) {
  if (!(ridge >= 0.0)) throw ConfigError("ridge must be non-negative");
  const std::size_t n = set.num_samples, d = set.num_features;
  if (n < d + 2) throw ConfigError("fit_surrogate needs at least d + 2 samples");
  for (Eigen::Index i = 0; i < set.weights.size(); ++i) {
    if (!(set.weights[i] > 0.0)) throw ConfigError("surrogate weights must be positive");
  }
  const auto N = static_cast<Eigen::Index>(n), D = static_cast<Eigen::Index>(d);

  auto solve = [&](double lambda, bool check_rank, bool& singular) {
    // Least squares on [sqrt(w) X; sqrt(lambda) [0 I]] against [sqrt(w) y; 0].
    Matrix a = Matrix::Zero(N + (lambda > 0.0 ? D : 0), D + 1);
    Vector b = Vector::Zero(a.rows());
    for (Eigen::Index i = 0; i < N; ++i) {
      const double sw = std::sqrt(set.weights[i]);
      a(i, 0) = sw;
      for (Eigen::Index j = 0; j < D; ++j) {
        a(i, j + 1) = sw * set.mask(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
      }
      b[i] = sw * set.outputs[i];
    }
    if (lambda > 0.0) {
      for (Eigen::Index j = 0; j < D; ++j) a(N + j, j + 1) = std::sqrt(lambda);
    }
    Eigen::ColPivHouseholderQR<Matrix> qr(a);
    singular = check_rank && qr.rank() < D + 1;
    return Vector(qr.solve(b));
  };

  bool singular = false;
  FeatureExplanation e;
  e.settings.ridge = ridge;
  Vector beta = solve(ridge, ridge == 0.0, singular);
  if (singular) {
    bool unused = false;
    beta = solve(kRetryRidge, false, unused);
    e.settings.ridge = kRetryRidge;
    e.settings.ridge_retry = true;
  }
  if (!beta.allFinite()) throw NumericalError("surrogate coefficients are non-finite");
  e.intercept = beta[0];
  e.coefficients = beta.tail(D);
  e.explained_class = set.explained_class;
  e.settings.num_samples = n;
  e.settings.seed = set.seed;
  double loss = 0.0;
  for (Eigen::Index i = 0; i < N; ++i) {
    double g = e.intercept;
    for (Eigen::Index j = 0; j < D; ++j) {
      if (set.mask(static_cast<std::size_t>(i), static_cast<std::size_t>(j))) g += e.coefficients[j];
    }
    const double r = set.outputs[i] - g;
    loss += set.weights[i] * r * r;
  }
  e.surrogate_loss = loss;
  return e;
}

namespace {

FeatureExplanation explain_with(const ProbabilisticModel& model, const Tensor& x, const Segmentation& seg,
                                const LimeConfig& cfg, std::uint64_t seed) {
  const double sigma = cfg.sigma > 0.0 ? cfg.sigma : default_sigma(x.shape());
  PerturbationSet set;
  try {
    set = sample_perturbations(x, seg, model, cfg.num_samples, seed, cfg.baseline, sigma);
  } catch (const ConfigError& e) {
    rethrow_with_stage(e, "sample");
  } catch (const NumericalError& e) {
    throw NumericalError(std::string("explain/sample: ") + e.what(), e.sample_index());
  }
  FeatureExplanation expl;
  try {
    expl = fit_surrogate(set, cfg.ridge);
  } catch (const ConfigError& e) {
    rethrow_with_stage(e, "fit");
  } catch (const NumericalError& e) {
    throw NumericalError(std::string("explain/fit: ") + e.what());
  }
  expl.segmentation = seg;
  expl.settings.sigma = sigma;
  expl.settings.baseline = cfg.baseline;
  return expl;
}

Segmentation segment_stage(const Tensor& x, const LimeConfig& cfg) {
  try {
    return segment_input(x, cfg.segmentation);
  } catch (const ConfigError& e) {
    rethrow_with_stage(e, "segment");
  }
}

}  // namespace

FeatureExplanation explain(const ProbabilisticModel& model, const Tensor& x, const LimeConfig& cfg) {
  return explain_with(model, x, segment_stage(x, cfg), cfg, cfg.seed);
}

std::vector<FeatureExplanation> explain_redraws(const ProbabilisticModel& model, const Tensor& x,
                                                const LimeConfig& cfg, std::size_t draws) {
  const Segmentation seg = segment_stage(x, cfg);
  std::vector<FeatureExplanation> out;
  out.reserve(draws);
  for (std::size_t r = 0; r < draws; ++r) out.push_back(explain_with(model, x, seg, cfg, cfg.seed + r));
  return out;
}

Matrix importance_heatmap(const FeatureExplanation& expl) {
  const Segmentation& seg = expl.segmentation;
  Matrix heat(static_cast<Eigen::Index>(seg.height), static_cast<Eigen::Index>(seg.width));
  for (std::size_t y = 0; y < seg.height; ++y) {
    for (std::size_t x = 0; x < seg.width; ++x) {
      heat(static_cast<Eigen::Index>(y), static_cast<Eigen::Index>(x)) = std::abs(expl.coefficients[seg.at(y, x)]);
    }
  }
  return heat;
}

nlohmann::json to_json(const FeatureExplanation& expl) {
  const Segmentation& seg = expl.segmentation;
  nlohmann::json rle = nlohmann::json::array();
  for (std::size_t p = 0; p < seg.labels.size();) {
    std::size_t q = p;
    while (q < seg.labels.size() && seg.labels[q] == seg.labels[p]) ++q;
    rle.push_back({seg.labels[p], q - p});
    p = q;
  }
  nlohmann::json segments = {{"height", seg.height}, {"width", seg.width}, {"num_segments", seg.num_segments},
                             {"rle", rle}};
  if (seg.grid) {
    segments["grid"] = {{"rows", seg.grid->rows}, {"cols", seg.grid->cols}, {"cell_h", seg.grid->cell_h},
                        {"cell_w", seg.grid->cell_w}};
  }
  const ExplanationSettings& s = expl.settings;
  return {
      {"segments", segments},
      {"beta0", expl.intercept},
      {"beta", std::vector<double>(expl.coefficients.data(), expl.coefficients.data() + expl.coefficients.size())},
      {"explained_class", expl.explained_class},
      {"surrogate_loss", expl.surrogate_loss},
      {"seed", s.seed},
      {"config",
       {{"num_samples", s.num_samples},
        {"sigma", s.sigma},
        {"ridge", s.ridge},
        {"baseline", to_string(s.baseline)},
        {"ridge_retry", s.ridge_retry}}},
  };
}

FeatureExplanation explanation_from_json(const nlohmann::json& j) {
  FeatureExplanation e;
  const auto& segj = j.at("segments");
  e.segmentation.height = segj.at("height").get<std::size_t>();
  e.segmentation.width = segj.at("width").get<std::size_t>();
  e.segmentation.num_segments = segj.at("num_segments").get<std::size_t>();
  for (const auto& run : segj.at("rle")) {
    const int id = run.at(0).get<int>();
    const auto count = run.at(1).get<std::size_t>();
    e.segmentation.labels.insert(e.segmentation.labels.end(), count, id);
  }
  if (e.segmentation.labels.size() != e.segmentation.height * e.segmentation.width) {
    throw ConfigError("explanation JSON: run lengths do not cover the image");
  }
  if (segj.contains("grid")) {
    const auto& g = segj.at("grid");
    e.segmentation.grid = GridTemplate{g.at("rows").get<std::size_t>(), g.at("cols").get<std::size_t>(),
                                       g.at("cell_h").get<std::size_t>(), g.at("cell_w").get<std::size_t>()};
  }
  e.intercept = j.at("beta0").get<double>();
  const auto beta = j.at("beta").get<std::vector<double>>();
  e.coefficients = Eigen::Map<const Vector>(beta.data(), static_cast<Eigen::Index>(beta.size()));
  e.explained_class = j.at("explained_class").get<int>();
  e.surrogate_loss = j.value("surrogate_loss", 0.0);
  e.settings.seed = j.at("seed").get<std::uint64_t>();
  const auto& c = j.at("config");
  e.settings.num_samples = c.at("num_samples").get<std::size_t>();
  e.settings.sigma = c.at("sigma").get<double>();
  e.settings.ridge = c.at("ridge").get<double>();
  e.settings.baseline = parse_baseline_policy(c.at("baseline").get<std::string>());
  e.settings.ridge_retry = c.value("ridge_retry", false);
  return e;
}

}  // namespace limeguard
