// limeguard command line: individual pipeline stages and the end-to-end run.
//
// Exit status: 0 success, 1 stage failure, 2 configuration error,
// 3 unreadable data or checkpoint.

#include <cmath>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "limeguard/experiment.hpp"
#include "limeguard/io.hpp"

using namespace limeguard;
namespace fs = std::filesystem;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> max_samples;
  bool audit = false;
};

ExperimentConfig resolve(const Globals& g) {
  ExperimentConfig cfg = g.config.empty() ? synthetic_experiment_defaults() : load_config(g.config);
  if (g.seed) {
    cfg.training.seed = *g.seed;
    cfg.refinement.seed = *g.seed;
  }
  if (!g.out.empty()) cfg.output_dir = g.out;
  if (g.max_samples) cfg.dataset.max_samples = *g.max_samples;
  if (g.audit) cfg.audit = true;
  cfg.validate();
  return cfg;
}

// Input image on the left, |beta| heatmap on the right, both scaled up.
void write_heatmap(const fs::path& path, const Tensor& x, const FeatureExplanation& e) {
  const Matrix heat = importance_heatmap(e);
  const int h = static_cast<int>(x.shape().height), w = static_cast<int>(x.shape().width);
  const int s = std::max(1, 256 / std::max(h, w));
  Canvas cv(2 * w * s + 8, h * s);
  const double peak = std::max(heat.maxCoeff(), 1e-12);
  for (int y = 0; y < h; ++y)
    for (int xx = 0; xx < w; ++xx) {
      std::uint32_t rgb = 0;
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t ch = x.shape().channels == 3 ? c : 0;
        const auto v = static_cast<std::uint32_t>(std::lround(255.0 * x.at(0, ch, static_cast<std::size_t>(y), static_cast<std::size_t>(xx))));
        rgb |= v << (8 * (2 - c));
      }
      cv.fill_rect(xx * s, y * s, xx * s + s - 1, y * s + s - 1, rgb);
      const auto t = static_cast<std::uint32_t>(std::lround(255.0 * heat(y, xx) / peak));
      cv.fill_rect(w * s + 8 + xx * s, y * s, w * s + 8 + xx * s + s - 1, y * s + s - 1, (t << 16) | ((t / 3) << 8));
    }
  cv.write_png(path);
}

int guarded(const std::function<int()>& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const IngestionError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LIME-guided detection of spurious features and model refinement"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "experiment config (JSON); synthetic defaults when omitted");
  app.add_option("--seed", g.seed, "override the training and refinement seeds");
  app.add_option("--out", g.out, "output directory");
  app.add_option("--max-samples", g.max_samples, "stratified evaluation subset size");
  app.add_flag("--audit", g.audit, "store per-sample correctness bitmaps next to the metrics");

  auto* run = app.add_subcommand("run", "train, refine, evaluate and plot; resumes in an existing output directory");
  auto* train = app.add_subcommand("train", "train the baseline model");
  auto* refine_cmd = app.add_subcommand("refine", "refine the baseline checkpoint");
  auto* eval = app.add_subcommand("eval", "evaluate the baseline and refined checkpoints");
  auto* figures = app.add_subcommand("figures", "render figures from the metrics store");

  std::string checkpoint;
  std::size_t index = 0;
  std::string split = "test";
  auto* explain_cmd = app.add_subcommand("explain", "LIME explanation of one evaluation image");
  explain_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  explain_cmd->add_option("--index", index, "sample index within the split");
  explain_cmd->add_option("--split", split, "evaluation split (test, or ood for synthetic data)");

  auto* detect_cmd = app.add_subcommand("detect", "flag spurious features on the validation detection sample");
  detect_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();

  std::string family = "fgsm";
  double epsilon = 0.03;
  std::optional<double> step_size;
  std::optional<int> steps;
  auto* attack_cmd = app.add_subcommand("attack", "adversarial accuracy of a checkpoint on the test split");
  attack_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  attack_cmd->add_option("--family", family, "fgsm or pgd")->check(CLI::IsMember({"fgsm", "pgd"}));
  attack_cmd->add_option("--epsilon", epsilon, "L-infinity budget");
  attack_cmd->add_option("--step-size", step_size, "PGD step size");
  attack_cmd->add_option("--steps", steps, "PGD iterations");

  CLI11_PARSE(app, argc, argv);

  return guarded([&]() -> int {
    const ExperimentConfig cfg = resolve(g);
    if (run->parsed()) return run_experiment(cfg, std::cerr);

    Experiment exp(cfg, std::cerr);
    if (train->parsed()) {
      exp.train_baseline();
      std::cout << exp.baseline_path().string() << "\n";
    } else if (refine_cmd->parsed()) {
      exp.train_baseline();
      exp.refine_baseline();
      std::cout << exp.refined_path().string() << "\n";
    } else if (eval->parsed()) {
      exp.evaluate();
      std::cout << exp.metrics_path().string() << "\n";
    } else if (figures->parsed()) {
      for (const auto& f : exp.figures().files) std::cout << f.string() << "\n";
    } else if (explain_cmd->parsed()) {
      const LoadedCheckpoint ck = load_checkpoint(checkpoint);
      const LabeledBatch& set = exp.data().eval_set(split);
      if (index >= set.size()) throw ConfigError("--index beyond the " + split + " split");
      const Tensor x = take_sample(set.inputs, index);
      const FeatureExplanation e = explain(ck.model, x, cfg.refinement.detection.lime);
      const fs::path stem = exp.out() / "explanations" / (split + "_" + std::to_string(index));
      atomic_write(stem.string() + ".json", to_json(e).dump(2) + "\n");
      write_heatmap(stem.string() + ".png", x, e);
      std::cout << stem.string() << ".json\n";
    } else if (detect_cmd->parsed()) {
      const LoadedCheckpoint ck = load_checkpoint(checkpoint);
      DetectionConfig dc = cfg.refinement.detection;
      if (exp.data().irrelevant && cfg.dataset.use_relevance_oracle) dc.irrelevant = exp.data().irrelevant;
      const auto& val = exp.data().val;
      const auto inputs = val.slice(0, std::min(val.size(), cfg.refinement.detection_samples)).inputs;
      DetectionReport rep = detect_spurious(ck.model, inputs, dc);
      rep.spurious.source = "validation[0:" + std::to_string(inputs.batch()) + "]";
      const auto path = exp.out() / ("spurious_" + ck.meta.tag + ".json");
      atomic_write(path, to_json(rep.spurious).dump(2) + "\n");
      std::cout << to_json(rep.spurious).dump(2) << "\n";
    } else if (attack_cmd->parsed()) {
      const LoadedCheckpoint ck = load_checkpoint(checkpoint);
      AttackConfig ac = family == "pgd" ? cfg.evaluation.pgd : AttackConfig{};
      ac.family = parse_attack_family(family);
      ac.epsilon = epsilon;
      if (step_size) ac.step_size = *step_size;
      if (steps) ac.steps = *steps;
      ac.validate();
      MetricsRecord r = adversarial_accuracy(ck.model, exp.data().eval_set("test"), ac);
      r.model_tag = ck.meta.tag;
      r.dataset_tag = "test";
      r.seed = cfg.training.seed;
      std::cout << to_json(r).dump() << "\n";
    }
    return 0;
  });
}
