#include "limeguard/experiment.hpp"

#include <chrono>
#include <cmath>
#include <ostream>

#include "limeguard/io.hpp"

namespace limeguard {

namespace fs = std::filesystem;

const LabeledBatch& ExperimentData::eval_set(const std::string& tag) const {
  for (const auto& [name, set] : eval_sets) {
    if (name == tag) return set;
  }
  throw ConfigError("no evaluation split named '" + tag + "'");
}

ExperimentData load_experiment_data(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto& dc = cfg.dataset;
  const std::uint64_t seed = cfg.training.seed;
  ExperimentData d;
  if (dc.name == "synthetic") {
    SyntheticData s = generate_synthetic_spurious(dc.synthetic);
    std::tie(d.train, d.val) = split_validation(s.train, dc.val_size);
    d.eval_sets.emplace_back("test", stratified_subsample(s.test, dc.max_samples, seed));
    d.eval_sets.emplace_back("ood", stratified_subsample(s.ood, dc.max_samples, seed));
    d.irrelevant = std::move(s.irrelevant);
  } else {
    const auto variant = dc.name == "cifar10" ? CifarVariant::cifar10 : CifarVariant::cifar100;
    {
      DatasetSplits s = load_cifar(dc.path, variant);
      std::tie(d.train, d.val) = split_validation(s.train, dc.val_size);
      s.train = {};
      d.eval_sets.emplace_back("test", stratified_subsample(s.test, dc.max_samples, seed));
    }
    if (cfg.evaluation.corruptions) {
      CorruptionLoad c = load_corruptions(dc.corruptions_path, dc.corruption_severity);
      for (auto& [tag, set] : c.sets) {
        if (set) set = stratified_subsample(*set, dc.max_samples, seed);
      }
      d.corruptions = std::move(c.sets);
      d.warnings = std::move(c.warnings);
    }
  }
  if (dc.train_size > 0) d.train = stratified_subsample(d.train, dc.train_size, seed);
  return d;
}

Experiment::Experiment(ExperimentConfig cfg, std::ostream& log) : cfg_(std::move(cfg)), log_(log) {
  cfg_.validate();
  fs::create_directories(out());
  load_manifest();
  const std::string text = dump_config(cfg_);
  const fs::path cfg_path = out() / "config.json";
  if (fs::exists(cfg_path) && read_file(cfg_path) != text && !manifest_["completed"].empty()) {
    throw ConfigError(out().string() + " holds a run with a different config; use a fresh output directory");
  }
  atomic_write(cfg_path, text);
}

const ExperimentData& Experiment::data() {
  if (!data_) {
    data_ = load_experiment_data(cfg_);
    for (const auto& w : data_->warnings) log_ << "warning: " << w << "\n";
  }
  return *data_;
}

void Experiment::load_manifest() {
  const fs::path p = out() / "MANIFEST.json";
  if (fs::exists(p)) {
    manifest_ = nlohmann::json::parse(read_file(p));
  } else {
    manifest_ = {{"status", "new"}, {"completed", nlohmann::json::array()}, {"failed_stage", nullptr},
                 {"error", nullptr},  {"metrics_bytes", 0},                {"audit_bytes", 0}};
  }
}

void Experiment::save_manifest() const { atomic_write(out() / "MANIFEST.json", manifest_.dump(2) + "\n"); }

bool Experiment::stage_done(const std::string& stage) const {
  for (const auto& s : manifest_["completed"]) {
    if (s == stage) return true;
  }
  return false;
}

void Experiment::begin_stage(const std::string& stage) {
  // Drop rows an interrupted attempt at this stage may have left behind.
  const MetricsStore store(metrics_path(), cfg_.audit);
  const std::pair<fs::path, std::uintmax_t> files[] = {
      {store.path(), manifest_["metrics_bytes"].get<std::uintmax_t>()},
      {store.audit_path(), manifest_["audit_bytes"].get<std::uintmax_t>()}};
  for (const auto& [path, bytes] : files) {
    if (fs::exists(path) && fs::file_size(path) > bytes) fs::resize_file(path, bytes);
  }
  manifest_["status"] = "running";
  manifest_["current_stage"] = stage;
  save_manifest();
  log_ << "[" << stage << "]\n";
}

void Experiment::finish_stage(const std::string& stage) {
  if (!stage_done(stage)) manifest_["completed"].push_back(stage);
  const MetricsStore store(metrics_path(), cfg_.audit);
  manifest_["metrics_bytes"] = fs::exists(store.path()) ? fs::file_size(store.path()) : 0;
  manifest_["audit_bytes"] = fs::exists(store.audit_path()) ? fs::file_size(store.audit_path()) : 0;
  manifest_.erase("current_stage");
  save_manifest();
}

void Experiment::append(const std::vector<MetricsRecord>& records) {
  MetricsStore store(metrics_path(), cfg_.audit);
  for (const auto& r : records) store.append(r);
}

MetricsRecord Experiment::tag(MetricsRecord r, const std::string& model, const std::string& dataset) const {
  r.model_tag = model;
  r.dataset_tag = dataset;
  r.seed = cfg_.training.seed;
  return r;
}

namespace {

// A training-pass row and a validation row for one epoch.
std::vector<MetricsRecord> epoch_rows(const std::string& model_tag, int epoch, const Classifier& model, double loss,
                                      double train_acc, const ExperimentData& d, std::uint64_t seed) {
  MetricsRecord tr;
  tr.model_tag = model_tag;
  tr.dataset_tag = "train";
  tr.epoch = epoch;
  tr.loss = loss;
  tr.n_samples = d.train.size();
  tr.correct = static_cast<std::size_t>(std::llround(train_acc * static_cast<double>(tr.n_samples)));
  tr.accuracy = static_cast<double>(tr.correct) / static_cast<double>(tr.n_samples);
  tr.seed = seed;
  MetricsRecord val = standard_accuracy(model, d.val);
  val.model_tag = model_tag;
  val.dataset_tag = "val";
  val.epoch = epoch;
  val.seed = seed;
  return {tr, val};
}

}  // namespace

void Experiment::train_baseline() {
  if (stage_done("baseline") && fs::exists(baseline_path())) return;
  begin_stage("baseline");
  const ExperimentData& d = data();
  Classifier model(cfg_.model, cfg_.training.seed);
  std::vector<MetricsRecord> curve;
  const auto stats = train_epochs(
      model, d.train, plain_task_loss(), cfg_.training.optimizer, cfg_.training.epochs, cfg_.training.seed,
      [&](int e, const Classifier& m, double loss, double acc) {
        for (auto& r : epoch_rows("baseline", e + 1, m, loss, acc, d, cfg_.training.seed)) curve.push_back(r);
        log_ << "  epoch " << e + 1 << " loss " << loss << " train acc " << acc << " val acc "
             << curve.back().accuracy << "\n";
      },
      cfg_.training.target_accuracy);
  CheckpointMeta meta{"baseline", std::nullopt, 0, {{"epochs", stats.loss.size()}}};
  save_checkpoint(baseline_path(), model, meta);
  append(curve);
  finish_stage("baseline");
}

void Experiment::refine_baseline() {
  if (stage_done("refine") && fs::exists(refined_path())) return;
  begin_stage("refine");
  const ExperimentData& d = data();
  const LoadedCheckpoint base = load_checkpoint(baseline_path());
  RefinementConfig rc = cfg_.refinement;
  if (d.irrelevant && cfg_.dataset.use_relevance_oracle) rc.detection.irrelevant = d.irrelevant;

  std::vector<MetricsRecord> curve;
  const auto on_record = [&](const RefinementRecord& r, const Classifier& m) {
    CheckpointMeta meta{"refined", base.hash, r.iteration, {{"probe_accuracy", r.probe_accuracy}}};
    save_checkpoint(out() / "checkpoints" / ("refined_iter" + std::to_string(r.iteration) + ".ckpt"), m, meta);
    log_ << "  iteration " << r.iteration << " flagged " << r.spurious.flagged.size() << " clean " << r.clean_accuracy
         << " probe " << r.probe_accuracy << " grad norm " << r.reference_grad_norm
         << (r.diverged ? " (diverged, rolled back)" : "") << "\n";
  };
  const auto on_epoch = [&](int e, const Classifier& m, double loss, double acc) {
    for (auto& r : epoch_rows("refined", e + 1, m, loss, acc, d, cfg_.training.seed)) curve.push_back(r);
  };
  RefineResult res = refine(base.model, d.train, d.val, rc, on_record, on_epoch);

  res.trace.write_jsonl(out() / "refinement_trace.jsonl");
  nlohmann::json summary = {{"initial_clean_accuracy", res.trace.initial_clean_accuracy},
                            {"initial_probe_accuracy", res.trace.initial_probe_accuracy},
                            {"initial_grad_norm", res.trace.initial_grad_norm},
                            {"best_iteration", res.trace.best_iteration},
                            {"iterations", res.trace.records.size()}};
  if (res.trace.best_iteration > 0) {
    const auto& best = res.trace.records[static_cast<std::size_t>(res.trace.best_iteration - 1)];
    summary["best_reference_grad_norm"] = best.reference_grad_norm;
  }
  if (!res.trace.records.empty()) {
    atomic_write(out() / "spurious.json", to_json(res.trace.records.front().spurious).dump(2) + "\n");
  }
  atomic_write(out() / "refinement_summary.json", summary.dump(2) + "\n");
  save_checkpoint(refined_path(), res.model, {"refined", base.hash, res.trace.best_iteration, summary});
  append(curve);
  finish_stage("refine");
}

std::vector<MetricsRecord> Experiment::evaluate_model(const Classifier& model, const std::string& model_tag) {
  const ExperimentData& d = data();
  const auto& ev = cfg_.evaluation;
  std::vector<MetricsRecord> out;
  for (const auto& [name, set] : d.eval_sets) out.push_back(tag(standard_accuracy(model, set), model_tag, name));
  const LabeledBatch& test = d.eval_set("test");
  if (!ev.fgsm_epsilons.empty()) {
    for (auto& r : epsilon_sweep(model, test, AttackFamily::fgsm, ev.fgsm_epsilons)) out.push_back(tag(r, model_tag, "test"));
  }
  if (!ev.pgd_epsilons.empty()) {
    for (auto& r : epsilon_sweep(model, test, AttackFamily::pgd, ev.pgd_epsilons, ev.pgd)) {
      out.push_back(tag(r, model_tag, "test"));
    }
  }
  if (ev.corruptions) {
    for (auto& r : corruption_sweep(model, d.corruptions, ev.corruption_attacks)) {
      out.push_back(tag(r, model_tag, "corrupted"));
    }
  }
  return out;
}

void Experiment::evaluate() {
  if (stage_done("evaluate")) return;
  begin_stage("evaluate");
  std::vector<MetricsRecord> rows;
  for (const auto& [model_tag, path] : {std::pair{"baseline", baseline_path()}, std::pair{"refined", refined_path()}}) {
    const LoadedCheckpoint ck = load_checkpoint(path);
    for (auto& r : evaluate_model(ck.model, model_tag)) {
      log_ << "  " << r.model_tag << " " << r.dataset_tag << (r.attack_tag ? " " + *r.attack_tag : "")
           << (r.epsilon ? " eps " + std::to_string(*r.epsilon) : "")
           << (r.corruption_tag ? " " + *r.corruption_tag : "") << " acc " << r.accuracy << "\n";
      rows.push_back(std::move(r));
    }
  }
  append(rows);
  finish_stage("evaluate");
}

FigureReport Experiment::figures() {
  begin_stage("figures");
  const MetricsStore store(metrics_path(), cfg_.audit);
  FigureReport rep = emit_figures(store.read_all(), out() / "figures");
  for (const auto& w : rep.warnings) log_ << "warning: " << w << "\n";
  store.export_csv(out() / "metrics.csv");
  finish_stage("figures");
  return rep;
}

int Experiment::run() {
  std::string stage = "data";
  try {
    data();
    stage = "baseline";
    train_baseline();
    stage = "refine";
    refine_baseline();
    stage = "evaluate";
    evaluate();
    stage = "figures";
    figures();
  } catch (const std::exception& e) {
    manifest_["status"] = "failed";
    manifest_["failed_stage"] = stage;
    manifest_["error"] = e.what();
    save_manifest();
    log_ << "error in stage " << stage << ": " << e.what() << "\n";
    return 1;
  }
  manifest_["status"] = "complete";
  manifest_["failed_stage"] = nullptr;
  manifest_["error"] = nullptr;
  save_manifest();
  return 0;
}

int run_experiment(const ExperimentConfig& cfg, std::ostream& log) {
  Experiment exp(cfg, log);
  return exp.run();
}

}  // namespace limeguard
