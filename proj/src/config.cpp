#include "limeguard/config.hpp"

#include <algorithm>
#include <initializer_list>

#include "limeguard/io.hpp"

namespace limeguard {

using nlohmann::json;

namespace {

void check_keys(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* n) { return k == n; })) {
      throw ConfigError("unknown key '" + k + "' in " + where);
    }
  }
}

template <class T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

json attack_list(const std::vector<AttackConfig>& v) {
  json a = json::array();
  for (const auto& c : v) a.push_back(to_json(c));
  return a;
}

}  // namespace

json to_json(const OptimizerConfig& c) {
  return {{"kind", c.kind},   {"learning_rate", c.learning_rate}, {"momentum", c.momentum},
          {"weight_decay", c.weight_decay}, {"beta1", c.beta1}, {"beta2", c.beta2},
          {"epsilon", c.epsilon}, {"batch_size", c.batch_size}};
}

OptimizerConfig optimizer_config_from_json(const json& j) {
  check_keys(j, {"kind", "learning_rate", "momentum", "weight_decay", "beta1", "beta2", "epsilon", "batch_size"},
             "optimizer");
  OptimizerConfig c;
  read(j, "kind", c.kind);
  read(j, "learning_rate", c.learning_rate);
  read(j, "momentum", c.momentum);
  read(j, "weight_decay", c.weight_decay);
  read(j, "beta1", c.beta1);
  read(j, "beta2", c.beta2);
  read(j, "epsilon", c.epsilon);
  read(j, "batch_size", c.batch_size);
  if (c.kind != "adam" && c.kind != "sgd") throw ConfigError("optimizer kind must be adam or sgd");
  if (!(c.learning_rate > 0.0) || c.batch_size == 0) throw ConfigError("optimizer needs learning_rate > 0 and batch_size > 0");
  return c;
}

json to_json(const ModelSpec& s) {
  return {{"architecture", to_string(s.architecture)},
          {"num_classes", s.num_classes},
          {"input_shape", {s.input_shape.channels, s.input_shape.height, s.input_shape.width}},
          {"resnet_width", s.resnet_width}};
}

ModelSpec model_spec_from_json(const json& j) {
  check_keys(j, {"architecture", "num_classes", "input_shape", "resnet_width"}, "model");
  ModelSpec s;
  if (j.contains("architecture")) s.architecture = parse_architecture(j.at("architecture").get<std::string>());
  read(j, "num_classes", s.num_classes);
  if (j.contains("input_shape")) {
    const auto& a = j.at("input_shape");
    if (!a.is_array() || a.size() != 3) throw ConfigError("model.input_shape must be [channels, height, width]");
    s.input_shape = {a[0].get<std::size_t>(), a[1].get<std::size_t>(), a[2].get<std::size_t>()};
  }
  read(j, "resnet_width", s.resnet_width);
  return s;
}

json to_json(const LimeConfig& c) {
  const auto& s = c.segmentation;
  return {{"segmentation",
           {{"mode", to_string(s.mode)},
            {"cell", {s.cell_h, s.cell_w}},
            {"superpixels", s.superpixels},
            {"compactness", s.compactness},
            {"iterations", s.iterations},
            {"d_range", {s.d_min, s.d_max}}}},
          {"num_samples", c.num_samples},
          {"sigma", c.sigma},
          {"ridge", c.ridge},
          {"baseline", to_string(c.baseline)},
          {"seed", c.seed}};
}

LimeConfig lime_config_from_json(const json& j) {
  check_keys(j, {"segmentation", "num_samples", "sigma", "ridge", "baseline", "seed"}, "lime");
  LimeConfig c;
  if (j.contains("segmentation")) {
    const auto& sj = j.at("segmentation");
    check_keys(sj, {"mode", "cell", "superpixels", "compactness", "iterations", "d_range"}, "lime.segmentation");
    auto& s = c.segmentation;
    if (sj.contains("mode")) s.mode = parse_segmentation_mode(sj.at("mode").get<std::string>());
    if (sj.contains("cell")) {
      s.cell_h = sj.at("cell").at(0).get<std::size_t>();
      s.cell_w = sj.at("cell").at(1).get<std::size_t>();
    }
    read(sj, "superpixels", s.superpixels);
    read(sj, "compactness", s.compactness);
    read(sj, "iterations", s.iterations);
    if (sj.contains("d_range")) {
      s.d_min = sj.at("d_range").at(0).get<std::size_t>();
      s.d_max = sj.at("d_range").at(1).get<std::size_t>();
    }
  }
  read(j, "num_samples", c.num_samples);
  read(j, "sigma", c.sigma);
  read(j, "ridge", c.ridge);
  if (j.contains("baseline")) c.baseline = parse_baseline_policy(j.at("baseline").get<std::string>());
  read(j, "seed", c.seed);
  return c;
}

json to_json(const DetectionConfig& c) {
  json j = {{"lime", to_json(c.lime)},
            {"redraws", c.redraws},
            {"percentile", c.percentile},
            {"rule", to_string(c.rule)},
            {"min_support", c.min_support}};
  if (c.thresholds) j["thresholds"] = to_json(*c.thresholds);
  if (c.irrelevant) j["irrelevant"] = *c.irrelevant;
  return j;
}

DetectionConfig detection_config_from_json(const json& j) {
  check_keys(j, {"lime", "redraws", "percentile", "thresholds", "rule", "min_support", "irrelevant"}, "detection");
  DetectionConfig c;
  if (j.contains("lime")) c.lime = lime_config_from_json(j.at("lime"));
  read(j, "redraws", c.redraws);
  read(j, "percentile", c.percentile);
  if (j.contains("thresholds")) {
    check_keys(j.at("thresholds"), {"tau", "eps_sens", "delta", "irrelevant"}, "detection.thresholds");
    c.thresholds = thresholds_from_json(j.at("thresholds"));
  }
  if (j.contains("rule")) c.rule = parse_aggregation_rule(j.at("rule").get<std::string>());
  read(j, "min_support", c.min_support);
  if (j.contains("irrelevant")) c.irrelevant = j.at("irrelevant").get<std::vector<bool>>();
  if (c.redraws < 2) throw ConfigError("detection.redraws must be >= 2 for the instability criterion");
  if (!(c.percentile >= 0.0 && c.percentile <= 100.0)) throw ConfigError("detection.percentile must lie in [0, 100]");
  if (!(c.min_support >= 0.0 && c.min_support <= 1.0)) throw ConfigError("detection.min_support must lie in [0, 1]");
  return c;
}

json to_json(const RefinementConfig& c) {
  return {{"lambda", c.lambda},
          {"alpha_adv", c.alpha_adv},
          {"masking", to_string(c.masking)},
          {"mask_probability", c.mask_probability},
          {"penalty", to_string(c.penalty)},
          {"attack", to_json(c.attack)},
          {"detection", to_json(c.detection)},
          {"detection_samples", c.detection_samples},
          {"outer_iterations", c.outer_iterations},
          {"epochs_per_iteration", c.epochs_per_iteration},
          {"optimizer", to_json(c.optimizer)},
          {"convergence", {{"min_gain", c.convergence.min_gain}, {"patience", c.convergence.patience}}},
          {"probe_epsilon", c.probe_epsilon},
          {"seed", c.seed}};
}

RefinementConfig refinement_config_from_json(const json& j) {
  check_keys(j, {"lambda", "alpha_adv", "masking", "mask_probability", "penalty", "attack", "detection",
                 "detection_samples", "outer_iterations", "epochs_per_iteration", "optimizer", "convergence",
                 "probe_epsilon", "seed"},
             "refinement");
  RefinementConfig c;
  read(j, "lambda", c.lambda);
  read(j, "alpha_adv", c.alpha_adv);
  if (j.contains("masking")) c.masking = parse_masking_mode(j.at("masking").get<std::string>());
  read(j, "mask_probability", c.mask_probability);
  if (j.contains("penalty")) c.penalty = parse_penalty_form(j.at("penalty").get<std::string>());
  if (j.contains("attack")) c.attack = attack_config_from_json(j.at("attack"));
  if (j.contains("detection")) c.detection = detection_config_from_json(j.at("detection"));
  read(j, "detection_samples", c.detection_samples);
  read(j, "outer_iterations", c.outer_iterations);
  read(j, "epochs_per_iteration", c.epochs_per_iteration);
  if (j.contains("optimizer")) c.optimizer = optimizer_config_from_json(j.at("optimizer"));
  if (j.contains("convergence")) {
    const auto& cj = j.at("convergence");
    check_keys(cj, {"min_gain", "patience"}, "refinement.convergence");
    read(cj, "min_gain", c.convergence.min_gain);
    read(cj, "patience", c.convergence.patience);
  }
  read(j, "probe_epsilon", c.probe_epsilon);
  read(j, "seed", c.seed);
  c.validate();
  return c;
}

json to_json(const ExperimentConfig& c) {
  const auto& d = c.dataset;
  json dj = {{"name", d.name},
             {"path", d.path},
             {"corruptions_path", d.corruptions_path},
             {"train_size", d.train_size},
             {"val_size", d.val_size},
             {"max_samples", d.max_samples},
             {"synthetic", to_json(d.synthetic)},
             {"use_relevance_oracle", d.use_relevance_oracle}};
  if (d.corruption_severity) dj["corruption_severity"] = *d.corruption_severity;
  json tj = {{"epochs", c.training.epochs}, {"optimizer", to_json(c.training.optimizer)}, {"seed", c.training.seed}};
  tj["target_accuracy"] = c.training.target_accuracy ? nlohmann::json(*c.training.target_accuracy) : nlohmann::json();
  const auto& e = c.evaluation;
  json ej = {{"fgsm_epsilons", e.fgsm_epsilons},
             {"pgd_epsilons", e.pgd_epsilons},
             {"pgd", to_json(e.pgd)},
             {"corruptions", e.corruptions},
             {"corruption_attacks", attack_list(e.corruption_attacks)}};
  return {{"schema_version", c.schema_version},
          {"dataset", dj},
          {"model", to_json(c.model)},
          {"training", tj},
          {"refinement", to_json(c.refinement)},
          {"evaluation", ej},
          {"output_dir", c.output_dir},
          {"audit", c.audit}};
}

ExperimentConfig experiment_config_from_json(const json& j) {
  try {
    check_keys(j, {"schema_version", "dataset", "model", "training", "refinement", "evaluation", "output_dir", "audit"},
               "config");
    std::string name = "synthetic";
    if (j.contains("dataset") && j.at("dataset").contains("name")) name = j.at("dataset").at("name").get<std::string>();
    ExperimentConfig c = name == "synthetic" ? synthetic_experiment_defaults() : cifar_experiment_defaults(name);
    if (!j.contains("schema_version")) throw ConfigError("config lacks schema_version");
    c.schema_version = j.at("schema_version").get<int>();
    if (c.schema_version != kConfigSchemaVersion) {
      throw ConfigError("unsupported schema_version " + std::to_string(c.schema_version));
    }
    if (j.contains("dataset")) {
      const auto& dj = j.at("dataset");
      check_keys(dj, {"name", "path", "corruptions_path", "corruption_severity", "train_size", "val_size",
                      "max_samples", "synthetic", "use_relevance_oracle"},
                 "dataset");
      auto& d = c.dataset;
      read(dj, "name", d.name);
      read(dj, "path", d.path);
      read(dj, "corruptions_path", d.corruptions_path);
      if (dj.contains("corruption_severity")) d.corruption_severity = dj.at("corruption_severity").get<int>();
      read(dj, "train_size", d.train_size);
      read(dj, "val_size", d.val_size);
      read(dj, "max_samples", d.max_samples);
      if (dj.contains("synthetic")) d.synthetic = synthetic_spec_from_json(dj.at("synthetic"));
      read(dj, "use_relevance_oracle", d.use_relevance_oracle);
    }
    if (j.contains("model")) c.model = model_spec_from_json(j.at("model"));
    if (j.contains("training")) {
      const auto& tj = j.at("training");
      check_keys(tj, {"epochs", "optimizer", "target_accuracy", "seed"}, "training");
      read(tj, "epochs", c.training.epochs);
      if (tj.contains("optimizer")) c.training.optimizer = optimizer_config_from_json(tj.at("optimizer"));
      if (tj.contains("target_accuracy")) {
        const auto& t = tj.at("target_accuracy");
        c.training.target_accuracy = t.is_null() ? std::nullopt : std::optional<double>(t.get<double>());
      }
      read(tj, "seed", c.training.seed);
    }
    if (j.contains("refinement")) c.refinement = refinement_config_from_json(j.at("refinement"));
    if (j.contains("evaluation")) {
      const auto& ej = j.at("evaluation");
      check_keys(ej, {"fgsm_epsilons", "pgd_epsilons", "pgd", "corruptions", "corruption_attacks"}, "evaluation");
      auto& e = c.evaluation;
      read(ej, "fgsm_epsilons", e.fgsm_epsilons);
      read(ej, "pgd_epsilons", e.pgd_epsilons);
      if (ej.contains("pgd")) e.pgd = attack_config_from_json(ej.at("pgd"));
      read(ej, "corruptions", e.corruptions);
      if (ej.contains("corruption_attacks")) {
        e.corruption_attacks.clear();
        for (const auto& a : ej.at("corruption_attacks")) e.corruption_attacks.push_back(attack_config_from_json(a));
      }
    }
    read(j, "output_dir", c.output_dir);
    read(j, "audit", c.audit);
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
}

void ExperimentConfig::validate() const {
  const auto& d = dataset;
  if (d.name == "synthetic") {
    d.synthetic.validate();
    if (model.num_classes != d.synthetic.num_classes) throw ConfigError("model.num_classes must match the synthetic spec");
    if (!(model.input_shape == d.synthetic.image)) throw ConfigError("model.input_shape must match the synthetic image");
    if (d.val_size >= d.synthetic.n_train) throw ConfigError("dataset.val_size must be smaller than the synthetic train split");
  } else if (d.name == "cifar10" || d.name == "cifar100") {
    if (d.path.empty()) throw ConfigError("dataset.path is required for " + d.name);
    const int k = d.name == "cifar10" ? 10 : 100;
    if (model.num_classes != k) throw ConfigError("model.num_classes must be " + std::to_string(k) + " for " + d.name);
    if (!(model.input_shape == InputShape{3, 32, 32})) throw ConfigError("CIFAR models take 3x32x32 inputs");
  } else {
    throw ConfigError("unknown dataset '" + d.name + "'");
  }
  if (d.corruption_severity && (*d.corruption_severity < 1 || *d.corruption_severity > 5)) {
    throw ConfigError("corruption_severity must lie in [1, 5]");
  }
  if (evaluation.corruptions && d.corruptions_path.empty()) {
    throw ConfigError("evaluation.corruptions requires dataset.corruptions_path");
  }
  if (training.epochs < 1) throw ConfigError("training.epochs must be >= 1");
  if (training.target_accuracy && !(*training.target_accuracy > 0.0 && *training.target_accuracy <= 1.0)) {
    throw ConfigError("training.target_accuracy must lie in (0, 1]");
  }
  for (const auto* eps : {&evaluation.fgsm_epsilons, &evaluation.pgd_epsilons}) {
    if (!std::is_sorted(eps->begin(), eps->end())) throw ConfigError("evaluation epsilons must be sorted");
    for (double v : *eps) {
      if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("evaluation epsilons must lie in [0, 1]");
    }
  }
  refinement.validate();
  if (output_dir.empty()) throw ConfigError("output_dir must be set");
}

std::string dump_config(const ExperimentConfig& c) { return to_json(c).dump(2) + "\n"; }

ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return experiment_config_from_json(j);
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file " + path.string() + " not found");
  return parse_config(read_file(path));
}

ExperimentConfig synthetic_experiment_defaults() {
  ExperimentConfig c;
  auto& s = c.dataset.synthetic;
  s.n_train = 2000;
  s.n_test = 1000;
  s.n_ood = 1000;
  s.signal_strength = 0.1;
  s.noise = 0.25;
  c.dataset.val_size = 400;
  c.model.num_classes = s.num_classes;
  c.model.input_shape = s.image;
  c.training.epochs = 10;
  c.training.target_accuracy = 0.95;
  auto& r = c.refinement;
  r.attack.family = AttackFamily::fgsm;
  r.attack.epsilon = 0.03;
  r.detection.lime.num_samples = 500;
  r.detection_samples = 100;
  c.evaluation.fgsm_epsilons = {0.01, 0.03, 0.05, 0.1};
  c.evaluation.pgd_epsilons = {0.01, 0.03, 0.05};
  c.evaluation.pgd.family = AttackFamily::pgd;
  c.evaluation.pgd.step_size = 0.01;
  c.evaluation.pgd.steps = 10;
  c.output_dir = "runs/synthetic";
  return c;
}

ExperimentConfig cifar_experiment_defaults(const std::string& name) {
  ExperimentConfig c;
  c.dataset.name = name;
  c.model.num_classes = name == "cifar100" ? 100 : 10;
  c.output_dir = "runs/" + name;
  return c;
}

}  // namespace limeguard
