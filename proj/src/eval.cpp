#include "limeguard/eval.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <numeric>
#include <random>

#include "limeguard/detail/parallel.hpp"

namespace limeguard {

namespace {

constexpr std::size_t kEvalChunk = 500;

const std::vector<std::string> kColumns = {"model_tag", "dataset_tag", "corruption_tag", "attack_tag", "epsilon",
                                           "accuracy",  "correct",     "n_samples",      "seed",       "wall_time",
                                           "epoch",     "loss",        "warning"};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void fill_counts(MetricsRecord& r, const std::vector<int>& pred, const std::vector<int>& labels) {
  r.correctness.resize(labels.size());
  r.correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    r.correctness[i] = pred[i] == labels[i] ? 1 : 0;
    r.correct += r.correctness[i];
  }
  r.n_samples = labels.size();
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.n_samples);
}

std::vector<int> argmax_rows(const Matrix& p) {
  std::vector<int> out(static_cast<std::size_t>(p.rows()));
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    Eigen::Index c = 0;
    p.row(i).maxCoeff(&c);
    out[static_cast<std::size_t>(i)] = static_cast<int>(c);
  }
  return out;
}

std::string csv_cell(const nlohmann::json& v) {
  if (v.is_null()) return "";
  if (!v.is_string()) return v.dump();
  const auto s = v.get<std::string>();
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

}  // namespace

nlohmann::json to_json(const MetricsRecord& r) {
  nlohmann::json j;
  j["model_tag"] = r.model_tag;
  j["dataset_tag"] = r.dataset_tag;
  j["corruption_tag"] = r.corruption_tag ? nlohmann::json(*r.corruption_tag) : nlohmann::json();
  j["attack_tag"] = r.attack_tag ? nlohmann::json(*r.attack_tag) : nlohmann::json();
  j["epsilon"] = r.epsilon ? nlohmann::json(*r.epsilon) : nlohmann::json();
  j["accuracy"] = r.accuracy;
  j["correct"] = r.correct;
  j["n_samples"] = r.n_samples;
  j["seed"] = r.seed;
  j["wall_time"] = r.wall_time;
  j["epoch"] = r.epoch ? nlohmann::json(*r.epoch) : nlohmann::json();
  j["loss"] = r.loss ? nlohmann::json(*r.loss) : nlohmann::json();
  j["warning"] = r.warning ? nlohmann::json(*r.warning) : nlohmann::json();
  return j;
}

MetricsRecord metrics_record_from_json(const nlohmann::json& j) {
  MetricsRecord r;
  auto opt_str = [&](const char* k) -> std::optional<std::string> {
    if (!j.contains(k) || j[k].is_null()) return std::nullopt;
    return j[k].get<std::string>();
  };
  r.model_tag = j.at("model_tag").get<std::string>();
  r.dataset_tag = j.at("dataset_tag").get<std::string>();
  r.corruption_tag = opt_str("corruption_tag");
  r.attack_tag = opt_str("attack_tag");
  r.warning = opt_str("warning");
  if (j.contains("epsilon") && !j["epsilon"].is_null()) r.epsilon = j["epsilon"].get<double>();
  if (j.contains("epoch") && !j["epoch"].is_null()) r.epoch = j["epoch"].get<int>();
  if (j.contains("loss") && !j["loss"].is_null()) r.loss = j["loss"].get<double>();
  r.accuracy = j.at("accuracy").get<double>();
  r.correct = j.at("correct").get<std::size_t>();
  r.n_samples = j.at("n_samples").get<std::size_t>();
  r.seed = j.value("seed", std::uint64_t{0});
  r.wall_time = j.value("wall_time", 0.0);
  return r;
}

MetricsRecord standard_accuracy(const ProbabilisticModel& model, const LabeledBatch& data) {
  if (data.empty()) throw ConfigError("accuracy of an empty dataset");
  data.validate_labels(model.num_classes());
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<int> pred;
  pred.reserve(data.size());
  for (std::size_t start = 0; start < data.size(); start += kEvalChunk) {
    const auto p = argmax_rows(model.predict_proba(data.slice(start, start + kEvalChunk).inputs));
    pred.insert(pred.end(), p.begin(), p.end());
  }
  MetricsRecord r;
  fill_counts(r, pred, data.labels);
  r.wall_time = seconds_since(t0);
  return r;
}

MetricsRecord adversarial_accuracy(const Classifier& model, const LabeledBatch& data, const AttackConfig& cfg) {
  if (data.empty()) throw ConfigError("accuracy of an empty dataset");
  cfg.validate();
  data.validate_labels(model.num_classes());
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<int> pred;
  pred.reserve(data.size());
  for (std::size_t start = 0; start < data.size(); start += kEvalChunk) {
    const LabeledBatch chunk = data.slice(start, start + kEvalChunk);
    const auto p = model.predict(run_attack(model, chunk, cfg));
    pred.insert(pred.end(), p.begin(), p.end());
  }
  MetricsRecord r;
  fill_counts(r, pred, data.labels);
  r.attack_tag = to_string(cfg.family);
  r.epsilon = cfg.epsilon;
  r.wall_time = seconds_since(t0);
  return r;
}

std::vector<MetricsRecord> epsilon_sweep(const Classifier& model, const LabeledBatch& data, AttackFamily family,
                                         const std::vector<double>& epsilons, const AttackConfig& base) {
  if (epsilons.empty()) throw ConfigError("epsilon sweep needs at least one epsilon");
  if (!std::is_sorted(epsilons.begin(), epsilons.end())) throw ConfigError("epsilon sweep values must be sorted");
  std::vector<MetricsRecord> out(epsilons.size());
  detail::parallel_for(epsilons.size(), [&](std::size_t k) {
    AttackConfig cfg = base;
    cfg.family = family;
    cfg.epsilon = epsilons[k];
    out[k] = adversarial_accuracy(model, data, cfg);
  });
  return out;
}

std::vector<MetricsRecord> corruption_sweep(const Classifier& model, const CorruptionSets& corruptions,
                                            const std::vector<AttackConfig>& attacks) {
  std::vector<MetricsRecord> out;
  for (const auto& [tag, data] : corruptions) {
    for (std::size_t a = 0; a <= attacks.size(); ++a) {
      MetricsRecord r;
      if (!data) {
        r.warning = "corruption data missing";
      } else if (a == 0) {
        r = standard_accuracy(model, *data);
      } else {
        r = adversarial_accuracy(model, *data, attacks[a - 1]);
      }
      r.corruption_tag = tag;
      if (a > 0) {
        r.attack_tag = to_string(attacks[a - 1].family);
        r.epsilon = attacks[a - 1].epsilon;
      }
      out.push_back(std::move(r));
    }
  }
  return out;
}

LabeledBatch stratified_subsample(const LabeledBatch& data, std::size_t max_samples, std::uint64_t seed) {
  if (max_samples == 0 || max_samples >= data.size()) return data;
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < data.size(); ++i) groups[data.labels[i]].push_back(i);
  std::mt19937_64 rng(seed);
  for (auto& [label, idx] : groups) std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<std::size_t> chosen;
  for (std::size_t round = 0; chosen.size() < max_samples; ++round) {
    for (auto& [label, idx] : groups) {
      if (round < idx.size() && chosen.size() < max_samples) chosen.push_back(idx[round]);
    }
  }
  std::sort(chosen.begin(), chosen.end());
  return data.subset(chosen);
}

MetricsStore::MetricsStore(std::filesystem::path path, bool audit) : path_(std::move(path)), audit_(audit) {}

std::filesystem::path MetricsStore::audit_path() const {
  auto p = path_;
  p.replace_extension(".audit.jsonl");
  return p;
}

void MetricsStore::append(const MetricsRecord& r) {
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  {
    std::ofstream f(path_, std::ios::app);
    if (!f) throw std::runtime_error("cannot open metrics store " + path_.string());
    f << to_json(r).dump() << '\n';
  }
  if (audit_ && !r.correctness.empty()) {
    std::ofstream f(audit_path(), std::ios::app);
    if (!f) throw std::runtime_error("cannot open audit file " + audit_path().string());
    nlohmann::json j = to_json(r);
    j["bitmap"] = encode_bitmap(r.correctness);
    f << j.dump() << '\n';
  }
}

std::vector<MetricsRecord> MetricsStore::read_all() const {
  std::vector<MetricsRecord> out;
  std::ifstream f(path_);
  if (!f) return out;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty()) out.push_back(metrics_record_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

void MetricsStore::export_csv(const std::filesystem::path& csv) const {
  std::ofstream out(csv);
  if (!out) throw std::runtime_error("cannot write " + csv.string());
  for (std::size_t c = 0; c < kColumns.size(); ++c) out << (c ? "," : "") << kColumns[c];
  out << '\n';
  std::ifstream f(path_);
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    for (std::size_t c = 0; c < kColumns.size(); ++c) {
      out << (c ? "," : "") << csv_cell(j.contains(kColumns[c]) ? j[kColumns[c]] : nlohmann::json());
    }
    out << '\n';
  }
}

std::string encode_bitmap(const std::vector<std::uint8_t>& bits) {
  static const char* hex = "0123456789abcdef";
  std::string s;
  for (std::size_t i = 0; i < bits.size(); i += 4) {
    int v = 0;
    for (std::size_t b = 0; b < 4 && i + b < bits.size(); ++b) v |= (bits[i + b] ? 1 : 0) << b;
    s += hex[v];
  }
  return s;
}

std::vector<std::uint8_t> decode_bitmap(const std::string& hex, std::size_t n) {
  std::vector<std::uint8_t> bits(n, 0);
  for (std::size_t k = 0; k < hex.size(); ++k) {
    const char c = hex[k];
    const int v = c >= 'a' ? c - 'a' + 10 : c - '0';
    for (std::size_t b = 0; b < 4 && 4 * k + b < n; ++b) bits[4 * k + b] = (v >> b) & 1;
  }
  return bits;
}

}  // namespace limeguard
