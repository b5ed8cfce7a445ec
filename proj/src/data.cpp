#include "limeguard/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <cstring>
#include <regex>

#include "limeguard/io.hpp"

namespace limeguard {

namespace {

constexpr std::size_t kCifarPixels = 3072;

std::filesystem::path find_file(const std::filesystem::path& dir, const std::string& name,
                                const std::string& subdir) {
  if (std::filesystem::exists(dir / name)) return dir / name;
  if (std::filesystem::exists(dir / subdir / name)) return dir / subdir / name;
  throw IngestionError((dir / name).string(), "file not found");
}

// NHWC uint8 block to NCHW doubles in [0,1].
Tensor from_hwc_u8(const unsigned char* src, std::size_t n, std::size_t h, std::size_t w, std::size_t c) {
  Tensor t(n, {c, h, w});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t ch = 0; ch < c; ++ch) {
          t.at(i, ch, y, x) = src[((i * h + y) * w + x) * c + ch] / 255.0;
        }
  return t;
}

std::vector<int> npy_labels(const NpyArray& a, const std::string& file) {
  const std::size_t n = a.count();
  std::vector<int> out(n);
  if (a.descr == "|u1" || a.descr == "<u1") {
    for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<unsigned char>(a.bytes[i]);
  } else if (a.descr == "<i8") {
    for (std::size_t i = 0; i < n; ++i) {
      std::int64_t v;
      std::memcpy(&v, a.bytes.data() + 8 * i, 8);
      out[i] = static_cast<int>(v);
    }
  } else if (a.descr == "<i4") {
    for (std::size_t i = 0; i < n; ++i) {
      std::int32_t v;
      std::memcpy(&v, a.bytes.data() + 4 * i, 4);
      out[i] = v;
    }
  } else {
    throw IngestionError(file, "unsupported label dtype " + a.descr);
  }
  return out;
}

std::size_t dtype_size(const std::string& descr) {
  if (descr.size() < 3) return 0;
  return static_cast<std::size_t>(std::stoul(descr.substr(2)));
}

}  // namespace

int num_classes(CifarVariant v) { return v == CifarVariant::cifar10 ? 10 : 100; }

LabeledBatch read_cifar_batch(const std::filesystem::path& file, CifarVariant variant) {
  const std::string raw = read_file(file);
  const std::size_t label_bytes = variant == CifarVariant::cifar10 ? 1 : 2;
  const std::size_t record = label_bytes + kCifarPixels;
  if (raw.empty() || raw.size() % record != 0) {
    throw IngestionError(file.string(), "size " + std::to_string(raw.size()) + " is not a multiple of the " +
                                            std::to_string(record) + "-byte record");
  }
  const std::size_t n = raw.size() / record;
  const int k = num_classes(variant);
  LabeledBatch b;
  b.inputs = Tensor(n, {3, 32, 32});
  b.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto* rec = reinterpret_cast<const unsigned char*>(raw.data() + i * record);
    const int label = rec[label_bytes - 1];
    if (label >= k) throw IngestionError(file.string(), "label " + std::to_string(label) + " out of range");
    b.labels[i] = label;
    double* dst = b.inputs.data() + i * kCifarPixels;
    for (std::size_t q = 0; q < kCifarPixels; ++q) dst[q] = rec[label_bytes + q] / 255.0;
  }
  return b;
}

DatasetSplits load_cifar(const std::filesystem::path& dir, CifarVariant variant) {
  DatasetSplits s;
  if (variant == CifarVariant::cifar10) {
    for (int i = 1; i <= 5; ++i) {
      s.train = concat(s.train, read_cifar_batch(find_file(dir, "data_batch_" + std::to_string(i) + ".bin",
                                                           "cifar-10-batches-bin"),
                                                 variant));
    }
    s.test = read_cifar_batch(find_file(dir, "test_batch.bin", "cifar-10-batches-bin"), variant);
  } else {
    s.train = read_cifar_batch(find_file(dir, "train.bin", "cifar-100-binary"), variant);
    s.test = read_cifar_batch(find_file(dir, "test.bin", "cifar-100-binary"), variant);
  }
  return s;
}

std::pair<LabeledBatch, LabeledBatch> split_validation(const LabeledBatch& train, std::size_t val_size) {
  if (val_size >= train.size()) throw ConfigError("validation split would leave no training data");
  const std::size_t cut = train.size() - val_size;
  return {train.slice(0, cut), train.slice(cut, train.size())};
}

std::size_t NpyArray::count() const {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

NpyArray read_npy(const std::filesystem::path& file) {
  const std::string raw = read_file(file);
  if (raw.size() < 10 || raw.compare(0, 6, "\x93NUMPY") != 0) throw IngestionError(file.string(), "not an npy file");
  const auto major = static_cast<unsigned char>(raw[6]);
  std::size_t header_len = 0, offset = 0;
  if (major == 1) {
    header_len = static_cast<unsigned char>(raw[8]) | (static_cast<std::size_t>(static_cast<unsigned char>(raw[9])) << 8);
    offset = 10;
  } else {
    if (raw.size() < 12) throw IngestionError(file.string(), "truncated header");
    for (int b = 0; b < 4; ++b) header_len |= static_cast<std::size_t>(static_cast<unsigned char>(raw[8 + b])) << (8 * b);
    offset = 12;
  }
  if (offset + header_len > raw.size()) throw IngestionError(file.string(), "truncated header");
  const std::string header = raw.substr(offset, header_len);
  std::smatch m;
  NpyArray a;
  if (!std::regex_search(header, m, std::regex("'descr':\\s*'([^']+)'"))) throw IngestionError(file.string(), "no descr");
  a.descr = m[1];
  if (std::regex_search(header, m, std::regex("'fortran_order':\\s*True"))) {
    throw IngestionError(file.string(), "Fortran-ordered arrays are not supported");
  }
  if (!std::regex_search(header, m, std::regex("'shape':\\s*\\(([^)]*)\\)"))) throw IngestionError(file.string(), "no shape");
  const std::string dims = m[1];
  const std::regex digits("\\d+");
  for (std::sregex_iterator it(dims.begin(), dims.end(), digits), end; it != end; ++it) {
    a.shape.push_back(static_cast<std::size_t>(std::stoull(it->str())));
  }
  const std::size_t expected = a.count() * dtype_size(a.descr);
  if (raw.size() - offset - header_len != expected) {
    throw IngestionError(file.string(), "data length does not match shape and dtype");
  }
  a.bytes = raw.substr(offset + header_len);
  return a;
}

void write_npy(const std::filesystem::path& file, const NpyArray& a) {
  std::string shape = "(";
  for (std::size_t i = 0; i < a.shape.size(); ++i) shape += std::to_string(a.shape[i]) + (a.shape.size() == 1 ? "," : (i + 1 < a.shape.size() ? ", " : ""));
  shape += ")";
  std::string header = "{'descr': '" + a.descr + "', 'fortran_order': False, 'shape': " + shape + ", }";
  const std::size_t total = 10 + header.size() + 1;
  header.append((64 - total % 64) % 64, ' ');
  header += '\n';
  std::string out = "\x93NUMPY";
  out += static_cast<char>(1);
  out += static_cast<char>(0);
  out += static_cast<char>(header.size() & 0xff);
  out += static_cast<char>((header.size() >> 8) & 0xff);
  out += header;
  out += a.bytes;
  atomic_write(file, out);
}

std::pair<std::size_t, std::size_t> severity_range(int severity, std::size_t block, std::size_t n) {
  if (severity < 1) throw ConfigError("severity must be >= 1");
  const std::size_t begin = static_cast<std::size_t>(severity - 1) * block;
  const std::size_t end = begin + block;
  if (end > n) throw ConfigError("severity " + std::to_string(severity) + " outside an archive of " + std::to_string(n) + " rows");
  return {begin, end};
}

CorruptionLoad load_corruptions(const std::filesystem::path& dir, std::optional<int> severity, std::size_t block) {
  const auto labels_path = dir / "labels.npy";
  if (!std::filesystem::exists(labels_path)) throw IngestionError(labels_path.string(), "labels file not found");
  const std::vector<int> labels = npy_labels(read_npy(labels_path), labels_path.string());

  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.path().extension() == ".npy" && e.path().filename() != "labels.npy") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());

  CorruptionLoad out;
  for (const auto& f : files) {
    const std::string tag = f.stem().string();
    const NpyArray a = read_npy(f);
    if (a.descr != "|u1" || a.shape.size() != 4 || a.shape[1] != 32 || a.shape[2] != 32 || a.shape[3] != 3) {
      out.warnings.push_back(f.string() + ": expected uint8 N x 32 x 32 x 3, skipped");
      continue;
    }
    const std::size_t n = a.shape[0];
    if (labels.size() != n) {
      throw IngestionError(f.string(), std::to_string(n) + " images but " + std::to_string(labels.size()) + " labels");
    }
    std::size_t begin = 0, end = n;
    if (severity) std::tie(begin, end) = severity_range(*severity, block, n);
    LabeledBatch b;
    b.inputs = from_hwc_u8(reinterpret_cast<const unsigned char*>(a.bytes.data()) + begin * 3072, end - begin, 32, 32, 3);
    b.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin), labels.begin() + static_cast<std::ptrdiff_t>(end));
    out.sets[tag] = std::move(b);
  }
  return out;
}

void SyntheticSpuriousSpec::validate() const {
  if (num_classes < 2) throw ConfigError("synthetic data needs at least two classes");
  if (!(train_correlation >= 0.0 && train_correlation <= 1.0) || !(test_correlation >= 0.0 && test_correlation <= 1.0)) {
    throw ConfigError("watermark correlations must lie in [0, 1]");
  }
  if (cell == 0 || image.height % cell != 0 || image.width % cell != 0) {
    throw ConfigError("synthetic image size must be a multiple of the cell size");
  }
  const std::size_t rows = image.height / cell, cols = image.width / cell;
  if (rows < 4 || cols < 4) throw ConfigError("synthetic images need at least a 4x4 grid of cells");
  if (watermark_row >= rows || watermark_col >= cols) throw ConfigError("watermark cell outside the grid");
  const bool central = watermark_row >= rows / 4 && watermark_row < rows - rows / 4 && watermark_col >= cols / 4 &&
                       watermark_col < cols - cols / 4;
  if (central) throw ConfigError("watermark cell overlaps the signal region");
  if (!(noise >= 0.0) || !(signal_strength > 0.0)) throw ConfigError("noise must be >= 0 and signal strength > 0");
}

nlohmann::json to_json(const SyntheticSpuriousSpec& s) {
  return {{"image", {s.image.channels, s.image.height, s.image.width}},
          {"num_classes", s.num_classes},
          {"cell", s.cell},
          {"watermark_cell", {s.watermark_row, s.watermark_col}},
          {"train_correlation", s.train_correlation},
          {"test_correlation", s.test_correlation},
          {"noise", s.noise},
          {"signal_strength", s.signal_strength},
          {"n_train", s.n_train},
          {"n_test", s.n_test},
          {"n_ood", s.n_ood},
          {"seed", s.seed}};
}

SyntheticSpuriousSpec synthetic_spec_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> known = {"image", "num_classes", "cell", "watermark_cell",
                                                 "train_correlation", "test_correlation", "noise",
                                                 "signal_strength", "n_train", "n_test", "n_ood", "seed"};
  for (const auto& [k, v] : j.items()) {
    if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError("unknown synthetic key '" + k + "'");
  }
  SyntheticSpuriousSpec s;
  if (j.contains("image")) {
    const auto& im = j.at("image");
    s.image = {im.at(0).get<std::size_t>(), im.at(1).get<std::size_t>(), im.at(2).get<std::size_t>()};
  }
  s.num_classes = j.value("num_classes", s.num_classes);
  s.cell = j.value("cell", s.cell);
  if (j.contains("watermark_cell")) {
    s.watermark_row = j.at("watermark_cell").at(0).get<std::size_t>();
    s.watermark_col = j.at("watermark_cell").at(1).get<std::size_t>();
  }
  s.train_correlation = j.value("train_correlation", s.train_correlation);
  s.test_correlation = j.value("test_correlation", s.test_correlation);
  s.noise = j.value("noise", s.noise);
  s.signal_strength = j.value("signal_strength", s.signal_strength);
  s.n_train = j.value("n_train", s.n_train);
  s.n_test = j.value("n_test", s.n_test);
  s.n_ood = j.value("n_ood", s.n_ood);
  s.seed = j.value("seed", s.seed);
  s.validate();
  return s;
}

namespace {

LabeledBatch synth_split(const SyntheticSpuriousSpec& s, std::size_t n, double correlation, std::mt19937_64& rng,
                         std::vector<int>& shown) {
  const InputShape sh = s.image;
  const std::size_t r0 = sh.height / 4, r1 = sh.height - sh.height / 4;
  const std::size_t c0 = sh.width / 4, c1 = sh.width - sh.width / 4;
  const double period = static_cast<double>(s.cell) / 2.0;
  std::uniform_int_distribution<int> label_dist(0, s.num_classes - 1);
  std::uniform_int_distribution<int> other_dist(1, s.num_classes - 1);
  std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * std::numbers::pi);
  std::bernoulli_distribution agree(correlation);
  std::normal_distribution<double> noise(0.0, s.noise);

  LabeledBatch b;
  b.inputs = Tensor(n, sh);
  b.labels.resize(n);
  shown.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = label_dist(rng);
    b.labels[i] = y;
    const double angle = std::numbers::pi * y / s.num_classes;
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double phase = phase_dist(rng);
    for (std::size_t c = 0; c < sh.channels; ++c)
      for (std::size_t py = 0; py < sh.height; ++py)
        for (std::size_t px = 0; px < sh.width; ++px) {
          double v = 0.5;
          if (py >= r0 && py < r1 && px >= c0 && px < c1) {
            const double t = 2.0 * std::numbers::pi * (ca * static_cast<double>(px) + sa * static_cast<double>(py)) / period;
            v += s.signal_strength * (std::sin(t + phase) >= 0.0 ? 1.0 : -1.0);
          }
          b.inputs.at(i, c, py, px) = v + noise(rng);
        }
    const int wm = agree(rng) ? y : (y + other_dist(rng)) % s.num_classes;
    shown[i] = wm;
    for (std::size_t c = 0; c < sh.channels; ++c)
      for (std::size_t py = 0; py < s.cell; ++py)
        for (std::size_t px = 0; px < s.cell; ++px) {
          const bool bright = (px + py + static_cast<std::size_t>(wm)) % static_cast<std::size_t>(s.num_classes) == 0;
          b.inputs.at(i, c, s.watermark_row * s.cell + py, s.watermark_col * s.cell + px) = bright ? 1.0 : 0.0;
        }
  }
  for (double& v : b.inputs.storage()) v = std::clamp(v, 0.0, 1.0);
  return b;
}

}  // namespace

SyntheticData generate_synthetic_spurious(const SyntheticSpuriousSpec& spec) {
  spec.validate();
  SyntheticData d;
  d.grid = make_grid_template(spec.image.height, spec.image.width, spec.cell, spec.cell);
  d.watermark_cell = spec.watermark_row * d.grid.cols + spec.watermark_col;
  d.irrelevant.assign(d.grid.size(), true);
  for (std::size_t r = d.grid.rows / 4; r < d.grid.rows - d.grid.rows / 4; ++r)
    for (std::size_t c = d.grid.cols / 4; c < d.grid.cols - d.grid.cols / 4; ++c) d.irrelevant[r * d.grid.cols + c] = false;
  std::mt19937_64 rng(spec.seed);
  d.train = synth_split(spec, spec.n_train, spec.train_correlation, rng, d.train_watermark);
  d.test = synth_split(spec, spec.n_test, spec.train_correlation, rng, d.test_watermark);
  d.ood = synth_split(spec, spec.n_ood, spec.test_correlation, rng, d.ood_watermark);
  return d;
}

}  // namespace limeguard
