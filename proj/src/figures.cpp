#include "limeguard/figures.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>

#include "limeguard/io.hpp"

namespace limeguard {

namespace {

constexpr std::uint32_t kBlack = 0x000000, kWhite = 0xffffff, kGrid = 0xdddddd;
constexpr std::array<std::uint32_t, 8> kPalette = {0x1f77b4, 0xd62728, 0x2ca02c, 0xff7f0e,
                                                   0x9467bd, 0x8c564b, 0xe377c2, 0x7f7f7f};

using Glyph = std::array<std::uint8_t, 7>;

// 5x7 bitmaps, bit 4 is the leftmost column. Lowercase maps to uppercase.
const std::map<char, Glyph>& font() {
  static const std::map<char, Glyph> f = {
      {' ', {0, 0, 0, 0, 0, 0, 0}},
      {'-', {0, 0, 0, 0x1F, 0, 0, 0}},
      {'.', {0, 0, 0, 0, 0, 0x0C, 0x0C}},
      {',', {0, 0, 0, 0, 0x0C, 0x04, 0x08}},
      {'/', {0x01, 0x02, 0x02, 0x04, 0x08, 0x08, 0x10}},
      {':', {0, 0x0C, 0x0C, 0, 0x0C, 0x0C, 0}},
      {'=', {0, 0, 0x1F, 0, 0x1F, 0, 0}},
      {'+', {0, 0x04, 0x04, 0x1F, 0x04, 0x04, 0}},
      {'(', {0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02}},
      {')', {0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08}},
      {'_', {0, 0, 0, 0, 0, 0, 0x1F}},
      {'%', {0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03}},
      {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}},
      {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
      {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}},
      {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
      {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}},
      {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
      {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}},
      {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
      {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}},
      {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
      {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
      {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
      {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}},
      {'D', {0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C}},
      {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}},
      {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
      {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}},
      {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
      {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}},
      {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
      {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}},
      {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
      {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}},
      {'N', {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11}},
      {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
      {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
      {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}},
      {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
      {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}},
      {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
      {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
      {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
      {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}},
      {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
      {'Y', {0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04}},
      {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
  };
  return f;
}

std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

struct Frame {
  int left = 72, right = 0, top = 44, bottom = 0;  // plot rectangle in pixels
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;

  int px(double x) const { return left + static_cast<int>(std::lround((x - x0) / (x1 - x0) * (right - left))); }
  int py(double y) const { return bottom - static_cast<int>(std::lround((y - y0) / (y1 - y0) * (bottom - top))); }
};

void draw_frame(Canvas& cv, const Frame& f, const std::string& title, const std::string& x_label,
                const std::string& y_label, bool x_ticks) {
  cv.text((cv.width() - Canvas::text_width(title, 2)) / 2, 12, title, kBlack, 2);
  for (int i = 0; i <= 4; ++i) {
    const double y = f.y0 + (f.y1 - f.y0) * i / 4.0;
    const int yy = f.py(y);
    cv.line(f.left, yy, f.right, yy, kGrid);
    const std::string lab = tick_label(y);
    cv.text(f.left - 6 - Canvas::text_width(lab), yy - 3, lab, kBlack);
    if (x_ticks) {
      const double x = f.x0 + (f.x1 - f.x0) * i / 4.0;
      const int xx = f.px(x);
      cv.line(xx, f.bottom, xx, f.bottom + 4, kBlack);
      const std::string xl = tick_label(x);
      cv.text(xx - Canvas::text_width(xl) / 2, f.bottom + 8, xl, kBlack);
    }
  }
  cv.line(f.left, f.top, f.left, f.bottom, kBlack);
  cv.line(f.left, f.bottom, f.right, f.bottom, kBlack);
  cv.text((f.left + f.right - Canvas::text_width(x_label)) / 2, cv.height() - 14, x_label, kBlack);
  cv.text(6, f.top - 14, y_label, kBlack);
}

void draw_legend(Canvas& cv, const Frame& f, const std::vector<std::string>& names) {
  int w = 0;
  for (const auto& n : names) w = std::max(w, Canvas::text_width(n));
  const int x = f.right - w - 26;
  int y = f.top + 6;
  cv.fill_rect(x - 4, y - 4, f.right - 4, y + 12 * static_cast<int>(names.size()), kWhite);
  for (std::size_t i = 0; i < names.size(); ++i, y += 12) {
    cv.fill_rect(x, y, x + 12, y + 6, kPalette[i % kPalette.size()]);
    cv.text(x + 16, y, names[i], kBlack);
  }
}

// Groups records into named series in order of first appearance, points sorted by x.
std::vector<Series> collect(const std::vector<const MetricsRecord*>& rows, double (*xf)(const MetricsRecord&),
                            double (*yf)(const MetricsRecord&)) {
  std::vector<Series> out;
  std::map<std::string, std::size_t> index;
  for (const auto* r : rows) {
    const std::string name = r->model_tag + "/" + r->dataset_tag;
    auto [it, fresh] = index.emplace(name, out.size());
    if (fresh) out.push_back({name, {}, {}});
    out[it->second].x.push_back(xf(*r));
    out[it->second].y.push_back(yf(*r));
  }
  for (auto& s : out) {
    std::vector<std::size_t> order(s.x.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s.x[a] < s.x[b]; });
    Series sorted{s.name, {}, {}};
    for (auto i : order) {
      sorted.x.push_back(s.x[i]);
      sorted.y.push_back(s.y[i]);
    }
    s = std::move(sorted);
  }
  return out;
}

void write_figure(const std::filesystem::path& dir, const std::string& stem, const Canvas& cv,
                  const nlohmann::json& data, FigureReport& report) {
  const auto png = dir / (stem + ".png");
  cv.write_png(png);
  atomic_write(dir / (stem + ".json"), data.dump(2) + "\n");
  report.files.push_back(png);
}

}  // namespace

nlohmann::json to_json(const LineChart& c) {
  nlohmann::json series = nlohmann::json::array();
  for (const auto& s : c.series) series.push_back({{"name", s.name}, {"x", s.x}, {"y", s.y}});
  return {{"kind", "line"}, {"title", c.title}, {"x_label", c.x_label}, {"y_label", c.y_label}, {"series", series}};
}

nlohmann::json to_json(const BarChart& c) {
  nlohmann::json series = nlohmann::json::array();
  for (std::size_t s = 0; s < c.series_names.size(); ++s) {
    nlohmann::json vals = nlohmann::json::array();
    for (double v : c.values[s]) vals.push_back(std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v));
    series.push_back({{"name", c.series_names[s]}, {"values", vals}});
  }
  return {{"kind", "bar"}, {"title", c.title}, {"y_label", c.y_label}, {"groups", c.groups}, {"series", series}};
}

Canvas::Canvas(int width, int height) : w_(width), h_(height), px_(static_cast<std::size_t>(width * height * 3), 0xff) {}

void Canvas::set(int x, int y, std::uint32_t rgb) {
  if (x < 0 || y < 0 || x >= w_ || y >= h_) return;
  auto* p = &px_[static_cast<std::size_t>((y * w_ + x) * 3)];
  p[0] = static_cast<std::uint8_t>(rgb >> 16);
  p[1] = static_cast<std::uint8_t>(rgb >> 8);
  p[2] = static_cast<std::uint8_t>(rgb);
}

std::uint32_t Canvas::get(int x, int y) const {
  const auto* p = &px_[static_cast<std::size_t>((y * w_ + x) * 3)];
  return (static_cast<std::uint32_t>(p[0]) << 16) | (static_cast<std::uint32_t>(p[1]) << 8) | p[2];
}

void Canvas::fill_rect(int x0, int y0, int x1, int y1, std::uint32_t rgb) {
  if (x0 > x1) std::swap(x0, x1);
  if (y0 > y1) std::swap(y0, y1);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) set(x, y, rgb);
}

void Canvas::line(int x0, int y0, int x1, int y1, std::uint32_t rgb, int thickness) {
  const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  const int r = thickness / 2;
  while (true) {
    fill_rect(x0 - r, y0 - r, x0 + (thickness - 1 - r), y0 + (thickness - 1 - r), rgb);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

void Canvas::text(int x, int y, const std::string& s, std::uint32_t rgb, int scale) {
  const auto& f = font();
  for (char ch : s) {
    const char up = (ch >= 'a' && ch <= 'z') ? static_cast<char>(ch - 'a' + 'A') : ch;
    const auto it = f.find(up);
    if (it != f.end()) {
      for (int row = 0; row < 7; ++row)
        for (int col = 0; col < 5; ++col) {
          if (it->second[static_cast<std::size_t>(row)] & (0x10 >> col)) {
            fill_rect(x + col * scale, y + row * scale, x + col * scale + scale - 1, y + row * scale + scale - 1, rgb);
          }
        }
    }
    x += 6 * scale;
  }
}

int Canvas::text_width(const std::string& s, int scale) { return static_cast<int>(s.size()) * 6 * scale; }

void Canvas::write_png(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  FILE* fp = std::fopen(tmp.c_str(), "wb");
  if (!fp) throw std::runtime_error("cannot write " + tmp.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw std::runtime_error("libpng failed writing " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w_), static_cast<png_uint_32>(h_), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < h_; ++y) {
    png_write_row(png, const_cast<png_bytep>(&px_[static_cast<std::size_t>(y * w_ * 3)]));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
  std::filesystem::rename(tmp, path);
}

Canvas render(const LineChart& c) {
  Canvas cv(640, 420);
  Frame f;
  f.right = cv.width() - 20;
  f.bottom = cv.height() - 40;
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
  for (const auto& s : c.series) {
    for (double v : s.x) xmin = std::min(xmin, v), xmax = std::max(xmax, v);
    for (double v : s.y) ymin = std::min(ymin, v), ymax = std::max(ymax, v);
  }
  if (!(xmin <= xmax)) xmin = 0, xmax = 1;
  if (xmin == xmax) xmin -= 0.5, xmax += 0.5;
  if (c.unit_y || !(ymin <= ymax)) {
    ymin = 0, ymax = 1;
  } else {
    ymin = std::min(0.0, ymin);
    ymax = ymax > ymin ? ymax * 1.05 : ymin + 1.0;
  }
  f.x0 = xmin, f.x1 = xmax, f.y0 = ymin, f.y1 = ymax;
  draw_frame(cv, f, c.title, c.x_label, c.y_label, true);
  std::vector<std::string> names;
  for (std::size_t i = 0; i < c.series.size(); ++i) {
    const auto& s = c.series[i];
    const auto col = kPalette[i % kPalette.size()];
    for (std::size_t k = 0; k < s.x.size(); ++k) {
      const int x = f.px(s.x[k]), y = f.py(s.y[k]);
      cv.fill_rect(x - 2, y - 2, x + 2, y + 2, col);
      if (k > 0) cv.line(f.px(s.x[k - 1]), f.py(s.y[k - 1]), x, y, col, 2);
    }
    names.push_back(s.name);
  }
  draw_legend(cv, f, names);
  return cv;
}

Canvas render(const BarChart& c) {
  Canvas cv(std::max(640, 90 + 60 * static_cast<int>(c.groups.size())), 460);
  Frame f;
  f.right = cv.width() - 20;
  f.bottom = cv.height() - 90;
  f.y0 = 0.0, f.y1 = 1.0;
  draw_frame(cv, f, c.title, "", c.y_label, false);
  const double group_w = static_cast<double>(f.right - f.left) / std::max<std::size_t>(1, c.groups.size());
  const double bar_w = group_w * 0.8 / std::max<std::size_t>(1, c.series_names.size());
  for (std::size_t g = 0; g < c.groups.size(); ++g) {
    const double gx = f.left + group_w * static_cast<double>(g) + group_w * 0.1;
    for (std::size_t s = 0; s < c.series_names.size(); ++s) {
      const double v = c.values[s][g];
      if (std::isnan(v)) continue;
      const int x0 = static_cast<int>(gx + bar_w * static_cast<double>(s));
      cv.fill_rect(x0, f.py(v), x0 + std::max(1, static_cast<int>(bar_w) - 2), f.bottom - 1, kPalette[s % kPalette.size()]);
    }
    // Vertical group label, one character per row.
    const int cx = static_cast<int>(gx + group_w * 0.4) - 2;
    int y = f.bottom + 6;
    for (char ch : c.groups[g]) {
      if (y > cv.height() - 10) break;
      cv.text(cx, y, std::string(1, ch), kBlack);
      y += 8;
    }
  }
  draw_legend(cv, f, c.series_names);
  return cv;
}

FigureReport emit_figures(const std::vector<MetricsRecord>& records, const std::filesystem::path& out_dir) {
  if (records.empty()) throw ConfigError("metrics store is empty; nothing to plot");
  FigureReport report;
  std::vector<const MetricsRecord*> curve_acc, curve_loss, fgsm_rows, pgd_rows, corr_rows;
  for (const auto& r : records) {
    if (r.warning) continue;
    if (r.epoch) {
      if (r.n_samples > 0) curve_acc.push_back(&r);
      if (r.loss) curve_loss.push_back(&r);
      continue;
    }
    if (r.corruption_tag) {
      if (!r.attack_tag) corr_rows.push_back(&r);
      continue;
    }
    if (r.attack_tag && r.epsilon) {
      if (*r.attack_tag == "fgsm") fgsm_rows.push_back(&r);
      if (*r.attack_tag == "pgd") pgd_rows.push_back(&r);
    }
  }
  const auto epoch_of = [](const MetricsRecord& r) { return static_cast<double>(*r.epoch); };
  const auto eps_of = [](const MetricsRecord& r) { return *r.epsilon; };
  const auto acc_of = [](const MetricsRecord& r) { return r.accuracy; };
  const auto loss_of = [](const MetricsRecord& r) { return *r.loss; };

  const auto line = [&](const std::string& stem, LineChart chart, const std::vector<const MetricsRecord*>& rows,
                        double (*xf)(const MetricsRecord&), double (*yf)(const MetricsRecord&)) {
    if (rows.empty()) {
      report.warnings.push_back(stem + ": no matching records, figure skipped");
      return;
    }
    chart.series = collect(rows, xf, yf);
    write_figure(out_dir, stem, render(chart), to_json(chart), report);
  };
  line("accuracy_vs_epoch", {"Accuracy over epochs", "epoch", "accuracy", {}, true}, curve_acc, epoch_of, acc_of);
  line("loss_vs_epoch", {"Loss over epochs", "epoch", "loss", {}, false}, curve_loss, epoch_of, loss_of);
  line("fgsm_sweep", {"FGSM accuracy vs epsilon", "epsilon", "accuracy", {}, true}, fgsm_rows, eps_of, acc_of);
  line("pgd_sweep", {"PGD accuracy vs epsilon", "epsilon", "accuracy", {}, true}, pgd_rows, eps_of, acc_of);

  if (corr_rows.empty()) {
    report.warnings.push_back("corruption_bars: no matching records, figure skipped");
  } else {
    BarChart bars{"Accuracy per corruption", "accuracy", {}, {}, {}};
    std::map<std::string, std::size_t> gi, si;
    for (const auto* r : corr_rows) {
      if (gi.emplace(*r->corruption_tag, bars.groups.size()).second) bars.groups.push_back(*r->corruption_tag);
      if (si.emplace(r->model_tag, bars.series_names.size()).second) bars.series_names.push_back(r->model_tag);
    }
    bars.values.assign(bars.series_names.size(),
                       std::vector<double>(bars.groups.size(), std::numeric_limits<double>::quiet_NaN()));
    for (const auto* r : corr_rows) bars.values[si[r->model_tag]][gi[*r->corruption_tag]] = r->accuracy;
    write_figure(out_dir, "corruption_bars", render(bars), to_json(bars), report);
  }
  return report;
}

}  // namespace limeguard
