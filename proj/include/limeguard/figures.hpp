#pragma once

// PNG figures rendered from metrics records, each with a JSON sidecar that
// holds exactly the plotted values.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "limeguard/eval.hpp"

namespace limeguard {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct LineChart {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
  bool unit_y = false;  // fix the y axis to [0, 1]
};

struct BarChart {
  std::string title;
  std::string y_label;
  std::vector<std::string> groups;
  std::vector<std::string> series_names;
  std::vector<std::vector<double>> values;  // [series][group]
};

nlohmann::json to_json(const LineChart& c);
nlohmann::json to_json(const BarChart& c);

/// RGB raster with just enough drawing for axes, polylines, bars and a 5x7 font.
class Canvas {
 public:
  Canvas(int width, int height);
  int width() const { return w_; }
  int height() const { return h_; }
  void set(int x, int y, std::uint32_t rgb);
  std::uint32_t get(int x, int y) const;
  void fill_rect(int x0, int y0, int x1, int y1, std::uint32_t rgb);
  void line(int x0, int y0, int x1, int y1, std::uint32_t rgb, int thickness = 1);
  void text(int x, int y, const std::string& s, std::uint32_t rgb, int scale = 1);
  static int text_width(const std::string& s, int scale = 1);
  void write_png(const std::filesystem::path& path) const;

 private:
  int w_, h_;
  std::vector<std::uint8_t> px_;
};

Canvas render(const LineChart& c);
Canvas render(const BarChart& c);

struct FigureReport {
  std::vector<std::filesystem::path> files;  // PNGs, each with a .json sidecar next to it
  std::vector<std::string> warnings;
};

/// Writes accuracy_vs_epoch, loss_vs_epoch, fgsm_sweep, pgd_sweep and
/// corruption_bars for whichever series exist in records; absent series are
/// reported as warnings. Throws ConfigError when records is empty.
FigureReport emit_figures(const std::vector<MetricsRecord>& records, const std::filesystem::path& out_dir);

}  // namespace limeguard
