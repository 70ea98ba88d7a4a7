#pragma once

#include <string>
#include <vector>

namespace skelmamba {

struct PlotSeries {
  std::string name;
  std::vector<double> x, y;
};

// Minimal dependency-free line plot written as an SVG file.
void write_svg_plot(const std::string& path, const std::string& title,
                    const std::string& xlabel, const std::string& ylabel,
                    const std::vector<PlotSeries>& series);

// Reads a metrics JSON-lines log and renders loss_curve.svg and
// accuracy_curve.svg into out_dir. Throws DataError when the file is
// missing and ConfigError when it holds no records.
std::vector<std::string> plot_metrics(const std::string& metrics_path,
                                      const std::string& out_dir);

// Sweep directory: subdirectories each holding config_snapshot.json (for
// model.frames) and metrics.jsonl. Renders frames_accuracy.svg with one
// point per subdirectory and returns its path.
std::string plot_frames_sweep(const std::string& sweep_dir,
                              const std::string& out_dir);

}  // namespace skelmamba
