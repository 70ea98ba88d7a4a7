#include "skelmamba/plot.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "skelmamba/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace skelmamba {

namespace {

const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c",
                         "#9467bd", "#ff7f0e", "#8c564b"};

std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

}  // namespace

void write_svg_plot(const std::string& path, const std::string& title,
                    const std::string& xlabel, const std::string& ylabel,
                    const std::vector<PlotSeries>& series) {
  const double W = 640, H = 420;
  const double ml = 64, mr = 140, mt = 40, mb = 48;  // margins
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& s : series) {
    for (double v : s.x) {
      xmin = std::min(xmin, v);
      xmax = std::max(xmax, v);
    }
    for (double v : s.y) {
      ymin = std::min(ymin, v);
      ymax = std::max(ymax, v);
    }
  }
  if (series.empty() || xmin > xmax) {
    throw ConfigError("plot: nothing to draw");
  }
  if (xmax == xmin) {
    xmax = xmin + 1;
  }
  if (ymax == ymin) {
    ymax = ymin + 1;
    ymin -= 1;
  } else {
    const double pad = 0.05 * (ymax - ymin);
    ymin -= pad;
    ymax += pad;
  }
  auto sx = [&](double v) {
    return ml + (v - xmin) / (xmax - xmin) * (W - ml - mr);
  };
  auto sy = [&](double v) {
    return H - mb - (v - ymin) / (ymax - ymin) * (H - mt - mb);
  };

  std::ostringstream svg;
  svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W
      << "' height='" << H << "' viewBox='0 0 " << W << " " << H << "'>\n";
  svg << "<rect width='100%' height='100%' fill='white'/>\n";
  svg << "<text x='" << W / 2 << "' y='22' font-size='15' text-anchor='middle'>"
      << title << "</text>\n";

  // axes and ticks
  svg << "<line x1='" << ml << "' y1='" << H - mb << "' x2='" << W - mr
      << "' y2='" << H - mb << "' stroke='black'/>\n";
  svg << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='"
      << H - mb << "' stroke='black'/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double fx = xmin + (xmax - xmin) * i / 5.0;
    const double fy = ymin + (ymax - ymin) * i / 5.0;
    svg << "<text x='" << sx(fx) << "' y='" << H - mb + 18
        << "' font-size='11' text-anchor='middle'>" << fmt(fx) << "</text>\n";
    svg << "<text x='" << ml - 8 << "' y='" << sy(fy) + 4
        << "' font-size='11' text-anchor='end'>" << fmt(fy) << "</text>\n";
    svg << "<line x1='" << ml << "' y1='" << sy(fy) << "' x2='" << W - mr
        << "' y2='" << sy(fy) << "' stroke='#dddddd'/>\n";
  }
  svg << "<text x='" << (ml + W - mr) / 2 << "' y='" << H - 10
      << "' font-size='12' text-anchor='middle'>" << xlabel << "</text>\n";
  svg << "<text x='16' y='" << (mt + H - mb) / 2
      << "' font-size='12' text-anchor='middle' transform='rotate(-90 16 "
      << (mt + H - mb) / 2 << ")'>" << ylabel << "</text>\n";

  for (size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const char* color = kColors[si % 6];
    svg << "<polyline fill='none' stroke='" << color
        << "' stroke-width='1.8' points='";
    for (size_t i = 0; i < s.x.size(); ++i) {
      svg << sx(s.x[i]) << "," << sy(s.y[i]) << " ";
    }
    svg << "'/>\n";
    for (size_t i = 0; i < s.x.size(); ++i) {
      svg << "<circle cx='" << sx(s.x[i]) << "' cy='" << sy(s.y[i])
          << "' r='3' fill='" << color << "'/>\n";
    }
    svg << "<text x='" << W - mr + 10 << "' y='" << mt + 16 + 18 * si
        << "' font-size='12' fill='" << color << "'>" << s.name << "</text>\n";
  }
  svg << "</svg>\n";

  std::ofstream f(path);
  if (!f) throw DataError("cannot write plot " + path);
  f << svg.str();
}

std::vector<std::string> plot_metrics(const std::string& metrics_path,
                                      const std::string& out_dir) {
  std::ifstream f(metrics_path);
  if (!f) throw DataError("cannot open metrics log " + metrics_path);
  PlotSeries loss{"train_loss", {}, {}};
  PlotSeries tacc{"train_acc", {}, {}};
  PlotSeries eacc{"eval_acc", {}, {}};
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const std::exception& e) {
      throw DataError("metrics log: bad record: " + std::string(e.what()));
    }
    const double ep = j.at("epoch").get<double>();
    loss.x.push_back(ep);
    loss.y.push_back(j.at("train_loss").get<double>());
    tacc.x.push_back(ep);
    tacc.y.push_back(j.at("train_acc").get<double>());
    eacc.x.push_back(ep);
    eacc.y.push_back(j.at("eval_acc").get<double>());
  }
  if (loss.x.empty()) {
    throw ConfigError("metrics log " + metrics_path + " holds no records");
  }
  fs::create_directories(out_dir);
  const std::string loss_path = out_dir + "/loss_curve.svg";
  const std::string acc_path = out_dir + "/accuracy_curve.svg";
  write_svg_plot(loss_path, "training loss", "epoch", "loss", {loss});
  write_svg_plot(acc_path, "accuracy", "epoch", "top-1", {tacc, eacc});
  return {loss_path, acc_path};
}

std::string plot_frames_sweep(const std::string& sweep_dir,
                              const std::string& out_dir) {
  std::vector<std::pair<double, std::pair<double, double>>> points;
  if (!fs::is_directory(sweep_dir)) {
    throw DataError("sweep directory " + sweep_dir + " does not exist");
  }
  for (const auto& entry : fs::directory_iterator(sweep_dir)) {
    if (!entry.is_directory()) continue;
    const std::string snap = entry.path().string() + "/config_snapshot.json";
    const std::string metrics = entry.path().string() + "/metrics.jsonl";
    if (!fs::exists(snap) || !fs::exists(metrics)) continue;
    std::ifstream sf(snap);
    json sj;
    sf >> sj;
    double frames = 0;
    if (sj.contains("model") && sj["model"].contains("frames")) {
      frames = std::stod(sj["model"]["frames"].get<std::string>());
    }
    double best_train = 0, best_eval = 0;
    std::ifstream mf(metrics);
    std::string line;
    while (std::getline(mf, line)) {
      if (line.empty()) continue;
      json j = json::parse(line);
      best_train = std::max(best_train, j.at("train_acc").get<double>());
      best_eval = std::max(best_eval, j.at("eval_acc").get<double>());
    }
    points.push_back({frames, {best_train, best_eval}});
  }
  if (points.empty()) {
    throw DataError("sweep directory " + sweep_dir +
                    " has no run subdirectories with metrics");
  }
  std::sort(points.begin(), points.end());
  PlotSeries tr{"best_train_acc", {}, {}}, ev{"best_eval_acc", {}, {}};
  for (auto& [f, accs] : points) {
    tr.x.push_back(f);
    tr.y.push_back(accs.first);
    ev.x.push_back(f);
    ev.y.push_back(accs.second);
  }
  fs::create_directories(out_dir);
  const std::string path = out_dir + "/frames_accuracy.svg";
  write_svg_plot(path, "accuracy vs frames", "frames", "top-1", {tr, ev});
  return path;
}

}  // namespace skelmamba
