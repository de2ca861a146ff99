// Copyright 2026 The mclab Authors
// SPDX-License-Identifier: Apache-2.0

#include "mclab/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mclab/errors.hpp"

namespace mclab::report {

using json = nlohmann::json;

namespace {

constexpr double kWidth = 640, kHeight = 400, kLeft = 70, kRight = 150, kTop = 40, kBottom = 50;
const char* const kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

}  // namespace

std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series) {
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      const double e = i < s.err.size() ? s.err[i] : 0.0;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i] - e);
      y1 = std::max(y1, s.y[i] + e);
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
  auto px = [&](double x) { return kLeft + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return kTop + (1.0 - (y - y0) / (y1 - y0)) * ph; };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(title) << "</text>\n";
  o << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double yv = y0 + (y1 - y0) * t / 4.0, xv = x0 + (x1 - x0) * t / 4.0;
    o << "<text x=\"" << kLeft - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << num(yv) << "</text>\n";
    o << "<text x=\"" << px(xv) << "\" y=\"" << kTop + ph + 16 << "\" text-anchor=\"middle\">" << num(xv) << "</text>\n";
  }
  o << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kHeight - 10 << "\" text-anchor=\"middle\">" << escape(x_label)
    << "</text>\n";
  o << "<text x=\"16\" y=\"" << kTop + ph / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " << kTop + ph / 2
    << ")\">" << escape(y_label) << "</text>\n";
  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const char* color = kColors[si % std::size(kColors)];
    o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) o << px(s.x[i]) << ',' << py(s.y[i]) << ' ';
    o << "\"/>\n";
    for (std::size_t i = 0; i < s.err.size() && i < s.x.size(); ++i)
      o << "<line x1=\"" << px(s.x[i]) << "\" x2=\"" << px(s.x[i]) << "\" y1=\"" << py(s.y[i] - s.err[i]) << "\" y2=\""
        << py(s.y[i] + s.err[i]) << "\" stroke=\"" << color << "\"/>\n";
    o << "<text x=\"" << kLeft + pw + 10 << "\" y=\"" << kTop + 14 + 16 * static_cast<double>(si) << "\" fill=\"" << color
      << "\">" << escape(s.label) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::string bar_chart_svg(const std::string& title, const std::vector<std::string>& labels,
                          const std::vector<double>& values, const std::vector<double>& low,
                          const std::vector<double>& high) {
  const double row = 18, left = 260, width = 720, plot = width - left - 40;
  const double height = kTop + row * static_cast<double>(labels.size()) + 30;
  double lo = 0, hi = 1;
  for (std::size_t i = 0; i < values.size(); ++i) {
    lo = std::min({lo, values[i], low[i]});
    hi = std::max({hi, values[i], high[i]});
  }
  auto px = [&](double v) { return left + (v - lo) / (hi - lo) * plot; };
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(title) << "</text>\n";
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double y = kTop + row * static_cast<double>(i);
    o << "<text x=\"" << left - 6 << "\" y=\"" << y + 12 << "\" text-anchor=\"end\">" << escape(labels[i]) << "</text>\n";
    o << "<rect x=\"" << px(std::min(0.0, values[i])) << "\" y=\"" << y + 3 << "\" width=\""
      << std::fabs(px(values[i]) - px(0.0)) << "\" height=\"" << row - 6 << "\" fill=\"" << kColors[0] << "\"/>\n";
    o << "<line x1=\"" << px(low[i]) << "\" x2=\"" << px(high[i]) << "\" y1=\"" << y + row / 2 << "\" y2=\"" << y + row / 2
      << "\" stroke=\"black\"/>\n";
    o << "<text x=\"" << px(std::max(values[i], high[i])) + 4 << "\" y=\"" << y + 12 << "\">" << num(values[i]) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::string metric_table(const std::vector<evaluation::MetricReport>& reports) {
  std::vector<std::vector<std::string>> rows = {
      {"protocol", "dataset", "metric", "n/class", "seed", "value", "ci_low", "ci_high", "n", "p_value"}};
  for (const auto& r : reports)
    rows.push_back({r.protocol, r.dataset, r.metric, r.n_per_class ? std::to_string(*r.n_per_class) : "-",
                    r.seed ? std::to_string(*r.seed) : "-", num(r.value), num(r.ci_low), num(r.ci_high),
                    std::to_string(r.n), r.p_value ? num(*r.p_value) : "-"});
  std::vector<std::size_t> width(rows[0].size(), 0);
  for (const auto& row : rows)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  std::ostringstream o;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      o << rows[r][c] << std::string(width[c] - rows[r][c].size(), ' ');
      o << (c + 1 < rows[r].size() ? "  " : "\n");
    }
    if (r == 0) {
      for (std::size_t c = 0; c < width.size(); ++c) o << std::string(width[c], '-') << (c + 1 < width.size() ? "  " : "\n");
    }
  }
  return o.str();
}

namespace {

bool looks_like_report(const json& j) {
  return j.is_object() && j.contains("protocol") && j.contains("metric") && j.contains("value");
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace

ReportOutput render_report(const std::filesystem::path& in_dir, const std::filesystem::path& out_file) {
  if (!std::filesystem::is_directory(in_dir)) throw DataError("report input " + in_dir.string() + " is not a directory");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(in_dir))
    if (e.is_regular_file() && e.path().extension() == ".jsonl") files.push_back(e.path());
  std::sort(files.begin(), files.end());

  std::vector<evaluation::MetricReport> reports;
  std::vector<Series> loss(4);
  loss[0].label = "total";
  loss[1].label = "img-text";
  loss[2].label = "img-img";
  loss[3].label = "recon";
  for (const auto& f : files) {
    std::ifstream in(f);
    std::string line;
    const bool train_log = f.filename() == "train.jsonl";
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      json j;
      try {
        j = json::parse(line);
      } catch (const json::exception&) {
        throw ParseError(f.string() + ": malformed line");
      }
      if (looks_like_report(j)) {
        reports.push_back(j.get<evaluation::MetricReport>());
      } else if (train_log && j.contains("step") && j.contains("total")) {
        const double step = j.at("step").get<double>();
        const char* keys[] = {"total", "l_img_text", "l_img_img", "l_recon"};
        for (int k = 0; k < 4; ++k) {
          loss[static_cast<std::size_t>(k)].x.push_back(step);
          loss[static_cast<std::size_t>(k)].y.push_back(j.at(keys[k]).get<double>());
        }
      }
    }
  }
  if (reports.empty()) throw DataError("no metric report lines found under " + in_dir.string());

  ReportOutput out;
  out.n_metrics = reports.size();
  out.table = out_file;
  if (out_file.has_parent_path()) std::filesystem::create_directories(out_file.parent_path());
  write_file(out_file, metric_table(reports));
  const auto stem = out_file.parent_path() / out_file.stem();

  std::vector<std::string> labels;
  std::vector<double> values, low, high;
  for (const auto& r : reports) {
    if (r.seed) continue;
    labels.push_back(r.protocol + " " + r.metric + (r.n_per_class ? " n=" + std::to_string(*r.n_per_class) : ""));
    values.push_back(r.value);
    low.push_back(r.ci_low);
    high.push_back(r.ci_high);
  }
  auto metrics_svg = std::filesystem::path(stem.string() + "_metrics.svg");
  write_file(metrics_svg, bar_chart_svg("Metrics with 95% CI", labels, values, low, high));
  out.plots.push_back(metrics_svg);

  std::map<std::string, Series> shots;
  for (const auto& r : reports)
    if (r.protocol == "fewshot" && r.n_per_class && !r.seed) {
      auto& s = shots[r.dataset + " " + r.metric];
      s.label = r.dataset;
      s.x.push_back(*r.n_per_class);
      s.y.push_back(r.value);
      s.err.push_back(r.ci_high - r.value);
    }
  if (!shots.empty()) {
    std::vector<Series> series;
    for (auto& [k, s] : shots) series.push_back(s);
    auto path = std::filesystem::path(stem.string() + "_fewshot.svg");
    write_file(path, line_chart_svg("Few-shot macro AUROC", "examples per class", "macro AUROC", series));
    out.plots.push_back(path);
  }
  if (!loss[0].x.empty()) {
    auto path = std::filesystem::path(stem.string() + "_loss.svg");
    write_file(path, line_chart_svg("Pretraining loss", "step", "loss", loss));
    out.plots.push_back(path);
  }
  return out;
}

}  // namespace mclab::report
