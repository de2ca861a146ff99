// Copyright 2026 The mclab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mclab/evaluation.hpp"

namespace mclab::report {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  std::vector<double> err;  // optional symmetric error bar per point
};

/// Minimal standalone SVG line chart.
std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series);
/// Horizontal bars with interval whiskers, one per labelled value.
std::string bar_chart_svg(const std::string& title, const std::vector<std::string>& labels,
                          const std::vector<double>& values, const std::vector<double>& low,
                          const std::vector<double>& high);

/// Fixed-width text table of metric reports.
std::string metric_table(const std::vector<evaluation::MetricReport>& reports);

struct ReportOutput {
  std::size_t n_metrics = 0;
  std::filesystem::path table;
  std::vector<std::filesystem::path> plots;
};

/// Reads every metric report line under `in_dir` (and any training log found
/// there), writes the table to `out_file` and the plots next to it. Throws
/// DataError when no metric line is found.
ReportOutput render_report(const std::filesystem::path& in_dir, const std::filesystem::path& out_file);

}  // namespace mclab::report
