// Copyright 2026 The mclab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace mclab::evaluation {

/// Rows are samples, columns are classes; entries are 0 or 1.
using LabelMatrix = std::vector<std::vector<std::uint8_t>>;

LabelMatrix one_hot(const std::vector<int>& labels, int n_classes);

/// Probability that a random positive outscores a random negative, ties
/// counted as one half. Throws UndefinedMetricError unless both labels occur.
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);
/// Unweighted mean of the one-vs-rest AUROC of every column.
double macro_auroc(const Eigen::MatrixXd& scores, const LabelMatrix& targets);

/// Non-interpolated average precision. Samples are walked in descending score
/// order; equal scores keep their input order.
double aupr(const std::vector<double>& scores, const std::vector<int>& labels);
double macro_aupr(const Eigen::MatrixXd& scores, const LabelMatrix& targets);

struct RetrievalResult {
  std::vector<int> ks;
  std::vector<double> recall;  // one per K
  double mean_recall = 0;
  /// 0-based rank of the best correct target, per query.
  std::vector<std::size_t> best_rank;

  [[nodiscard]] double at(int k) const;
};

/// Ranks every target by dot product (cosine on unit rows) descending, ties by
/// target id ascending, and counts queries with at least one correct target
/// among the top K. With `exclude_self`, a target whose id equals the query id
/// is dropped from that query's candidates.
RetrievalResult recall_at_k(const std::vector<std::string>& query_ids, const Eigen::MatrixXf& queries,
                            const std::vector<std::string>& target_ids, const Eigen::MatrixXf& targets,
                            const std::map<std::string, std::set<std::string>>& ground_truth,
                            const std::vector<int>& ks = {1, 5, 10}, bool exclude_self = false);

struct Interval {
  double mean = 0;
  double se = 0;
  double low = 0;
  double high = 0;
  std::size_t n = 0;
};

/// mean +- 1.96 standard errors, with the n-1 sample variance.
Interval confidence_interval(const std::vector<double>& values);

/// Two-sided p-value of a paired t-test or, unpaired, Welch's test. When the
/// relevant variance is zero (to rounding) the p-value is 1 for equal means
/// and 0 otherwise.
double two_sided_t_test(const std::vector<double>& a, const std::vector<double>& b, bool paired);

}  // namespace mclab::evaluation
