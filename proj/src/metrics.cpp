// Copyright 2026 The mclab Authors
// SPDX-License-Identifier: Apache-2.0

#include "mclab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <boost/math/distributions/students_t.hpp>

#include "mclab/errors.hpp"

namespace mclab::evaluation {

LabelMatrix one_hot(const std::vector<int>& labels, int n_classes) {
  LabelMatrix out(labels.size(), std::vector<std::uint8_t>(static_cast<std::size_t>(n_classes), 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= n_classes)
      throw DataError("label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(n_classes) + ")");
    out[i][static_cast<std::size_t>(labels[i])] = 1;
  }
  return out;
}

namespace {

void check_binary(const std::vector<double>& scores, const std::vector<int>& labels, const char* metric) {
  if (scores.size() != labels.size())
    throw DimensionError(std::string(metric) + ": " + std::to_string(scores.size()) + " scores for " +
                         std::to_string(labels.size()) + " labels");
  bool pos = false, neg = false;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw DataError(std::string(metric) + ": labels must be 0 or 1");
    if (!std::isfinite(scores[i])) throw NumericError(std::string(metric) + ": non-finite score");
    (labels[i] ? pos : neg) = true;
  }
  if (!pos || !neg) throw UndefinedMetricError(std::string(metric) + " is undefined when only one class is present");
}

std::vector<double> column(const Eigen::MatrixXd& m, Eigen::Index c) {
  std::vector<double> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) out[static_cast<std::size_t>(r)] = m(r, c);
  return out;
}

std::vector<int> column(const LabelMatrix& t, std::size_t c) {
  std::vector<int> out(t.size());
  for (std::size_t r = 0; r < t.size(); ++r) out[r] = t[r][c];
  return out;
}

template <typename Metric>
double macro(const Eigen::MatrixXd& scores, const LabelMatrix& targets, Metric metric, const char* name) {
  if (static_cast<std::size_t>(scores.rows()) != targets.size())
    throw DimensionError(std::string(name) + ": score rows and target rows differ");
  if (scores.cols() == 0) throw UndefinedMetricError(std::string(name) + ": no classes");
  for (const auto& row : targets)
    if (static_cast<Eigen::Index>(row.size()) != scores.cols())
      throw DimensionError(std::string(name) + ": target width differs from score width");
  double sum = 0;
  for (Eigen::Index c = 0; c < scores.cols(); ++c)
    sum += metric(column(scores, c), column(targets, static_cast<std::size_t>(c)));
  return sum / static_cast<double>(scores.cols());
}

}  // namespace

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_binary(scores, labels, "AUROC");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the Mann-Whitney statistic, kept integral: 2 per won pair, 1 per tie.
  std::uint64_t twice_wins = 0, neg_below = 0, n_pos = 0, n_neg = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::uint64_t pos = 0, neg = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] ? pos : neg) += 1;
      ++j;
    }
    twice_wins += 2 * pos * neg_below + pos * neg;
    neg_below += neg;
    n_pos += pos;
    n_neg += neg;
    i = j;
  }
  return static_cast<double>(twice_wins) / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double macro_auroc(const Eigen::MatrixXd& scores, const LabelMatrix& targets) {
  return macro(scores, targets, [](const auto& s, const auto& l) { return auroc(s, l); }, "AUROC");
}

double aupr(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_binary(scores, labels, "AUPR");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double sum = 0;
  std::size_t tp = 0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (!labels[order[r]]) continue;
    ++tp;
    sum += static_cast<double>(tp) / static_cast<double>(r + 1);
  }
  return sum / static_cast<double>(tp);
}

double macro_aupr(const Eigen::MatrixXd& scores, const LabelMatrix& targets) {
  return macro(scores, targets, [](const auto& s, const auto& l) { return aupr(s, l); }, "AUPR");
}

double RetrievalResult::at(int k) const {
  for (std::size_t i = 0; i < ks.size(); ++i)
    if (ks[i] == k) return recall[i];
  throw ConfigError("recall at K=" + std::to_string(k) + " was not computed");
}

RetrievalResult recall_at_k(const std::vector<std::string>& query_ids, const Eigen::MatrixXf& queries,
                            const std::vector<std::string>& target_ids, const Eigen::MatrixXf& targets,
                            const std::map<std::string, std::set<std::string>>& ground_truth,
                            const std::vector<int>& ks, bool exclude_self) {
  if (static_cast<Eigen::Index>(query_ids.size()) != queries.rows() ||
      static_cast<Eigen::Index>(target_ids.size()) != targets.rows())
    throw DimensionError("recall_at_k: id count differs from embedding rows");
  if (queries.rows() > 0 && targets.rows() > 0 && queries.cols() != targets.cols())
    throw DimensionError("recall_at_k: query and target dimensions differ");
  if (query_ids.empty()) throw DataError("recall_at_k: no queries");
  if (ks.empty()) throw ConfigError("recall_at_k: empty K list");
  for (int k : ks)
    if (k < 1) throw ConfigError("recall_at_k: K must be positive");

  std::vector<std::size_t> by_id(target_ids.size());
  std::iota(by_id.begin(), by_id.end(), 0);
  std::sort(by_id.begin(), by_id.end(), [&](std::size_t a, std::size_t b) { return target_ids[a] < target_ids[b]; });

  const Eigen::MatrixXd t_rows = targets.cast<double>();
  const Eigen::MatrixXd q_rows = queries.cast<double>();
  std::vector<std::size_t> hits(ks.size(), 0);
  std::vector<std::size_t> best_rank;
  for (std::size_t q = 0; q < query_ids.size(); ++q) {
    const auto& qid = query_ids[q];
    auto gt = ground_truth.find(qid);
    if (gt == ground_truth.end() || gt->second.empty()) throw DataError("query " + qid + " has no correct target");
    const Eigen::VectorXd sim = t_rows * q_rows.row(static_cast<Eigen::Index>(q)).transpose();
    std::vector<std::size_t> order;
    order.reserve(by_id.size());
    for (auto t : by_id)
      if (!(exclude_self && target_ids[t] == qid)) order.push_back(t);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return sim(static_cast<Eigen::Index>(a)) > sim(static_cast<Eigen::Index>(b));
    });
    std::size_t best = order.size();
    for (std::size_t r = 0; r < order.size(); ++r)
      if (gt->second.count(target_ids[order[r]])) {
        best = r;
        break;
      }
    if (best == order.size()) throw DataError("query " + qid + " has no correct target in the target store");
    best_rank.push_back(best);
    for (std::size_t i = 0; i < ks.size(); ++i)
      if (best < static_cast<std::size_t>(ks[i])) ++hits[i];
  }
  RetrievalResult r;
  r.ks = ks;
  r.best_rank = std::move(best_rank);
  double sum = 0;
  for (std::size_t i = 0; i < ks.size(); ++i) {
    r.recall.push_back(static_cast<double>(hits[i]) / static_cast<double>(query_ids.size()));
    sum += r.recall.back();
  }
  r.mean_recall = sum / static_cast<double>(ks.size());
  return r;
}

Interval confidence_interval(const std::vector<double>& values) {
  if (values.size() < 2) throw DataError("confidence interval needs at least 2 values");
  Interval ci;
  ci.n = values.size();
  const double n = static_cast<double>(values.size());
  ci.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0;
  for (double v : values) ss += (v - ci.mean) * (v - ci.mean);
  ci.se = std::sqrt(ss / (n - 1)) / std::sqrt(n);
  ci.low = ci.mean - 1.96 * ci.se;
  ci.high = ci.mean + 1.96 * ci.se;
  return ci;
}

namespace {

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

double var_of(const std::vector<double>& v, double mean) {
  double ss = 0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return ss / static_cast<double>(v.size() - 1);
}

double t_tail(double t, double df) {
  boost::math::students_t dist(df);
  const double p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(t)));
  return std::clamp(p, 0.0, 1.0);
}

}  // namespace

double two_sided_t_test(const std::vector<double>& a, const std::vector<double>& b, bool paired) {
  double scale = 0;
  for (const auto* v : {&a, &b})
    for (double x : *v) {
      if (!std::isfinite(x)) throw NumericError("t-test: non-finite value");
      scale = std::max(scale, std::abs(x));
    }
  // Spreads and mean gaps at rounding level count as exactly zero.
  const double tiny = 1e-12 * std::max(scale, 1e-300);
  if (paired) {
    if (a.size() != b.size()) throw DataError("paired t-test needs samples of equal length");
    if (a.size() < 2) throw DataError("paired t-test needs at least 2 pairs");
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    const double m = mean_of(d);
    const double var = var_of(d, m);
    if (std::sqrt(var) <= tiny) return std::abs(m) <= tiny ? 1.0 : 0.0;
    const double n = static_cast<double>(d.size());
    return t_tail(m / std::sqrt(var / n), n - 1);
  }
  if (a.size() < 2 || b.size() < 2) throw DataError("Welch t-test needs at least 2 values per sample");
  const double ma = mean_of(a), mb = mean_of(b);
  const double va = var_of(a, ma) / static_cast<double>(a.size());
  const double vb = var_of(b, mb) / static_cast<double>(b.size());
  if (std::sqrt(va + vb) <= tiny) return std::abs(ma - mb) <= tiny ? 1.0 : 0.0;
  const double t = (ma - mb) / std::sqrt(va + vb);
  const double df = (va + vb) * (va + vb) /
                    (va * va / static_cast<double>(a.size() - 1) + vb * vb / static_cast<double>(b.size() - 1));
  return t_tail(t, df);
}

}  // namespace mclab::evaluation
