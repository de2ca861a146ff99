// Copyright 2026 The mclab Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mclab/errors.hpp"
#include "mclab/metrics.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace mclab;
using namespace mclab::evaluation;
using mclab::testing::uniform_int;
using namespace mclab::testing::oracles;

TEST_CASE("auroc equals the pair-count oracle exactly") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const auto in = random_instance(rng);
    const double a = auroc(in.scores, in.labels);
    CHECK(a == auroc_oracle(in.scores, in.labels));
    std::vector<int> flipped;
    for (int v : in.labels) flipped.push_back(1 - v);
    CHECK(std::abs(auroc(in.scores, flipped) - (1.0 - a)) < 1e-12);
  }
}

TEST_CASE("auroc examples and errors") {
  CHECK(auroc({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}) == 0.75);
  CHECK(auroc({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}) == 1.0);
  CHECK(auroc({0.5, 0.5}, {0, 1}) == 0.5);
  CHECK_THROWS_AS(auroc({0.1, 0.2}, {1, 1}), UndefinedMetricError);
  CHECK_THROWS_AS(auroc({0.1, 0.2}, {0, 0}), UndefinedMetricError);
}

TEST_CASE("auroc is invariant under strictly increasing transforms") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 100; ++trial) {
    auto in = random_instance(rng);
    for (auto& s : in.scores) s += 0.01 * g(rng);
    const double base = auroc(in.scores, in.labels);
    std::vector<double> e, aff;
    for (double s : in.scores) {
      e.push_back(std::exp(s));
      aff.push_back(3.5 * s - 7.0);
    }
    CHECK(std::abs(auroc(e, in.labels) - base) < 1e-12);
    CHECK(std::abs(auroc(aff, in.labels) - base) < 1e-12);
  }
}

TEST_CASE("macro auroc averages one-vs-rest columns") {
  std::mt19937_64 rng(3);
  const int n = 40, k = 3;
  std::vector<int> labels;
  for (int i = 0; i < n; ++i) labels.push_back(i % k);
  Eigen::MatrixXd s(n, k);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < k; ++c) s(i, c) = std::uniform_real_distribution<double>(0, 1)(rng);
  const auto y = one_hot(labels, k);
  double expect = 0;
  for (int c = 0; c < k; ++c) {
    std::vector<double> col(s.col(c).data(), s.col(c).data() + n);
    std::vector<int> yc;
    for (int l : labels) yc.push_back(l == c);
    expect += auroc_oracle(col, yc) / k;
  }
  CHECK(std::abs(macro_auroc(s, y) - expect) < 1e-12);
  auto missing = one_hot(std::vector<int>(n, 0), k);
  CHECK_THROWS_AS(macro_auroc(s, missing), UndefinedMetricError);
}

TEST_CASE("average precision equals the rank-walk oracle exactly") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const auto in = random_instance(rng);
    CHECK(aupr(in.scores, in.labels) == ap_oracle(in.scores, in.labels));
  }
  CHECK(std::abs(aupr({0.9, 0.8, 0.7}, {1, 0, 1}) - 5.0 / 6.0) < 1e-12);
  CHECK(aupr({0.9, 0.8, 0.1}, {1, 1, 0}) == 1.0);
  CHECK_THROWS_AS(aupr({0.1, 0.2}, {0, 0}), UndefinedMetricError);
}

TEST_CASE("average precision of random scores tracks prevalence") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u;
  for (double prevalence : {0.1, 0.3, 0.5}) {
    double sum = 0;
    for (int trial = 0; trial < 1000; ++trial) {
      std::vector<double> s;
      std::vector<int> y;
      for (int i = 0; i < 200; ++i) {
        s.push_back(u(rng));
        y.push_back(u(rng) < prevalence);
      }
      y[0] = 1;
      y[1] = 0;
      sum += aupr(s, y);
    }
    CHECK(std::abs(sum / 1000 - prevalence) < 0.05);
  }
}

TEST_CASE("average precision with a positive ranked first stays above its worst case") {
  // With the top item positive, AP is smallest when the other P-1 positives
  // sit at the bottom: (1 + sum_{i=2..P} i / (n - P + i)) / P. That bound can
  // fall below prevalence, e.g. ranks 1,0,0,0,0,0,1,1,1,1,1,1 give AP 0.533
  // against prevalence 0.583.
  CHECK(aupr({12, 11, 10, 9, 8, 7, 6, 5, 4, 3, 2, 1}, {1, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1}) < 7.0 / 12.0);
  std::mt19937_64 rng(6);
  int checked = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const auto in = random_instance(rng);
    const auto top = std::max_element(in.scores.begin(), in.scores.end()) - in.scores.begin();
    if (in.labels[static_cast<std::size_t>(top)] != 1) continue;
    const int n = static_cast<int>(in.labels.size());
    const int p = std::accumulate(in.labels.begin(), in.labels.end(), 0);
    double worst = 1.0;
    for (int i = 2; i <= p; ++i) worst += static_cast<double>(i) / (n - p + i);
    worst /= p;
    CHECK(aupr(in.scores, in.labels) >= worst - 1e-12);
    CHECK(aupr(in.scores, in.labels) >= 1.0 / p);
    ++checked;
  }
  CHECK(checked > 50);
}

TEST_CASE("recall at K equals a full-sort oracle exactly") {
  std::mt19937_64 rng(7);
  const std::vector<int> ks = {1, 5, 10};
  for (int trial = 0; trial < 100; ++trial) {
    const bool self = trial % 2 == 1;
    const int d = uniform_int(rng, 1, 4);
    const Store targets = random_store("t", uniform_int(rng, 11, 30), d, rng);
    const Store queries = self ? targets : random_store("q", uniform_int(rng, 1, 20), d, rng);
    std::map<std::string, std::set<std::string>> gt;
    for (const auto& qid : queries.ids) {
      auto& set = gt[qid];
      while (set.empty())
        for (const auto& tid : targets.ids)
          if (tid != qid && uniform_int(rng, 0, 5) == 0) set.insert(tid);
    }
    const auto r = recall_at_k(queries.ids, queries.rows, targets.ids, targets.rows, gt, ks, self);
    const auto expect = recall_oracle(queries, targets, gt, ks, self);
    CHECK(r.recall == expect);
    CHECK(r.mean_recall == doctest::Approx((expect[0] + expect[1] + expect[2]) / 3.0).epsilon(1e-15));
    CHECK(r.recall[0] <= r.recall[1]);
    CHECK(r.recall[1] <= r.recall[2]);
    CHECK(r.at(5) == r.recall[1]);
  }
}

TEST_CASE("recall examples") {
  // Queries whose correct targets sit at ranks 1, 3 and 7.
  const int n_targets = 10;
  Eigen::MatrixXf targets = Eigen::MatrixXf::Zero(n_targets, n_targets);
  std::vector<std::string> tids;
  for (int j = 0; j < n_targets; ++j) {
    targets(j, j) = 1.0f;
    tids.push_back("t" + std::to_string(j));
  }
  Eigen::MatrixXf queries = Eigen::MatrixXf::Zero(3, n_targets);
  for (int j = 0; j < n_targets; ++j) queries.row(0)(j) = queries.row(1)(j) = queries.row(2)(j) = 1.0f - 0.05f * j;
  const std::map<std::string, std::set<std::string>> gt = {{"a", {"t0"}}, {"b", {"t2"}}, {"c", {"t6"}}};
  const auto r = recall_at_k({"a", "b", "c"}, queries, tids, targets, gt);
  CHECK(r.best_rank == std::vector<std::size_t>{0, 2, 6});
  CHECK(r.recall[0] == doctest::Approx(1.0 / 3.0));
  CHECK(r.recall[1] == doctest::Approx(2.0 / 3.0));
  CHECK(r.recall[2] == 1.0);
  CHECK(r.mean_recall == doctest::Approx(2.0 / 3.0));

  Eigen::MatrixXf one(1, 2);
  one << 1, 0;
  const auto single = recall_at_k({"q"}, one, {"x"}, one, {{"q", {"x"}}});
  CHECK(single.recall == std::vector<double>{1.0, 1.0, 1.0});
  CHECK(single.mean_recall == 1.0);

  CHECK_THROWS_AS(recall_at_k({"q"}, one, {"x"}, one, {{"q", {}}}), DataError);
  CHECK_THROWS_WITH_AS(recall_at_k({"q"}, one, {"x"}, one, {{"q", {}}}), doctest::Contains("q"), DataError);
}

TEST_CASE("recall ties break by target id") {
  Eigen::MatrixXf t(3, 1), q(1, 1);
  t << 1, 1, 1;
  q << 1;
  const auto r = recall_at_k({"q"}, q, {"c", "a", "b"}, t, {{"q", {"a"}}}, {1});
  CHECK(r.recall[0] == 1.0);
  const auto r2 = recall_at_k({"q"}, q, {"c", "a", "b"}, t, {{"q", {"c"}}}, {1, 2, 3});
  CHECK(r2.best_rank[0] == 2);
}

TEST_CASE("confidence interval uses 1.96 standard errors") {
  const auto ci = confidence_interval({0.6, 0.62, 0.58, 0.61, 0.59});
  CHECK(ci.mean == doctest::Approx(0.600));
  CHECK(ci.se == doctest::Approx(0.00707).epsilon(1e-3));
  CHECK(ci.low == doctest::Approx(0.5861).epsilon(1e-4));
  CHECK(ci.high == doctest::Approx(0.6139).epsilon(1e-4));
  CHECK(ci.n == 5);

  const auto flat = confidence_interval({0.7, 0.7, 0.7});
  CHECK(flat.low == doctest::Approx(0.7));
  CHECK(flat.high == doctest::Approx(0.7));

  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v, scaled;
    const double c = std::uniform_real_distribution<double>(0.1, 10)(rng);
    for (int i = 0; i < uniform_int(rng, 2, 12); ++i) {
      v.push_back(std::uniform_real_distribution<double>(0, 1)(rng));
      scaled.push_back(v.back() * c);
    }
    const auto a = confidence_interval(v), b = confidence_interval(scaled);
    CHECK(b.low == doctest::Approx(a.low * c).epsilon(1e-12));
    CHECK(b.high == doctest::Approx(a.high * c).epsilon(1e-12));
  }
  CHECK_THROWS(confidence_interval({0.5}));
}

TEST_CASE("t-test conventions and symmetry") {
  const std::vector<double> a = {1, 2, 3, 4, 5}, b = {1.1, 2.1, 3.1, 4.1, 5.1};
  CHECK(two_sided_t_test(a, a, true) == 1.0);
  CHECK(two_sided_t_test(a, b, true) == 0.0);
  CHECK(two_sided_t_test({2, 2, 2}, {2, 2, 2}, false) == 1.0);
  CHECK(two_sided_t_test({2, 2, 2}, {3, 3, 3}, false) == 0.0);

  // d = {0.1, -0.1, 0.2, 0.0}: t = 0.7746 on 3 degrees of freedom.
  CHECK(two_sided_t_test({1.1, 0.9, 1.2, 1.0}, {1, 1, 1, 1}, true) == doctest::Approx(0.495025346).epsilon(1e-6));

  std::mt19937_64 rng(9);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> x, y;
    const int n = uniform_int(rng, 2, 10);
    for (int i = 0; i < n; ++i) {
      x.push_back(g(rng));
      y.push_back(g(rng) + 0.5);
    }
    for (bool paired : {true, false}) {
      const double p = two_sided_t_test(x, y, paired);
      CHECK(p >= 0.0);
      CHECK(p <= 1.0);
      CHECK(two_sided_t_test(y, x, paired) == doctest::Approx(p).epsilon(1e-12));
    }
  }
  CHECK_THROWS(two_sided_t_test({1, 2}, {1, 2, 3}, true));
  CHECK_THROWS(two_sided_t_test({1}, {1, 2, 3}, false));
}
