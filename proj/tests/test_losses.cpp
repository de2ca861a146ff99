// Copyright 2026 The mclab Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <functional>
#include <numeric>
#include <random>

#include "mclab/errors.hpp"
#include "mclab/losses.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace mclab;
using namespace mclab::losses;
using Eigen::MatrixXd;
using mclab::testing::random_unit_rows;
using mclab::testing::uniform_int;
using namespace mclab::testing::oracles;

TEST_CASE("contrastive gradients match central differences in float64") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 25; ++trial) {
    const int n = uniform_int(rng, 2, 8), d = uniform_int(rng, 2, 16);
    auto [a, b] = random_pair(n, d, rng);
    double tau = tau_for(rng);
    for (auto* loss_fn : {&image_text_contrastive, &image_image_contrastive}) {
      const auto r = loss_fn(a, b, tau);
      auto f = [&] { return loss_fn(a, b, tau).loss; };
      GradCheck g;
      g.add(f, a, r.grad_a);
      g.add(f, b, r.grad_b);
      g.add(central(f, tau), r.grad_tau);
      CHECK(g.error() <= 1e-4);
    }
  }
}

TEST_CASE("reconstruction gradients match central differences in float64") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 25; ++trial) {
    const int samples = uniform_int(rng, 1, 4), per = uniform_int(rng, 1, 6), dim = uniform_int(rng, 1, 16);
    MatrixXd rec = mclab::testing::random_matrix(samples * per, dim, rng);
    const MatrixXd orig = mclab::testing::random_matrix(samples * per, dim, rng);
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(samples * per));
    for (auto& m : mask) m = static_cast<std::uint8_t>(uniform_int(rng, 0, 1));
    mask[0] = 1;
    for (auto target : {ReconTarget::masked_only, ReconTarget::whole_image}) {
      const auto r = masked_reconstruction_loss(rec, orig, mask, per, target);
      GradCheck g;
      g.add([&] { return masked_reconstruction_loss(rec, orig, mask, per, target).loss; }, rec, r.grad);
      CHECK(g.error() <= 1e-4);
    }
  }
}

TEST_CASE("combined loss gradients match central differences in float64") {
  std::mt19937_64 rng(3);
  const LossWeights w;
  for (int trial = 0; trial < 25; ++trial) {
    const int n = uniform_int(rng, 2, 8), d = uniform_int(rng, 2, 16);
    auto [img, txt] = random_pair(n, d, rng);
    auto [ia, ib] = random_pair(uniform_int(rng, 2, 8), d, rng);
    const int per = 4, dim = uniform_int(rng, 1, 16);
    MatrixXd rec = mclab::testing::random_matrix(2 * per, dim, rng);
    const MatrixXd orig = mclab::testing::random_matrix(2 * per, dim, rng);
    const std::vector<std::uint8_t> mask = {1, 0, 1, 0, 0, 1, 1, 1};
    double tau = tau_for(rng);

    struct Eval {
      LossBreakdown b;
      ContrastiveResult it, ii;
      ReconstructionResult rc;
    };
    auto eval = [&] {
      Eval e;
      e.it = image_text_contrastive(img, txt, tau);
      e.ii = image_image_contrastive(ia, ib, tau);
      e.rc = masked_reconstruction_loss(rec, orig, mask, per);
      LossTerms t{e.it.loss, e.ii.loss, e.rc.loss, static_cast<int>(img.rows()), static_cast<int>(ia.rows()),
                  e.rc.n_masked, true};
      e.b = combined_loss(t, w);
      return e;
    };
    const Eval e = eval();
    auto f = [&] { return eval().b.total; };
    GradCheck g;
    g.add(f, img, e.it.grad_a * e.b.scale_img_text);
    g.add(f, txt, e.it.grad_b * e.b.scale_img_text);
    g.add(f, ia, e.ii.grad_a * e.b.scale_img_img);
    g.add(f, ib, e.ii.grad_b * e.b.scale_img_img);
    g.add(f, rec, e.rc.grad * e.b.scale_recon);
    g.add(central(f, tau), e.b.scale_img_text * e.it.grad_tau + e.b.scale_img_img * e.ii.grad_tau);
    CHECK(g.error() <= 1e-4);
  }
}

TEST_CASE("identical embeddings give ln N") {
  for (int n : {2, 4, 8}) {
    const MatrixXd a = MatrixXd::Constant(n, 3, 1.0 / std::sqrt(3.0));
    CHECK(std::abs(image_text_contrastive(a, a, 0.07).loss - std::log(n)) < 1e-9);
    CHECK(std::abs(image_image_contrastive(a, a, 0.5).loss - std::log(n)) < 1e-9);
  }
  CHECK(std::abs(image_text_contrastive(MatrixXd::Constant(4, 2, std::sqrt(0.5)), MatrixXd::Constant(4, 2, std::sqrt(0.5)), 1.0).loss -
                 1.3862943611198906) < 1e-9);
}

TEST_CASE("two orthonormal pairs at unit temperature") {
  const MatrixXd e = MatrixXd::Identity(2, 2);
  const double expected = std::log(1.0 + std::exp(-1.0));
  CHECK(std::abs(image_text_contrastive(e, e, 1.0).loss - expected) < 1e-9);
  CHECK(std::abs(image_image_contrastive(e, e, 1.0).loss - expected) < 1e-9);
  CHECK(expected == doctest::Approx(0.3133).epsilon(1e-4));
  CHECK(image_text_contrastive(e, e, 0.01).loss < 1e-12);
}

TEST_CASE("combined loss is the weighted sum of available terms") {
  const LossWeights w;
  const auto b = combined_loss({1.0, 2.0, 0.4, 4, 4, 10, true}, w);
  CHECK(std::abs(b.total - 2.65) < 1e-12);
  CHECK(std::abs(b.total - (0.75 * 1.0 + 0.75 * 2.0 + 1.0 * 0.4)) < 1e-12);

  const auto no_text = combined_loss({5.0, 2.0, 0.4, 0, 4, 10, true}, w);
  CHECK(no_text.l_img_text == 0.0);
  CHECK(no_text.n_text_pairs == 0);
  CHECK(no_text.scale_img_text == 0.0);
  CHECK(std::abs(no_text.total - (0.75 * 2.0 + 0.4)) < 1e-12);

  const auto one_pair = combined_loss({5.0, 2.0, 0.4, 1, 1, 10, true}, w);
  CHECK(one_pair.total == 0.4);

  const auto mae = combined_loss({1.0, 2.0, 0.4, 4, 4, 10, true}, LossWeights{0, 0, 1});
  CHECK(mae.total == mae.l_recon);

  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    std::uniform_real_distribution<double> u(0.0, 5.0);
    const LossWeights rw{u(rng), u(rng), u(rng) + 0.1};
    const LossTerms t{u(rng), u(rng), u(rng), uniform_int(rng, 0, 4), uniform_int(rng, 0, 4), 3, true};
    const auto r = combined_loss(t, rw);
    const double expect = rw.img_text * r.l_img_text + rw.img_img * r.l_img_img + rw.recon * r.l_recon;
    CHECK(std::abs(r.total - expect) < 1e-12);
    CHECK(r.total >= 0.0);
  }

  CHECK_THROWS_AS(combined_loss({1, 1, 1, 1, 0, 0, false}, w), DegenerateBatchError);
  CHECK_THROWS_AS(combined_loss({1, 1, 1, 4, 4, 0, true}, LossWeights{0, 0, 0}), ConfigError);
  CHECK_THROWS_AS(combined_loss({1, 1, 1, 4, 4, 0, true}, LossWeights{-1, 0, 1}), ConfigError);
}

TEST_CASE("reconstruction loss examples") {
  const MatrixXd orig = MatrixXd::Constant(4, 6, 0.3);
  CHECK(masked_reconstruction_loss(orig, orig, {1, 1, 0, 1}, 4).loss == 0.0);

  MatrixXd rec = orig;
  rec.row(2).array() += 0.5;
  rec.row(0).array() += 3.0;  // visible patch, not scored
  const auto r = masked_reconstruction_loss(rec, orig, {0, 0, 1, 0}, 4);
  CHECK(std::abs(r.loss - 0.25) < 1e-12);
  CHECK(r.n_masked == 1);

  CHECK(masked_reconstruction_loss(rec, orig, {0, 0, 0, 0}, 4).loss == 0.0);
  CHECK(masked_reconstruction_loss(rec, orig, {0, 0, 0, 0}, 4, ReconTarget::whole_image).loss > 0.0);
  CHECK_THROWS_AS(masked_reconstruction_loss(rec, orig, {0, 0, 1}, 4), DimensionError);
  CHECK_THROWS_AS(masked_reconstruction_loss(rec, orig.topRows(3), {0, 0, 1}, 3), DimensionError);
}

TEST_CASE("contrastive loss is symmetric and permutation invariant") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = uniform_int(rng, 2, 8), d = uniform_int(rng, 2, 16);
    const MatrixXd a = random_unit_rows(n, d, rng), b = random_unit_rows(n, d, rng);
    const double tau = tau_for(rng);
    const double l = image_image_contrastive(a, b, tau).loss;
    CHECK(std::abs(image_image_contrastive(b, a, tau).loss - l) < 1e-12);
    CHECK(l >= 0.0);
    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    MatrixXd pa(n, d), pb(n, d);
    for (int i = 0; i < n; ++i) {
      pa.row(i) = a.row(perm[static_cast<std::size_t>(i)]);
      pb.row(i) = b.row(perm[static_cast<std::size_t>(i)]);
    }
    CHECK(std::abs(image_text_contrastive(pa, pb, tau).loss - image_text_contrastive(a, b, tau).loss) < 1e-9);
  }
}

TEST_CASE("perfectly aligned pairs approach zero loss as temperature falls") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = uniform_int(rng, 2, 8);
    // Orthonormal rows (QR of a random matrix): off-diagonal similarity 0.
    const MatrixXd q = Eigen::HouseholderQR<MatrixXd>(mclab::testing::random_matrix(16, 16, rng)).householderQ();
    const MatrixXd a = q.topRows(n);
    const double l1 = image_text_contrastive(a, a, 1.0).loss;
    const double l01 = image_text_contrastive(a, a, 0.1).loss;
    const double l001 = image_text_contrastive(a, a, 0.01).loss;
    CHECK(l1 > l01);
    CHECK(l01 > l001);
    CHECK(l001 < 1e-12);
  }
}

TEST_CASE("local minima over unit-norm configurations rank positives first") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const int n = uniform_int(rng, 2, 5), d = uniform_int(rng, 2, 6);
    MatrixXd a = random_unit_rows(n, d, rng), b = random_unit_rows(n, d, rng);
    double best = image_text_contrastive(a, b, 0.5).loss;
    // Accept-if-better random perturbation until no perturbation helps.
    for (double scale : {0.3, 0.1, 0.03, 0.01}) {
      std::normal_distribution<double> g(0.0, scale);
      for (int k = 0; k < 1500; ++k) {
        MatrixXd na = a, nb = b;
        for (Eigen::Index i = 0; i < na.size(); ++i) na.data()[i] += g(rng);
        for (Eigen::Index i = 0; i < nb.size(); ++i) nb.data()[i] += g(rng);
        na.rowwise().normalize();
        nb.rowwise().normalize();
        const double l = image_text_contrastive(na, nb, 0.5).loss;
        if (l < best) {
          best = l;
          a = na;
          b = nb;
        }
      }
    }
    const MatrixXd sim = a * b.transpose();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (i != j) {
          CHECK(sim(i, i) > sim(i, j));
          CHECK(sim(j, j) > sim(i, j));
        }
  }
}

TEST_CASE("contrastive loss rejects degenerate and malformed input") {
  const MatrixXd one = MatrixXd::Identity(1, 2);
  CHECK_THROWS_AS(image_text_contrastive(one, one, 0.07), DegenerateBatchError);
  CHECK_THROWS_AS(image_text_contrastive(MatrixXd::Identity(2, 2), MatrixXd::Identity(3, 2), 0.07), DimensionError);
  MatrixXd bad = MatrixXd::Identity(2, 2);
  bad(0, 0) = std::nan("");
  CHECK_THROWS_AS(image_text_contrastive(bad, MatrixXd::Identity(2, 2), 0.07), NumericError);
}
