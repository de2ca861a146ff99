// Copyright 2026 The mclab Authors
// SPDX-License-Identifier: Apache-2.0

#include "mclab/losses.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "mclab/errors.hpp"

namespace mclab::losses {

void LossWeights::validate() const {
  if (!(img_text >= 0 && img_img >= 0 && recon >= 0)) throw ConfigError("loss weights must be non-negative");
  if (img_text == 0 && img_img == 0 && recon == 0) throw ConfigError("loss weights must not all be zero");
}

ContrastiveResult symmetric_info_nce(const MatrixXd& a, const MatrixXd& b, double tau) {
  const auto n = a.rows();
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError("contrastive loss: embedding matrices differ in shape");
  if (n < 2) throw DegenerateBatchError("contrastive loss needs at least 2 pairs, got " + std::to_string(n));
  if (!a.allFinite() || !b.allFinite() || !std::isfinite(tau) || tau <= 0)
    throw NumericError("contrastive loss: non-finite embeddings or temperature");

  const MatrixXd raw = a * b.transpose();
  const MatrixXd sim = raw.cwiseMax(-1.0).cwiseMin(1.0);
  const MatrixXd logits = sim / tau;

  // Row-wise (a -> b) and column-wise (b -> a) softmax with max subtraction.
  MatrixXd p_row(n, n), p_col(n, n);
  double loss_row = 0, loss_col = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double m = logits.row(i).maxCoeff();
    const Eigen::RowVectorXd e = (logits.row(i).array() - m).exp();
    const double s = e.sum();
    p_row.row(i) = e / s;
    loss_row += (m + std::log(s)) - logits(i, i);
  }
  for (Eigen::Index j = 0; j < n; ++j) {
    const double m = logits.col(j).maxCoeff();
    const Eigen::VectorXd e = (logits.col(j).array() - m).exp();
    const double s = e.sum();
    p_col.col(j) = e / s;
    loss_col += (m + std::log(s)) - logits(j, j);
  }
  const double nd = static_cast<double>(n);
  ContrastiveResult r;
  r.loss = std::max(0.0, 0.5 * (loss_row + loss_col) / nd);

  MatrixXd d_logits = (p_row + p_col) * (0.5 / nd);
  d_logits.diagonal().array() -= 1.0 / nd;
  r.grad_tau = -(d_logits.cwiseProduct(sim)).sum() / (tau * tau);
  MatrixXd d_sim = d_logits / tau;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if (raw(i, j) > 1.0 || raw(i, j) < -1.0) d_sim(i, j) = 0.0;
  r.grad_a = d_sim * b;
  r.grad_b = d_sim.transpose() * a;
  return r;
}

ContrastiveResult image_text_contrastive(const MatrixXd& images, const MatrixXd& texts, double tau) {
  return symmetric_info_nce(images, texts, tau);
}

ContrastiveResult image_image_contrastive(const MatrixXd& a, const MatrixXd& b, double tau) {
  return symmetric_info_nce(a, b, tau);
}

ReconstructionResult masked_reconstruction_loss(const MatrixXd& reconstructed, const MatrixXd& original,
                                                const std::vector<std::uint8_t>& masked, int patches_per_sample,
                                                ReconTarget target) {
  if (reconstructed.rows() != original.rows() || reconstructed.cols() != original.cols())
    throw DimensionError("reconstruction loss: reconstructed and original shapes differ");
  if (static_cast<Eigen::Index>(masked.size()) != reconstructed.rows())
    throw DimensionError("reconstruction loss: mask length does not match the patch count");
  if (patches_per_sample <= 0 || reconstructed.rows() % patches_per_sample != 0)
    throw DimensionError("reconstruction loss: patch rows are not a whole number of samples");
  if (!reconstructed.allFinite() || !original.allFinite()) throw NumericError("reconstruction loss: non-finite input");

  const auto n_samples = reconstructed.rows() / patches_per_sample;
  const auto dim = reconstructed.cols();
  ReconstructionResult r;
  r.grad = MatrixXd::Zero(reconstructed.rows(), dim);
  std::vector<Eigen::Index> scored_per_sample(static_cast<std::size_t>(n_samples), 0);
  Eigen::Index contributing = 0;
  for (Eigen::Index s = 0; s < n_samples; ++s) {
    Eigen::Index rows = 0;
    for (Eigen::Index p = 0; p < patches_per_sample; ++p) {
      const bool is_masked = masked[static_cast<std::size_t>(s * patches_per_sample + p)] != 0;
      r.n_masked += is_masked ? 1 : 0;
      if (is_masked || target == ReconTarget::whole_image) ++rows;
    }
    scored_per_sample[static_cast<std::size_t>(s)] = rows;
    if (rows > 0) ++contributing;
  }
  if (contributing == 0 || (target == ReconTarget::masked_only && r.n_masked == 0)) return r;

  for (Eigen::Index s = 0; s < n_samples; ++s) {
    const auto rows = scored_per_sample[static_cast<std::size_t>(s)];
    if (rows == 0) continue;
    const double denom = static_cast<double>(rows * dim) * static_cast<double>(contributing);
    for (Eigen::Index p = 0; p < patches_per_sample; ++p) {
      const auto row = s * patches_per_sample + p;
      if (target == ReconTarget::masked_only && !masked[static_cast<std::size_t>(row)]) continue;
      const Eigen::RowVectorXd diff = reconstructed.row(row) - original.row(row);
      r.loss += diff.squaredNorm() / denom;
      r.grad.row(row) = diff * (2.0 / denom);
    }
  }
  return r;
}

LossBreakdown combined_loss(const LossTerms& terms, const LossWeights& weights) {
  weights.validate();
  const bool has_text = terms.n_text_pairs >= 2;
  const bool has_pairs = terms.n_img_pairs >= 2;
  const bool has_recon = terms.recon_available;
  if (!has_text && !has_pairs && !has_recon)
    throw DegenerateBatchError("batch feeds none of the three loss terms");
  LossBreakdown b;
  b.l_img_text = has_text ? terms.img_text : 0.0;
  b.l_img_img = has_pairs ? terms.img_img : 0.0;
  b.l_recon = has_recon ? terms.recon : 0.0;
  b.n_text_pairs = has_text ? terms.n_text_pairs : 0;
  b.n_img_pairs = has_pairs ? terms.n_img_pairs : 0;
  b.n_masked = terms.n_masked;
  b.scale_img_text = has_text ? weights.img_text : 0.0;
  b.scale_img_img = has_pairs ? weights.img_img : 0.0;
  b.scale_recon = has_recon ? weights.recon : 0.0;
  b.total = weights.img_text * b.l_img_text + weights.img_img * b.l_img_img + weights.recon * b.l_recon;
  if (!std::isfinite(b.total) || b.l_img_text < 0 || b.l_img_img < 0 || b.l_recon < 0)
    throw NumericError("combined loss is non-finite or negative");
  return b;
}

void to_json(nlohmann::json& j, const LossBreakdown& b) {
  j = nlohmann::json{{"l_img_text", b.l_img_text}, {"l_img_img", b.l_img_img},     {"l_recon", b.l_recon},
                     {"total", b.total},           {"n_text_pairs", b.n_text_pairs}, {"n_img_pairs", b.n_img_pairs},
                     {"n_masked", b.n_masked}};
}

}  // namespace mclab::losses
