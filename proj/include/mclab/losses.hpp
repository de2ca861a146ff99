// Copyright 2026 The mclab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

namespace mclab::losses {

using Eigen::MatrixXd;

struct LossWeights {
  double img_text = 0.75;
  double img_img = 0.75;
  double recon = 1.0;

  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

/// Loss value with gradients for both embedding matrices and the temperature.
struct ContrastiveResult {
  double loss = 0;
  MatrixXd grad_a;
  MatrixXd grad_b;
  double grad_tau = 0;
};

/// Symmetric InfoNCE over the N x N similarity matrix of `a` and `b`
/// (positives on the diagonal): the mean of the a->b and b->a cross-entropies.
/// Similarities are clamped to [-1, 1] before division by `tau`.
ContrastiveResult symmetric_info_nce(const MatrixXd& a, const MatrixXd& b, double tau);

/// Image rows against the text rows of the same samples.
ContrastiveResult image_text_contrastive(const MatrixXd& images, const MatrixXd& texts, double tau);
/// Image rows against same-patient images of another modality.
ContrastiveResult image_image_contrastive(const MatrixXd& a, const MatrixXd& b, double tau);

enum class ReconTarget { masked_only, whole_image };

struct ReconstructionResult {
  double loss = 0;
  MatrixXd grad;
  int n_masked = 0;  // masked patches counted
};

/// Mean squared error between reconstructed and original patches. Rows are
/// patches, grouped `patches_per_sample` at a time; `masked` flags each row.
/// Each sample contributes the mean over its scored elements and samples are
/// averaged. With no masked patch the loss is 0.
ReconstructionResult masked_reconstruction_loss(const MatrixXd& reconstructed, const MatrixXd& original,
                                                const std::vector<std::uint8_t>& masked, int patches_per_sample,
                                                ReconTarget target = ReconTarget::masked_only);

/// Per-term inputs to the combined objective. A contrastive term needs at
/// least two pairs; with fewer it counts as unavailable.
struct LossTerms {
  double img_text = 0;
  double img_img = 0;
  double recon = 0;
  int n_text_pairs = 0;
  int n_img_pairs = 0;
  int n_masked = 0;
  bool recon_available = true;
};

struct LossBreakdown {
  double l_img_text = 0;
  double l_img_img = 0;
  double l_recon = 0;
  double total = 0;
  int n_text_pairs = 0;
  int n_img_pairs = 0;
  int n_masked = 0;

  /// Gradient multipliers: the term's weight when available, else 0.
  double scale_img_text = 0;
  double scale_img_img = 0;
  double scale_recon = 0;
};

LossBreakdown combined_loss(const LossTerms& terms, const LossWeights& weights);

void to_json(nlohmann::json& j, const LossBreakdown& b);

}  // namespace mclab::losses
