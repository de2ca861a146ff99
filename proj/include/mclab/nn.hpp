// Copyright 2026 The mclab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace mclab::nn {

using Matrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<float, 1, Eigen::Dynamic>;
using Rng = std::mt19937_64;

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool decay = false;  // receives decoupled weight decay
};

/// Owns the parameters of a model in registration order. Pointers handed out
/// by add() stay valid for the lifetime of the set.
class ParameterSet {
 public:
  Parameter& add(std::string name, Matrix init, bool decay);
  [[nodiscard]] Parameter& at(std::string_view name);
  [[nodiscard]] const Parameter& at(std::string_view name) const;
  [[nodiscard]] bool contains(std::string_view name) const;

  [[nodiscard]] std::vector<Parameter*> all();
  [[nodiscard]] std::vector<const Parameter*> all() const;
  /// Parameters whose name starts with `prefix`.
  [[nodiscard]] std::vector<Parameter*> with_prefix(std::string_view prefix);

  void zero_grad();
  [[nodiscard]] std::size_t scalar_count() const;
  [[nodiscard]] bool all_finite() const;

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, Parameter*, std::less<>> index_;
};

/// Token rows grouped into consecutive sequences. Attention never crosses a
/// sequence boundary; every other layer works row-wise.
struct Segments {
  std::vector<int> lengths;

  [[nodiscard]] int count() const { return static_cast<int>(lengths.size()); }
  [[nodiscard]] int total() const;
  [[nodiscard]] std::vector<int> offsets() const;
  static Segments uniform(int count, int length);
};

class Linear {
 public:
  Linear() = default;
  Linear(ParameterSet& params, const std::string& name, int in, int out, bool bias, Rng& rng);

  [[nodiscard]] Matrix forward(const Matrix& x) const;
  /// Accumulates weight gradients and returns d(loss)/d(x).
  Matrix backward(const Matrix& x, const Matrix& dy);
  void accumulate(const Matrix& x, const Matrix& dy);

  [[nodiscard]] int in_features() const;
  [[nodiscard]] int out_features() const;

 private:
  Parameter* weight_ = nullptr;  // in x out
  Parameter* bias_ = nullptr;    // 1 x out
};

struct LayerNormCache {
  Matrix xhat;
  Eigen::VectorXf rstd;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterSet& params, const std::string& name, int dim);

  Matrix forward(const Matrix& x, LayerNormCache* cache) const;
  Matrix backward(const LayerNormCache& cache, const Matrix& dy);

 private:
  Parameter* gain_ = nullptr;
  Parameter* shift_ = nullptr;
};

Matrix gelu(const Matrix& x);
Matrix gelu_backward(const Matrix& x, const Matrix& dy);

struct AttentionCache {
  Matrix input;
  Matrix qkv;
  std::vector<Matrix> probs;  // [segment * heads + head]
  Matrix context;
};

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterSet& params, const std::string& name, int dim, int heads, Rng& rng);

  Matrix forward(const Matrix& x, const Segments& segs, AttentionCache* cache) const;
  Matrix backward(const AttentionCache& cache, const Segments& segs, const Matrix& dy);

 private:
  int dim_ = 0;
  int heads_ = 0;
  Linear qkv_;
  Linear out_;
};

struct BlockCache {
  LayerNormCache ln1;
  AttentionCache attn;
  LayerNormCache ln2;
  Matrix h2;
  Matrix pre_act;
  Matrix act;
};

/// Pre-norm transformer block: x + attn(ln(x)), then + mlp(ln(.)).
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(ParameterSet& params, const std::string& name, int dim, int heads, int mlp_ratio, Rng& rng);

  Matrix forward(const Matrix& x, const Segments& segs, BlockCache* cache) const;
  Matrix backward(const BlockCache& cache, const Segments& segs, const Matrix& dy);

 private:
  LayerNorm ln1_;
  MultiHeadAttention attn_;
  LayerNorm ln2_;
  Linear fc1_;
  Linear fc2_;
};

struct StackCache {
  std::vector<BlockCache> blocks;
  LayerNormCache final_norm;
};

/// Blocks followed by a final layer norm.
class TransformerStack {
 public:
  TransformerStack() = default;
  TransformerStack(ParameterSet& params, const std::string& name, int dim, int depth, int heads, Rng& rng);

  Matrix forward(const Matrix& x, const Segments& segs, StackCache* cache) const;
  Matrix backward(const StackCache& cache, const Segments& segs, const Matrix& dy);

 private:
  std::vector<TransformerBlock> blocks_;
  LayerNorm norm_;
};

/// Fixed 2-D sine-cosine positional table, one row per grid cell.
Matrix sincos_position_table(int grid, int dim);

/// Row-wise l2 normalization; `norms` receives the pre-normalization norms.
Matrix l2_normalize_rows(const Matrix& x, Eigen::VectorXf* norms);
Matrix l2_normalize_rows_backward(const Matrix& normalized, const Eigen::VectorXf& norms, const Matrix& dy);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

/// Adaptive-moment optimizer with decoupled weight decay and global-norm
/// gradient clipping.
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

  /// Applies one update to `params` with learning rate `lr`. Returns the
  /// global gradient norm before clipping.
  double step(const std::vector<Parameter*>& params, double lr);

  [[nodiscard]] std::int64_t steps() const { return t_; }
  [[nodiscard]] const std::map<std::string, std::pair<Matrix, Matrix>>& moments() const { return moments_; }
  void restore(std::int64_t t, std::map<std::string, std::pair<Matrix, Matrix>> moments) {
    t_ = t;
    moments_ = std::move(moments);
  }
  [[nodiscard]] const AdamWConfig& config() const { return cfg_; }

 private:
  AdamWConfig cfg_;
  std::int64_t t_ = 0;
  std::map<std::string, std::pair<Matrix, Matrix>> moments_;
};

/// Two-layer classifier head: linear, GELU, linear.
struct MlpHeadCache {
  Matrix input;
  Matrix pre_act;
  Matrix act;
};

class MlpHead {
 public:
  MlpHead() = default;
  MlpHead(ParameterSet& params, const std::string& name, int in, int hidden, int out, Rng& rng);

  Matrix forward(const Matrix& x, MlpHeadCache* cache) const;
  Matrix backward(const MlpHeadCache& cache, const Matrix& dy);

 private:
  Linear fc1_;
  Linear fc2_;
};

}  // namespace mclab::nn
