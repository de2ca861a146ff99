// Copyright 2026 The mclab Authors
// SPDX-License-Identifier: Apache-2.0

#include "mclab/nn.hpp"

#include <cmath>
#include <numeric>

#include "mclab/errors.hpp"

namespace mclab::nn {
namespace {

constexpr float kLayerNormEps = 1e-6f;

Matrix xavier(int in, int out, Rng& rng) {
  const float limit = std::sqrt(6.0f / static_cast<float>(in + out));
  std::uniform_real_distribution<float> dist(-limit, limit);
  Matrix m(in, out);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

}  // namespace

Parameter& ParameterSet::add(std::string name, Matrix init, bool decay) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name " + name);
  auto p = std::make_unique<Parameter>();
  p->name = std::move(name);
  p->grad = Matrix::Zero(init.rows(), init.cols());
  p->value = std::move(init);
  p->decay = decay;
  Parameter* raw = p.get();
  index_.emplace(raw->name, raw);
  params_.push_back(std::move(p));
  return *raw;
}

Parameter& ParameterSet::at(std::string_view name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter " + std::string(name));
  return *it->second;
}

const Parameter& ParameterSet::at(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter " + std::string(name));
  return *it->second;
}

bool ParameterSet::contains(std::string_view name) const { return index_.find(name) != index_.end(); }

std::vector<Parameter*> ParameterSet::all() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParameterSet::all() const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<Parameter*> ParameterSet::with_prefix(std::string_view prefix) {
  std::vector<Parameter*> out;
  for (auto& p : params_)
    if (p->name.compare(0, prefix.size(), prefix) == 0) out.push_back(p.get());
  return out;
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) p->grad.setZero();
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
  return n;
}

bool ParameterSet::all_finite() const {
  for (const auto& p : params_)
    if (!p->value.allFinite()) return false;
  return true;
}

int Segments::total() const { return std::accumulate(lengths.begin(), lengths.end(), 0); }

std::vector<int> Segments::offsets() const {
  std::vector<int> out(lengths.size());
  int acc = 0;
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    out[i] = acc;
    acc += lengths[i];
  }
  return out;
}

Segments Segments::uniform(int count, int length) { return Segments{std::vector<int>(static_cast<std::size_t>(count), length)}; }

Linear::Linear(ParameterSet& params, const std::string& name, int in, int out, bool bias, Rng& rng) {
  weight_ = &params.add(name + ".weight", xavier(in, out, rng), true);
  if (bias) bias_ = &params.add(name + ".bias", Matrix::Zero(1, out), false);
}

Matrix Linear::forward(const Matrix& x) const {
  if (x.cols() != weight_->value.rows())
    throw DimensionError("linear " + weight_->name + ": expected " + std::to_string(weight_->value.rows()) +
                         " input features, got " + std::to_string(x.cols()));
  Matrix y = x * weight_->value;
  if (bias_) y.rowwise() += bias_->value.row(0);
  return y;
}

void Linear::accumulate(const Matrix& x, const Matrix& dy) {
  weight_->grad.noalias() += x.transpose() * dy;
  if (bias_) bias_->grad.row(0) += dy.colwise().sum();
}

Matrix Linear::backward(const Matrix& x, const Matrix& dy) {
  accumulate(x, dy);
  return dy * weight_->value.transpose();
}

int Linear::in_features() const { return static_cast<int>(weight_->value.rows()); }
int Linear::out_features() const { return static_cast<int>(weight_->value.cols()); }

LayerNorm::LayerNorm(ParameterSet& params, const std::string& name, int dim) {
  gain_ = &params.add(name + ".gain", Matrix::Ones(1, dim), false);
  shift_ = &params.add(name + ".shift", Matrix::Zero(1, dim), false);
}

Matrix LayerNorm::forward(const Matrix& x, LayerNormCache* cache) const {
  const auto n = x.cols();
  Eigen::VectorXf mean = x.rowwise().mean();
  Matrix centered = x.colwise() - mean;
  Eigen::VectorXf var = centered.array().square().rowwise().sum() / static_cast<float>(n);
  Eigen::VectorXf rstd = (var.array() + kLayerNormEps).rsqrt();
  Matrix xhat = centered.array().colwise() * rstd.array();
  Matrix y = (xhat.array().rowwise() * gain_->value.row(0).array()).rowwise() + shift_->value.row(0).array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

Matrix LayerNorm::backward(const LayerNormCache& cache, const Matrix& dy) {
  const auto n = static_cast<float>(dy.cols());
  gain_->grad.row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  shift_->grad.row(0) += dy.colwise().sum();
  Matrix dxhat = dy.array().rowwise() * gain_->value.row(0).array();
  Eigen::VectorXf mean_d = dxhat.rowwise().sum() / n;
  Eigen::VectorXf mean_dx = (dxhat.array() * cache.xhat.array()).rowwise().sum() / n;
  Matrix dx = dxhat;
  dx.colwise() -= mean_d;
  dx.array() -= cache.xhat.array().colwise() * mean_dx.array();
  dx.array().colwise() *= cache.rstd.array();
  return dx;
}

namespace {
constexpr float kGeluK = 0.7978845608028654f;  // sqrt(2 / pi)
constexpr float kGeluC = 0.044715f;
}  // namespace

Matrix gelu(const Matrix& x) {
  const auto v = x.array();
  const Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> t = (kGeluK * (v + kGeluC * v.cube())).tanh();
  return (0.5f * v * (1.0f + t)).matrix();
}

Matrix gelu_backward(const Matrix& x, const Matrix& dy) {
  const auto v = x.array();
  const Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> t = (kGeluK * (v + kGeluC * v.cube())).tanh();
  return ((0.5f * (1.0f + t) + 0.5f * v * (1.0f - t.square()) * kGeluK * (1.0f + 3.0f * kGeluC * v.square())) * dy.array())
      .matrix();
}

MultiHeadAttention::MultiHeadAttention(ParameterSet& params, const std::string& name, int dim, int heads, Rng& rng)
    : dim_(dim), heads_(heads) {
  if (heads <= 0 || dim % heads != 0) throw ConfigError("attention dim must be divisible by the head count");
  qkv_ = Linear(params, name + ".qkv", dim, 3 * dim, true, rng);
  out_ = Linear(params, name + ".out", dim, dim, true, rng);
}

Matrix MultiHeadAttention::forward(const Matrix& x, const Segments& segs, AttentionCache* cache) const {
  const int dh = dim_ / heads_;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  Matrix qkv = qkv_.forward(x);
  Matrix context(x.rows(), dim_);
  const auto offsets = segs.offsets();
  if (cache) cache->probs.resize(static_cast<std::size_t>(segs.count() * heads_));
  for (int s = 0; s < segs.count(); ++s) {
    const int off = offsets[static_cast<std::size_t>(s)], len = segs.lengths[static_cast<std::size_t>(s)];
    for (int h = 0; h < heads_; ++h) {
      auto q = qkv.block(off, h * dh, len, dh);
      auto k = qkv.block(off, dim_ + h * dh, len, dh);
      auto v = qkv.block(off, 2 * dim_ + h * dh, len, dh);
      Matrix scores = (q * k.transpose()) * scale;
      Eigen::VectorXf row_max = scores.rowwise().maxCoeff();
      scores.colwise() -= row_max;
      scores = scores.array().exp();
      Eigen::VectorXf denom = scores.rowwise().sum();
      scores.array().colwise() /= denom.array();
      context.block(off, h * dh, len, dh).noalias() = scores * v;
      if (cache) cache->probs[static_cast<std::size_t>(s * heads_ + h)] = std::move(scores);
    }
  }
  Matrix y = out_.forward(context);
  if (cache) {
    cache->input = x;
    cache->qkv = std::move(qkv);
    cache->context = std::move(context);
  }
  return y;
}

Matrix MultiHeadAttention::backward(const AttentionCache& cache, const Segments& segs, const Matrix& dy) {
  const int dh = dim_ / heads_;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  Matrix dcontext = out_.backward(cache.context, dy);
  Matrix dqkv(cache.qkv.rows(), cache.qkv.cols());
  const auto offsets = segs.offsets();
  for (int s = 0; s < segs.count(); ++s) {
    const int off = offsets[static_cast<std::size_t>(s)], len = segs.lengths[static_cast<std::size_t>(s)];
    for (int h = 0; h < heads_; ++h) {
      const Matrix& p = cache.probs[static_cast<std::size_t>(s * heads_ + h)];
      auto q = cache.qkv.block(off, h * dh, len, dh);
      auto k = cache.qkv.block(off, dim_ + h * dh, len, dh);
      auto v = cache.qkv.block(off, 2 * dim_ + h * dh, len, dh);
      auto dctx = dcontext.block(off, h * dh, len, dh);
      Matrix dp = dctx * v.transpose();
      dqkv.block(off, 2 * dim_ + h * dh, len, dh).noalias() = p.transpose() * dctx;
      Eigen::VectorXf rowdot = (dp.array() * p.array()).rowwise().sum();
      Matrix ds = p.array() * (dp.array().colwise() - rowdot.array());
      ds *= scale;
      dqkv.block(off, h * dh, len, dh).noalias() = ds * k;
      dqkv.block(off, dim_ + h * dh, len, dh).noalias() = ds.transpose() * q;
    }
  }
  return qkv_.backward(cache.input, dqkv);
}

TransformerBlock::TransformerBlock(ParameterSet& params, const std::string& name, int dim, int heads, int mlp_ratio,
                                   Rng& rng) {
  ln1_ = LayerNorm(params, name + ".ln1", dim);
  attn_ = MultiHeadAttention(params, name + ".attn", dim, heads, rng);
  ln2_ = LayerNorm(params, name + ".ln2", dim);
  fc1_ = Linear(params, name + ".fc1", dim, mlp_ratio * dim, true, rng);
  fc2_ = Linear(params, name + ".fc2", mlp_ratio * dim, dim, true, rng);
}

Matrix TransformerBlock::forward(const Matrix& x, const Segments& segs, BlockCache* cache) const {
  Matrix h1 = ln1_.forward(x, cache ? &cache->ln1 : nullptr);
  Matrix x2 = x + attn_.forward(h1, segs, cache ? &cache->attn : nullptr);
  Matrix h2 = ln2_.forward(x2, cache ? &cache->ln2 : nullptr);
  Matrix pre = fc1_.forward(h2);
  Matrix act = gelu(pre);
  Matrix y = x2 + fc2_.forward(act);
  if (cache) {
    cache->h2 = std::move(h2);
    cache->pre_act = std::move(pre);
    cache->act = std::move(act);
  }
  return y;
}

Matrix TransformerBlock::backward(const BlockCache& cache, const Segments& segs, const Matrix& dy) {
  Matrix dact = fc2_.backward(cache.act, dy);
  Matrix dpre = gelu_backward(cache.pre_act, dact);
  Matrix dh2 = fc1_.backward(cache.h2, dpre);
  Matrix dx2 = dy + ln2_.backward(cache.ln2, dh2);
  Matrix dh1 = attn_.backward(cache.attn, segs, dx2);
  return dx2 + ln1_.backward(cache.ln1, dh1);
}

TransformerStack::TransformerStack(ParameterSet& params, const std::string& name, int dim, int depth, int heads,
                                   Rng& rng) {
  for (int i = 0; i < depth; ++i)
    blocks_.emplace_back(params, name + ".block" + std::to_string(i), dim, heads, 4, rng);
  norm_ = LayerNorm(params, name + ".norm", dim);
}

Matrix TransformerStack::forward(const Matrix& x, const Segments& segs, StackCache* cache) const {
  if (cache) cache->blocks.resize(blocks_.size());
  Matrix h = x;
  for (std::size_t i = 0; i < blocks_.size(); ++i) h = blocks_[i].forward(h, segs, cache ? &cache->blocks[i] : nullptr);
  return norm_.forward(h, cache ? &cache->final_norm : nullptr);
}

Matrix TransformerStack::backward(const StackCache& cache, const Segments& segs, const Matrix& dy) {
  Matrix d = norm_.backward(cache.final_norm, dy);
  for (std::size_t i = blocks_.size(); i-- > 0;) d = blocks_[i].backward(cache.blocks[i], segs, d);
  return d;
}

Matrix sincos_position_table(int grid, int dim) {
  if (dim % 4 != 0) throw ConfigError("positional table dim must be divisible by 4");
  const int quarter = dim / 4;
  Matrix table(grid * grid, dim);
  for (int gy = 0; gy < grid; ++gy)
    for (int gx = 0; gx < grid; ++gx) {
      const int row = gy * grid + gx;
      for (int i = 0; i < quarter; ++i) {
        const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / quarter);
        table(row, i) = static_cast<float>(std::sin(gx * omega));
        table(row, quarter + i) = static_cast<float>(std::cos(gx * omega));
        table(row, 2 * quarter + i) = static_cast<float>(std::sin(gy * omega));
        table(row, 3 * quarter + i) = static_cast<float>(std::cos(gy * omega));
      }
    }
  return table;
}

Matrix l2_normalize_rows(const Matrix& x, Eigen::VectorXf* norms) {
  Eigen::VectorXf n = x.rowwise().norm().cwiseMax(1e-12f);
  Matrix y = x.array().colwise() / n.array();
  if (norms) *norms = std::move(n);
  return y;
}

Matrix l2_normalize_rows_backward(const Matrix& normalized, const Eigen::VectorXf& norms, const Matrix& dy) {
  Eigen::VectorXf dots = (normalized.array() * dy.array()).rowwise().sum();
  Matrix dx = dy - (normalized.array().colwise() * dots.array()).matrix();
  dx.array().colwise() /= norms.array();
  return dx;
}

double AdamW::step(const std::vector<Parameter*>& params, double lr) {
  double sq = 0;
  for (const auto* p : params) sq += static_cast<double>(p->grad.cast<double>().squaredNorm());
  const double norm = std::sqrt(sq);
  const double clip = (cfg_.clip_norm > 0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / (norm + 1e-6) : 1.0;

  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const auto b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
  for (auto* p : params) {
    auto [it, inserted] = moments_.try_emplace(p->name);
    auto& [m, v] = it->second;
    if (inserted) {
      m = Matrix::Zero(p->value.rows(), p->value.cols());
      v = Matrix::Zero(p->value.rows(), p->value.cols());
    }
    const Matrix g = p->grad * static_cast<float>(clip);
    m = b1 * m + (1.0f - b1) * g;
    v = b2 * v + (1.0f - b2) * g.cwiseProduct(g);
    const auto step_size = static_cast<float>(lr / bc1);
    const auto denom_scale = static_cast<float>(1.0 / std::sqrt(bc2));
    if (p->decay) p->value *= static_cast<float>(1.0 - lr * cfg_.weight_decay);
    p->value.array() -= step_size * m.array() / (v.array().sqrt() * denom_scale + static_cast<float>(cfg_.eps));
  }
  return norm;
}

MlpHead::MlpHead(ParameterSet& params, const std::string& name, int in, int hidden, int out, Rng& rng) {
  fc1_ = Linear(params, name + ".fc1", in, hidden, true, rng);
  fc2_ = Linear(params, name + ".fc2", hidden, out, true, rng);
}

Matrix MlpHead::forward(const Matrix& x, MlpHeadCache* cache) const {
  Matrix pre = fc1_.forward(x);
  Matrix act = gelu(pre);
  Matrix y = fc2_.forward(act);
  if (cache) {
    cache->input = x;
    cache->pre_act = std::move(pre);
    cache->act = std::move(act);
  }
  return y;
}

Matrix MlpHead::backward(const MlpHeadCache& cache, const Matrix& dy) {
  Matrix dact = fc2_.backward(cache.act, dy);
  Matrix dpre = gelu_backward(cache.pre_act, dact);
  return fc1_.backward(cache.input, dpre);
}

}  // namespace mclab::nn
