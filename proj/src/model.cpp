// Copyright 2026 The mclab Authors
// SPDX-License-Identifier: Apache-2.0

#include "mclab/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mclab/errors.hpp"

namespace mclab::model {

using nn::Matrix;
using json = nlohmann::json;

constexpr float kPixelMean = 0.5f;
constexpr float kPixelStd = 0.25f;

ModelConfig ModelConfig::synthetic() {
  ModelConfig c;
  c.image_size = 64;
  c.patch_size = 8;
  return c;
}

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw ConfigError(std::string("model.") + name + " must be positive");
  };
  positive(image_size, "image_size");
  positive(channels, "channels");
  positive(patch_size, "patch_size");
  positive(enc_dim, "enc_dim");
  positive(enc_depth, "enc_depth");
  positive(enc_heads, "enc_heads");
  positive(dec_dim, "dec_dim");
  positive(dec_depth, "dec_depth");
  positive(dec_heads, "dec_heads");
  positive(text_dim, "text_dim");
  positive(text_depth, "text_depth");
  positive(text_heads, "text_heads");
  positive(proj_dim, "proj_dim");
  if (image_size % patch_size != 0) throw ConfigError("model.image_size must be divisible by model.patch_size");
  if (enc_dim % 4 != 0 || dec_dim % 4 != 0) throw ConfigError("model.enc_dim and model.dec_dim must be divisible by 4");
  if (enc_dim % enc_heads || dec_dim % dec_heads || text_dim % text_heads)
    throw ConfigError("model dims must be divisible by their head counts");
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) throw ConfigError("model.mask_ratio must lie in [0, 1)");
  if (!(temperature_min > 0 && temperature_min <= temperature_max))
    throw ConfigError("model temperature clamp must satisfy 0 < min <= max");
  if (!(temperature_init >= temperature_min && temperature_init <= temperature_max))
    throw ConfigError("model.temperature_init must lie inside the clamp range");
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"image_size", c.image_size},
           {"channels", c.channels},
           {"patch_size", c.patch_size},
           {"enc_dim", c.enc_dim},
           {"enc_depth", c.enc_depth},
           {"enc_heads", c.enc_heads},
           {"dec_dim", c.dec_dim},
           {"dec_depth", c.dec_depth},
           {"dec_heads", c.dec_heads},
           {"text_dim", c.text_dim},
           {"text_depth", c.text_depth},
           {"text_heads", c.text_heads},
           {"proj_dim", c.proj_dim},
           {"mask_ratio", c.mask_ratio},
           {"temperature_init", c.temperature_init},
           {"learnable_temperature", c.learnable_temperature},
           {"temperature_min", c.temperature_min},
           {"temperature_max", c.temperature_max}};
}

void from_json(const json& j, ModelConfig& c) {
  if (!j.is_object()) throw ConfigError("model config must be an object");
  for (const auto& [key, v] : j.items()) {
    if (key == "image_size") c.image_size = v.get<int>();
    else if (key == "channels") c.channels = v.get<int>();
    else if (key == "patch_size") c.patch_size = v.get<int>();
    else if (key == "enc_dim") c.enc_dim = v.get<int>();
    else if (key == "enc_depth") c.enc_depth = v.get<int>();
    else if (key == "enc_heads") c.enc_heads = v.get<int>();
    else if (key == "dec_dim") c.dec_dim = v.get<int>();
    else if (key == "dec_depth") c.dec_depth = v.get<int>();
    else if (key == "dec_heads") c.dec_heads = v.get<int>();
    else if (key == "text_dim") c.text_dim = v.get<int>();
    else if (key == "text_depth") c.text_depth = v.get<int>();
    else if (key == "text_heads") c.text_heads = v.get<int>();
    else if (key == "proj_dim") c.proj_dim = v.get<int>();
    else if (key == "mask_ratio") c.mask_ratio = v.get<double>();
    else if (key == "temperature_init") c.temperature_init = v.get<double>();
    else if (key == "learnable_temperature") c.learnable_temperature = v.get<bool>();
    else if (key == "temperature_min") c.temperature_min = v.get<double>();
    else if (key == "temperature_max") c.temperature_max = v.get<double>();
    else throw ConfigError("unknown key model." + key);
  }
}

int PatchMask::count() const { return static_cast<int>(std::count(masked.begin(), masked.end(), 1)); }

Model::Model(const ModelConfig& cfg, text::Vocabulary vocab, std::uint64_t seed) : cfg_(cfg), vocab_(std::move(vocab)) {
  cfg_.validate();
  if (vocab_.size() < text::kFirstWordId) throw ConfigError("model requires a fitted vocabulary");
  nn::Rng rng(seed);
  std::normal_distribution<float> small(0.0f, 0.02f);
  auto randn = [&](int r, int c) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = small(rng);
    return m;
  };

  patch_embed_ = nn::Linear(params_, "image.patch_embed", cfg_.patch_dim(), cfg_.enc_dim, true, rng);
  enc_pos_ = nn::sincos_position_table(cfg_.grid(), cfg_.enc_dim);
  encoder_ = nn::TransformerStack(params_, "image.encoder", cfg_.enc_dim, cfg_.enc_depth, cfg_.enc_heads, rng);
  image_proj_ = nn::Linear(params_, "image.proj", cfg_.enc_dim, cfg_.proj_dim, false, rng);

  dec_embed_ = nn::Linear(params_, "decoder.embed", cfg_.enc_dim, cfg_.dec_dim, true, rng);
  mask_token_ = &params_.add("decoder.mask_token", randn(1, cfg_.dec_dim), false);
  dec_pos_ = nn::sincos_position_table(cfg_.grid(), cfg_.dec_dim);
  decoder_ = nn::TransformerStack(params_, "decoder.stack", cfg_.dec_dim, cfg_.dec_depth, cfg_.dec_heads, rng);
  dec_pred_ = nn::Linear(params_, "decoder.pred", cfg_.dec_dim, cfg_.patch_dim(), true, rng);

  token_embed_ = &params_.add("text.token_embed", randn(vocab_.size(), cfg_.text_dim), false);
  text_pos_ = &params_.add("text.pos_embed", randn(vocab_.max_len(), cfg_.text_dim), false);
  text_encoder_ = nn::TransformerStack(params_, "text.encoder", cfg_.text_dim, cfg_.text_depth, cfg_.text_heads, rng);
  text_proj_ = nn::Linear(params_, "text.proj", cfg_.text_dim, cfg_.proj_dim, false, rng);

  log_tau_ = &params_.add("logit.log_tau", Matrix::Constant(1, 1, static_cast<float>(std::log(cfg_.temperature_init))), false);
}

double Model::temperature() const {
  const double tau = std::exp(static_cast<double>(log_tau_->value(0, 0)));
  return std::clamp(tau, cfg_.temperature_min, cfg_.temperature_max);
}

bool Model::temperature_clamped() const {
  const double tau = std::exp(static_cast<double>(log_tau_->value(0, 0)));
  return tau < cfg_.temperature_min || tau > cfg_.temperature_max;
}

void Model::temperature_backward(double d_tau) {
  if (temperature_clamped()) return;
  log_tau_->grad(0, 0) += static_cast<float>(d_tau * temperature());
}

Matrix Model::patchify(std::span<const float> pixels) const {
  const int s = cfg_.image_size, c = cfg_.channels, p = cfg_.patch_size, g = cfg_.grid();
  const auto expected = static_cast<std::size_t>(s) * s * c;
  if (pixels.size() != expected)
    throw DimensionError("image: expected " + std::to_string(expected) + " values (" + std::to_string(s) + "x" +
                         std::to_string(s) + "x" + std::to_string(c) + "), got " + std::to_string(pixels.size()));
  Matrix out(g * g, cfg_.patch_dim());
  for (int py = 0; py < g; ++py)
    for (int px = 0; px < g; ++px) {
      float* row = out.row(py * g + px).data();
      for (int dy = 0; dy < p; ++dy) {
        const float* src = pixels.data() + (static_cast<std::size_t>(py * p + dy) * s + static_cast<std::size_t>(px * p)) * c;
        std::copy(src, src + p * c, row + dy * p * c);
      }
    }
  return out;
}

Matrix Model::patchify(const corpus::ImageRecord& image) const {
  if (image.height != cfg_.image_size || image.width != cfg_.image_size || image.channels != cfg_.channels)
    throw DimensionError("image " + image.image_id + ": expected " + std::to_string(cfg_.image_size) + "x" +
                         std::to_string(cfg_.image_size) + "x" + std::to_string(cfg_.channels) + ", got " +
                         std::to_string(image.height) + "x" + std::to_string(image.width) + "x" +
                         std::to_string(image.channels));
  const auto px = image.to_float();
  return patchify(std::span<const float>(px));
}

Matrix Model::encoder_forward(const Matrix& patches, const std::vector<int>& positions, const nn::Segments& segs,
                              EncoderTrace* trace) const {
  // Encoder input is centred and scaled; reconstruction targets stay in [0, 1].
  const Matrix centred = ((patches.array() - kPixelMean) / kPixelStd).matrix();
  Matrix x = patch_embed_.forward(centred);
  for (Eigen::Index r = 0; r < x.rows(); ++r) x.row(r) += enc_pos_.row(positions[static_cast<std::size_t>(r)]);
  Matrix out = encoder_.forward(x, segs, trace ? &trace->stack : nullptr);
  if (trace) {
    trace->segs = segs;
    trace->patches = centred;
  }
  return out;
}

void Model::encoder_backward(const EncoderTrace& trace, const std::vector<int>& /*positions*/, const Matrix& d_tokens) {
  Matrix dx = encoder_.backward(trace.stack, trace.segs, d_tokens);
  patch_embed_.accumulate(trace.patches, dx);
}

namespace {

Matrix mean_pool(const Matrix& tokens, const nn::Segments& segs) {
  Matrix pooled = Matrix::Zero(segs.count(), tokens.cols());
  const auto off = segs.offsets();
  for (int s = 0; s < segs.count(); ++s) {
    const int len = segs.lengths[static_cast<std::size_t>(s)];
    if (len > 0) pooled.row(s) = tokens.middleRows(off[static_cast<std::size_t>(s)], len).colwise().mean();
  }
  return pooled;
}

}  // namespace

Matrix Model::image_head_forward(const Matrix& tokens, const nn::Segments& segs, ProjectionTrace* trace) const {
  Matrix pooled = mean_pool(tokens, segs);
  Eigen::VectorXf norms;
  Matrix emb = nn::l2_normalize_rows(image_proj_.forward(pooled), &norms);
  if (trace) {
    trace->pooled = std::move(pooled);
    trace->norms = std::move(norms);
    trace->embedding = emb;
  }
  return emb;
}

Matrix Model::pool_tokens(const Matrix& tokens, const nn::Segments& segs) const { return mean_pool(tokens, segs); }

Matrix Model::pool_backward(const Matrix& d_pooled, const nn::Segments& segs) const {
  Matrix d_tokens(segs.total(), d_pooled.cols());
  const auto off = segs.offsets();
  for (int s = 0; s < segs.count(); ++s) {
    const int len = segs.lengths[static_cast<std::size_t>(s)];
    for (int r = 0; r < len; ++r) d_tokens.row(off[static_cast<std::size_t>(s)] + r) = d_pooled.row(s) / static_cast<float>(len);
  }
  return d_tokens;
}

Matrix Model::image_head_backward(const ProjectionTrace& trace, const nn::Segments& segs, const Matrix& d_embedding) {
  Matrix d_proj = nn::l2_normalize_rows_backward(trace.embedding, trace.norms, d_embedding);
  return pool_backward(image_proj_.backward(trace.pooled, d_proj), segs);
}

Matrix Model::decoder_forward(const Matrix& enc_tokens, const std::vector<int>& positions, const nn::Segments& segs,
                              DecoderTrace* trace) const {
  const int n = cfg_.n_patches();
  const int batch = segs.count();
  Matrix embedded = dec_embed_.forward(enc_tokens);
  Matrix full(static_cast<Eigen::Index>(batch) * n, cfg_.dec_dim);
  std::vector<std::uint8_t> filled(static_cast<std::size_t>(batch) * n, 0);
  std::vector<int> visible_rows(static_cast<std::size_t>(enc_tokens.rows()));
  const auto off = segs.offsets();
  for (int s = 0; s < batch; ++s)
    for (int r = 0; r < segs.lengths[static_cast<std::size_t>(s)]; ++r) {
      const int src = off[static_cast<std::size_t>(s)] + r;
      const int pos = positions[static_cast<std::size_t>(src)];
      if (pos < 0 || pos >= n) throw DimensionError("decoder: patch position " + std::to_string(pos) + " outside the grid");
      const int dst = s * n + pos;
      full.row(dst) = embedded.row(src);
      filled[static_cast<std::size_t>(dst)] = 1;
      visible_rows[static_cast<std::size_t>(src)] = dst;
    }
  std::vector<int> masked_rows;
  for (int row = 0; row < batch * n; ++row) {
    if (!filled[static_cast<std::size_t>(row)]) {
      full.row(row) = mask_token_->value.row(0);
      masked_rows.push_back(row);
    }
    full.row(row) += dec_pos_.row(row % n);
  }
  nn::Segments full_segs = nn::Segments::uniform(batch, n);
  Matrix decoded = decoder_.forward(full, full_segs, trace ? &trace->stack : nullptr);
  Matrix pred = dec_pred_.forward(decoded);
  if (trace) {
    trace->vis_segs = segs;
    trace->full_segs = full_segs;
    trace->enc_tokens = enc_tokens;
    trace->visible_rows = std::move(visible_rows);
    trace->masked_rows = std::move(masked_rows);
    trace->decoded = std::move(decoded);
  }
  return pred;
}

Matrix Model::decoder_backward(const DecoderTrace& trace, const Matrix& d_pred) {
  Matrix d_decoded = dec_pred_.backward(trace.decoded, d_pred);
  Matrix d_full = decoder_.backward(trace.stack, trace.full_segs, d_decoded);
  for (int row : trace.masked_rows) mask_token_->grad.row(0) += d_full.row(row);
  Matrix d_embedded(static_cast<Eigen::Index>(trace.visible_rows.size()), cfg_.dec_dim);
  for (std::size_t i = 0; i < trace.visible_rows.size(); ++i)
    d_embedded.row(static_cast<Eigen::Index>(i)) = d_full.row(trace.visible_rows[i]);
  return dec_embed_.backward(trace.enc_tokens, d_embedded);
}

Matrix Model::text_forward(const std::vector<const text::TokenSequence*>& tokens, TextTrace* trace) const {
  nn::Segments segs;
  std::vector<std::int32_t> ids;
  std::vector<int> positions;
  std::vector<int> pool_rows;
  for (const auto* seq : tokens) {
    if (static_cast<int>(seq->ids.size()) > vocab_.max_len())
      throw DimensionError("token sequence longer than max_len " + std::to_string(vocab_.max_len()));
    const int len = seq->length();
    for (int i = 0; i < len; ++i) {
      const auto id = seq->ids[static_cast<std::size_t>(i)];
      if (id < 0 || id >= vocab_.size()) throw DimensionError("token id " + std::to_string(id) + " outside vocabulary");
      ids.push_back(id);
      positions.push_back(i);
    }
    pool_rows.push_back(static_cast<int>(ids.size()) - 1);
    segs.lengths.push_back(len);
  }
  Matrix x(static_cast<Eigen::Index>(ids.size()), cfg_.text_dim);
  for (std::size_t r = 0; r < ids.size(); ++r)
    x.row(static_cast<Eigen::Index>(r)) = token_embed_->value.row(ids[r]) + text_pos_->value.row(positions[r]);
  Matrix out = text_encoder_.forward(x, segs, trace ? &trace->stack : nullptr);
  Matrix pooled(segs.count(), cfg_.text_dim);
  for (int s = 0; s < segs.count(); ++s) pooled.row(s) = out.row(pool_rows[static_cast<std::size_t>(s)]);
  Eigen::VectorXf norms;
  Matrix emb = nn::l2_normalize_rows(text_proj_.forward(pooled), &norms);
  if (trace) {
    trace->segs = std::move(segs);
    trace->ids = std::move(ids);
    trace->positions = std::move(positions);
    trace->tokens = std::move(out);
    trace->proj.pooled = std::move(pooled);
    trace->proj.norms = std::move(norms);
    trace->proj.embedding = emb;
    trace->proj.pool_rows = std::move(pool_rows);
  }
  return emb;
}

void Model::text_backward(const TextTrace& trace, const Matrix& d_embedding) {
  Matrix d_proj = nn::l2_normalize_rows_backward(trace.proj.embedding, trace.proj.norms, d_embedding);
  Matrix d_pooled = text_proj_.backward(trace.proj.pooled, d_proj);
  Matrix d_out = Matrix::Zero(trace.tokens.rows(), trace.tokens.cols());
  for (std::size_t s = 0; s < trace.proj.pool_rows.size(); ++s)
    d_out.row(trace.proj.pool_rows[s]) += d_pooled.row(static_cast<Eigen::Index>(s));
  Matrix dx = text_encoder_.backward(trace.stack, trace.segs, d_out);
  for (std::size_t r = 0; r < trace.ids.size(); ++r) {
    token_embed_->grad.row(trace.ids[r]) += dx.row(static_cast<Eigen::Index>(r));
    text_pos_->grad.row(trace.positions[r]) += dx.row(static_cast<Eigen::Index>(r));
  }
}

Encoding Model::encode_image(std::span<const float> pixels) const {
  for (float v : pixels)
    if (!std::isfinite(v) || v < 0.0f || v > 1.0f) throw DimensionError("image pixels must be finite and within [0, 1]");
  Matrix patches = patchify(pixels);
  std::vector<int> positions(static_cast<std::size_t>(cfg_.n_patches()));
  std::iota(positions.begin(), positions.end(), 0);
  nn::Segments segs{{cfg_.n_patches()}};
  Matrix tokens = encoder_forward(patches, positions, segs, nullptr);
  ProjectionTrace trace;
  Matrix emb = image_head_forward(tokens, segs, &trace);
  return {trace.pooled.row(0).transpose(), emb.row(0).transpose()};
}

Encoding Model::encode_text(const text::TokenSequence& tokens) const {
  TextTrace trace;
  Matrix emb = text_forward({&tokens}, &trace);
  return {trace.proj.pooled.row(0).transpose(), emb.row(0).transpose()};
}

Encoding Model::encode_text(std::string_view text) const { return encode_text(text::tokenize(text, vocab_)); }

Matrix Model::image_features(const std::vector<const corpus::ImageRecord*>& images) const {
  constexpr std::size_t kChunk = 64;
  const int n = cfg_.n_patches();
  Matrix out(static_cast<Eigen::Index>(images.size()), cfg_.enc_dim);
  std::vector<int> base(static_cast<std::size_t>(n));
  std::iota(base.begin(), base.end(), 0);
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    const std::size_t count = std::min(kChunk, images.size() - start);
    Matrix patches(static_cast<Eigen::Index>(count) * n, cfg_.patch_dim());
    std::vector<int> positions;
    for (std::size_t i = 0; i < count; ++i) {
      patches.middleRows(static_cast<Eigen::Index>(i) * n, n) = patchify(*images[start + i]);
      positions.insert(positions.end(), base.begin(), base.end());
    }
    auto segs = nn::Segments::uniform(static_cast<int>(count), n);
    Matrix tokens = encoder_forward(patches, positions, segs, nullptr);
    out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(count)) = mean_pool(tokens, segs);
  }
  return out;
}

Matrix Model::project_features(const Matrix& features) const {
  return nn::l2_normalize_rows(image_proj_.forward(features), nullptr);
}

Matrix Model::embed_images(const std::vector<const corpus::ImageRecord*>& images) const {
  return project_features(image_features(images));
}

Matrix Model::embed_texts(const std::vector<std::string>& texts) const {
  std::vector<text::TokenSequence> seqs;
  seqs.reserve(texts.size());
  for (const auto& t : texts) seqs.push_back(text::tokenize(t, vocab_));
  std::vector<const text::TokenSequence*> ptrs;
  for (const auto& s : seqs) ptrs.push_back(&s);
  if (ptrs.empty()) return Matrix(0, cfg_.proj_dim);
  return text_forward(ptrs, nullptr);
}

MaskedInput Model::mask_patch_matrix(const Matrix& patches, double mask_ratio, nn::Rng& rng) const {
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) throw ConfigError("mask_ratio must lie in [0, 1)");
  const int n = static_cast<int>(patches.rows());
  const auto n_mask = static_cast<int>(std::lround(mask_ratio * n));
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  // Fisher-Yates from raw 64-bit draws so the mask is identical on every
  // standard library.
  for (int i = n - 1; i > 0; --i) {
    const auto j = static_cast<int>(rng() % static_cast<std::uint64_t>(i + 1));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  MaskedInput out;
  out.mask.masked.assign(static_cast<std::size_t>(n), 0);
  for (int i = 0; i < n_mask; ++i) out.mask.masked[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 1;
  for (int p = 0; p < n; ++p)
    if (!out.mask.masked[static_cast<std::size_t>(p)]) out.positions.push_back(p);
  out.visible.resize(static_cast<Eigen::Index>(out.positions.size()), patches.cols());
  for (std::size_t i = 0; i < out.positions.size(); ++i) out.visible.row(static_cast<Eigen::Index>(i)) = patches.row(out.positions[i]);
  return out;
}

MaskedInput Model::mask_patches(std::span<const float> pixels, double mask_ratio, nn::Rng& rng) const {
  return mask_patch_matrix(patchify(pixels), mask_ratio, rng);
}

Matrix Model::reconstruct(const MaskedInput& input) const {
  if (input.mask.size() != cfg_.n_patches())
    throw DimensionError("reconstruct: mask covers " + std::to_string(input.mask.size()) + " patches, model grid has " +
                         std::to_string(cfg_.n_patches()));
  if (input.visible.cols() != cfg_.patch_dim() || static_cast<std::size_t>(input.visible.rows()) != input.positions.size() ||
      static_cast<int>(input.positions.size()) != cfg_.n_patches() - input.mask.count())
    throw DimensionError("reconstruct: visible tokens do not match the mask");
  nn::Segments segs{{static_cast<int>(input.positions.size())}};
  Matrix tokens = encoder_forward(input.visible, input.positions, segs, nullptr);
  return decoder_forward(tokens, input.positions, segs, nullptr);
}

std::vector<nn::Parameter*> Model::trainable() {
  std::vector<nn::Parameter*> out;
  for (auto* p : params_.all())
    if (p != log_tau_ || cfg_.learnable_temperature) out.push_back(p);
  return out;
}

std::vector<nn::Parameter*> Model::image_encoder_params() {
  auto out = params_.with_prefix("image.patch_embed");
  auto enc = params_.with_prefix("image.encoder");
  out.insert(out.end(), enc.begin(), enc.end());
  return out;
}

std::vector<nn::Parameter*> Model::text_encoder_params() { return params_.with_prefix("text."); }

// --- checkpoint container ---------------------------------------------------

namespace {

constexpr char kMagic[] = "MCLAB-CKPT";
constexpr std::size_t kMagicLen = sizeof(kMagic) - 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in, const std::string& what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw ParseError("checkpoint truncated while reading " + what);
  return v;
}

void put_string(std::ostream& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in, const std::string& what) {
  const auto n = get<std::uint64_t>(in, what);
  if (n > (1ULL << 32)) throw ParseError("checkpoint: implausible length for " + what);
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw ParseError("checkpoint truncated while reading " + what);
  return s;
}

void put_matrix(std::ostream& out, const Matrix& m) {
  put<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
  put<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
  out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float)));
}

Matrix get_matrix(std::istream& in, const std::string& what) {
  const auto rows = get<std::uint64_t>(in, what);
  const auto cols = get<std::uint64_t>(in, what);
  if (rows * cols > (1ULL << 30)) throw ParseError("checkpoint: implausible shape for " + what);
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float)));
  if (!in) throw ParseError("checkpoint truncated while reading " + what);
  return m;
}

bool same(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), static_cast<std::size_t>(a.size()) * sizeof(float)) == 0;
}

}  // namespace

bool Checkpoint::operator==(const Checkpoint& o) const {
  if (!(config == o.config && vocabulary == o.vocabulary && optimizer_steps == o.optimizer_steps && step == o.step &&
        epoch == o.epoch && rng_state == o.rng_state && val_loss == o.val_loss && best_val_loss == o.best_val_loss &&
        seed == o.seed && extra_json == o.extra_json && params.size() == o.params.size() &&
        moments.size() == o.moments.size()))
    return false;
  for (const auto& [name, m] : params) {
    auto it = o.params.find(name);
    if (it == o.params.end() || !same(m, it->second)) return false;
  }
  for (const auto& [name, mv] : moments) {
    auto it = o.moments.find(name);
    if (it == o.moments.end() || !same(mv.first, it->second.first) || !same(mv.second, it->second.second)) return false;
  }
  return true;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ostringstream vocab_text;
  ckpt.vocabulary.write(vocab_text);
  json meta = {{"config", ckpt.config},
               {"vocabulary", vocab_text.str()},
               {"optimizer_steps", ckpt.optimizer_steps},
               {"step", ckpt.step},
               {"epoch", ckpt.epoch},
               {"rng_state", ckpt.rng_state},
               {"val_loss", ckpt.val_loss},
               {"best_val_loss", ckpt.best_val_loss},
               {"seed", ckpt.seed},
               {"extra", ckpt.extra_json}};

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out.write(kMagic, kMagicLen);
    put<std::uint32_t>(out, kCheckpointFormatVersion);
    put_string(out, meta.dump());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.params.size()));
    for (const auto& [name, m] : ckpt.params) {
      put_string(out, name);
      put_matrix(out, m);
    }
    put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.moments.size()));
    for (const auto& [name, mv] : ckpt.moments) {
      put_string(out, name);
      put_matrix(out, mv.first);
      put_matrix(out, mv.second);
    }
    if (!out) throw IoError("short write to checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[kMagicLen];
  in.read(magic, kMagicLen);
  if (!in || std::memcmp(magic, kMagic, kMagicLen) != 0) throw ParseError(path.string() + " is not an mclab checkpoint");
  const auto version = get<std::uint32_t>(in, "format_version");
  if (version != kCheckpointFormatVersion)
    throw ParseError("checkpoint format_version " + std::to_string(version) + " is not supported (expected " +
                     std::to_string(kCheckpointFormatVersion) + ")");
  Checkpoint c;
  try {
    const auto meta = json::parse(get_string(in, "metadata"));
    c.config = meta.at("config").get<ModelConfig>();
    std::istringstream vs(meta.at("vocabulary").get<std::string>());
    c.vocabulary = text::Vocabulary::read(vs);
    c.optimizer_steps = meta.at("optimizer_steps").get<std::int64_t>();
    c.step = meta.at("step").get<std::int64_t>();
    c.epoch = meta.at("epoch").get<std::int64_t>();
    c.rng_state = meta.at("rng_state").get<std::string>();
    c.val_loss = meta.at("val_loss").get<double>();
    c.best_val_loss = meta.at("best_val_loss").get<double>();
    c.seed = meta.at("seed").get<std::uint64_t>();
    c.extra_json = meta.at("extra").get<std::string>();
  } catch (const json::exception& e) {
    throw ParseError("checkpoint metadata: " + std::string(e.what()));
  }
  const auto n_params = get<std::uint32_t>(in, "parameter count");
  for (std::uint32_t i = 0; i < n_params; ++i) {
    auto name = get_string(in, "parameter name");
    c.params.emplace(name, get_matrix(in, name));
  }
  const auto n_moments = get<std::uint32_t>(in, "moment count");
  for (std::uint32_t i = 0; i < n_moments; ++i) {
    auto name = get_string(in, "moment name");
    Matrix m = get_matrix(in, name);
    Matrix v = get_matrix(in, name);
    c.moments.emplace(name, std::make_pair(std::move(m), std::move(v)));
  }
  return c;
}

Checkpoint make_checkpoint(const Model& model) {
  Checkpoint c;
  c.config = model.config();
  c.vocabulary = model.vocabulary();
  for (const auto* p : model.params().all()) c.params.emplace(p->name, p->value);
  return c;
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
  Model m(ckpt.config, ckpt.vocabulary, ckpt.seed);
  for (auto* p : m.params().all()) {
    auto it = ckpt.params.find(p->name);
    if (it == ckpt.params.end()) throw IntegrityError("checkpoint lacks parameter " + p->name);
    if (it->second.rows() != p->value.rows() || it->second.cols() != p->value.cols())
      throw DimensionError("checkpoint parameter " + p->name + " has the wrong shape");
    p->value = it->second;
  }
  return m;
}

}  // namespace mclab::model
