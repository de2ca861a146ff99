// Copyright 2026 The mclab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "mclab/corpus.hpp"
#include "mclab/nn.hpp"
#include "mclab/text.hpp"

namespace mclab::model {

struct ModelConfig {
  int image_size = 224;
  int channels = 3;
  int patch_size = 16;
  int enc_dim = 128;
  int enc_depth = 4;
  int enc_heads = 4;
  int dec_dim = 64;
  int dec_depth = 2;
  int dec_heads = 4;
  int text_dim = 128;
  int text_depth = 2;
  int text_heads = 4;
  int proj_dim = 128;
  double mask_ratio = 0.75;
  double temperature_init = 0.07;
  bool learnable_temperature = true;
  double temperature_min = 0.01;
  double temperature_max = 100.0;

  /// Desk-scale defaults for 64x64 synthetic images.
  static ModelConfig synthetic();

  void validate() const;
  [[nodiscard]] int grid() const { return image_size / patch_size; }
  [[nodiscard]] int n_patches() const { return grid() * grid(); }
  [[nodiscard]] int patch_dim() const { return patch_size * patch_size * channels; }

  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// True marks a masked patch.
struct PatchMask {
  std::vector<std::uint8_t> masked;

  [[nodiscard]] int size() const { return static_cast<int>(masked.size()); }
  [[nodiscard]] int count() const;
  bool operator==(const PatchMask&) const = default;
};

struct MaskedInput {
  nn::Matrix visible;              // visible patches, one row each
  std::vector<int> positions;      // grid index of every visible row
  PatchMask mask;
};

struct Encoding {
  Eigen::VectorXf features;   // pooled encoder output
  Eigen::VectorXf embedding;  // unit-norm projection
};

struct EncoderTrace {
  nn::Segments segs;
  nn::Matrix patches;
  nn::StackCache stack;
};

struct ProjectionTrace {
  nn::Matrix pooled;
  Eigen::VectorXf norms;
  nn::Matrix embedding;
  std::vector<int> pool_rows;  // text: row of the end token per sequence
};

struct DecoderTrace {
  nn::Segments vis_segs;
  nn::Segments full_segs;
  nn::Matrix enc_tokens;
  std::vector<int> visible_rows;  // full-grid row for each encoder row
  std::vector<int> masked_rows;
  nn::StackCache stack;
  nn::Matrix decoded;
};

struct TextTrace {
  nn::Segments segs;
  std::vector<std::int32_t> ids;
  std::vector<int> positions;
  nn::StackCache stack;
  nn::Matrix tokens;
  ProjectionTrace proj;
};

/// Shared image encoder, text encoder, masked-patch decoder and projection
/// heads. Inference methods are const and may run concurrently; the training
/// methods accumulate gradients into params() and need a single caller.
class Model {
 public:
  Model(const ModelConfig& cfg, text::Vocabulary vocab, std::uint64_t seed);
  // Layers hold pointers into params_, whose heap storage survives a move.
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  [[nodiscard]] const ModelConfig& config() const { return cfg_; }
  [[nodiscard]] const text::Vocabulary& vocabulary() const { return vocab_; }
  nn::ParameterSet& params() { return params_; }
  [[nodiscard]] const nn::ParameterSet& params() const { return params_; }

  /// Effective temperature, clamped to the configured range.
  [[nodiscard]] double temperature() const;
  [[nodiscard]] bool temperature_clamped() const;

  [[nodiscard]] nn::Matrix patchify(std::span<const float> pixels) const;
  [[nodiscard]] nn::Matrix patchify(const corpus::ImageRecord& image) const;

  [[nodiscard]] Encoding encode_image(std::span<const float> pixels) const;
  [[nodiscard]] Encoding encode_text(const text::TokenSequence& tokens) const;
  [[nodiscard]] Encoding encode_text(std::string_view text) const;

  /// Batched inference. Rows follow input order.
  [[nodiscard]] nn::Matrix image_features(const std::vector<const corpus::ImageRecord*>& images) const;
  [[nodiscard]] nn::Matrix embed_images(const std::vector<const corpus::ImageRecord*>& images) const;
  [[nodiscard]] nn::Matrix embed_texts(const std::vector<std::string>& texts) const;
  /// Unit-norm embeddings from pooled encoder features.
  [[nodiscard]] nn::Matrix project_features(const nn::Matrix& features) const;

  [[nodiscard]] MaskedInput mask_patches(std::span<const float> pixels, double mask_ratio, nn::Rng& rng) const;
  [[nodiscard]] MaskedInput mask_patch_matrix(const nn::Matrix& patches, double mask_ratio, nn::Rng& rng) const;
  /// Per-patch pixel predictions for the full grid (n_patches x patch_dim).
  [[nodiscard]] nn::Matrix reconstruct(const MaskedInput& input) const;

  // Training passes. `positions` lists the grid cell of every patch row.
  nn::Matrix encoder_forward(const nn::Matrix& patches, const std::vector<int>& positions, const nn::Segments& segs,
                             EncoderTrace* trace) const;
  void encoder_backward(const EncoderTrace& trace, const std::vector<int>& positions, const nn::Matrix& d_tokens);

  /// Mean over each segment's token rows, and its adjoint.
  [[nodiscard]] nn::Matrix pool_tokens(const nn::Matrix& tokens, const nn::Segments& segs) const;
  [[nodiscard]] nn::Matrix pool_backward(const nn::Matrix& d_pooled, const nn::Segments& segs) const;

  nn::Matrix image_head_forward(const nn::Matrix& tokens, const nn::Segments& segs, ProjectionTrace* trace) const;
  nn::Matrix image_head_backward(const ProjectionTrace& trace, const nn::Segments& segs, const nn::Matrix& d_embedding);

  nn::Matrix decoder_forward(const nn::Matrix& enc_tokens, const std::vector<int>& positions, const nn::Segments& segs,
                             DecoderTrace* trace) const;
  nn::Matrix decoder_backward(const DecoderTrace& trace, const nn::Matrix& d_pred);

  nn::Matrix text_forward(const std::vector<const text::TokenSequence*>& tokens, TextTrace* trace) const;
  void text_backward(const TextTrace& trace, const nn::Matrix& d_embedding);

  /// Adds d(loss)/d(tau) into the temperature parameter's gradient.
  void temperature_backward(double d_tau);

  /// Parameters updated during pretraining.
  std::vector<nn::Parameter*> trainable();
  /// Image encoder parameters (patch embedding + transformer stack).
  std::vector<nn::Parameter*> image_encoder_params();
  std::vector<nn::Parameter*> text_encoder_params();

 private:
  ModelConfig cfg_;
  text::Vocabulary vocab_;
  nn::ParameterSet params_;
  nn::Linear patch_embed_;
  nn::Matrix enc_pos_;
  nn::TransformerStack encoder_;
  nn::Linear image_proj_;
  nn::Linear dec_embed_;
  nn::Parameter* mask_token_ = nullptr;
  nn::Matrix dec_pos_;
  nn::TransformerStack decoder_;
  nn::Linear dec_pred_;
  nn::Parameter* token_embed_ = nullptr;
  nn::Parameter* text_pos_ = nullptr;
  nn::TransformerStack text_encoder_;
  nn::Linear text_proj_;
  nn::Parameter* log_tau_ = nullptr;
};

/// Self-contained binary container for model and training state.
struct Checkpoint {
  ModelConfig config;
  text::Vocabulary vocabulary;
  std::map<std::string, nn::Matrix> params;
  std::int64_t optimizer_steps = 0;
  std::map<std::string, std::pair<nn::Matrix, nn::Matrix>> moments;
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  std::string rng_state;
  double val_loss = 0;
  double best_val_loss = 0;
  std::uint64_t seed = 0;
  /// Free-form extra metadata (for example a fine-tuned head's class list).
  std::string extra_json = "{}";

  bool operator==(const Checkpoint& other) const;
};

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Snapshot of every model parameter.
Checkpoint make_checkpoint(const Model& model);
/// Rebuilds a model from a checkpoint; every model parameter must be present
/// with the expected shape.
Model model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace mclab::model
