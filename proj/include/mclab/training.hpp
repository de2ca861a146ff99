// Copyright 2026 The mclab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "mclab/corpus.hpp"
#include "mclab/losses.hpp"
#include "mclab/model.hpp"
#include "mclab/nn.hpp"
#include "mclab/text.hpp"

namespace mclab::training {

// --- learning-rate schedules ---------------------------------------------------

/// Linear warmup from 0 to `peak` over `warmup` units, then cosine from `peak`
/// to `final_value` at unit `total`. Units are counted from 1; anything past
/// `total` returns `final_value`.
struct WarmupCosine {
  double peak = 0;
  double final_value = 0;
  std::int64_t warmup = 0;
  std::int64_t total = 1;

  [[nodiscard]] double at(std::int64_t unit) const;
};

enum class ScheduleKind { pretrain, finetune };

/// Pretraining schedules advance per optimizer step; fine-tuning schedules
/// advance per epoch.
struct LrSchedule {
  ScheduleKind kind = ScheduleKind::pretrain;
  WarmupCosine curve;
};

/// Learning rate for 0-based `step` within 0-based `epoch`.
double lr_at(std::int64_t step, std::int64_t epoch, const LrSchedule& schedule);

// --- pretraining -------------------------------------------------------------

struct PretrainConfig {
  double base_lr = 1e-3;
  int warmup_epochs = 2;
  /// When set, warmup is this many optimizer steps instead of whole epochs.
  std::optional<int> warmup_steps;
  int total_epochs = 20;
  int batch_size = 64;
  losses::LossWeights weights;
  double mask_ratio = 0.75;
  std::uint64_t seed = 7;
  /// Also write `last.ckpt` every this many epochs (0 disables).
  int checkpoint_every = 1;
  /// Fraction of train patients held out for validation when the corpus has
  /// no val split.
  double val_fraction = 0.1;
  losses::ReconTarget recon_target = losses::ReconTarget::masked_only;
  nn::AdamWConfig optimizer;

  void validate() const;
};

void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);

int steps_per_epoch(std::size_t n_train, int batch_size);
LrSchedule pretrain_schedule(const PretrainConfig& cfg, int steps_per_epoch);

/// Text handed to the text encoder for a keyword-labelled image: the
/// keywords prefixed with the image's modality, in zero-shot prompt form.
std::string training_text(const corpus::ImageRecord& image, const text::KeywordSet& keywords);
/// Every training text of the given patients (input to Vocabulary::fit).
std::vector<std::string> training_texts(const std::vector<const corpus::PatientRecord*>& patients);

struct Sample {
  const corpus::PatientRecord* patient = nullptr;
  const corpus::ImageRecord* image = nullptr;
  const corpus::ImageRecord* partner = nullptr;  // same patient, other modality
  std::optional<text::TokenSequence> text;

  [[nodiscard]] bool feeds_text() const { return text.has_value(); }
  [[nodiscard]] bool feeds_pair() const { return partner != nullptr; }
};

struct Batch {
  std::vector<Sample> samples;
  [[nodiscard]] int n_text() const;
  [[nodiscard]] int n_pairs() const;
  [[nodiscard]] std::vector<std::string> image_ids() const;
};

/// Draws `batch_size` distinct patients uniformly (all of them when the pool
/// is smaller) and composes their samples.
Batch compose_batch(const std::vector<const corpus::PatientRecord*>& pool, int batch_size,
                    const text::Vocabulary& vocab, nn::Rng& rng);
/// Composes samples for the given patients in order: one uniformly chosen
/// image, one uniformly chosen cross-modality partner when any exists, and
/// the keyword text when the patient has one.
Batch compose_samples(const std::vector<const corpus::PatientRecord*>& patients, const text::Vocabulary& vocab,
                      nn::Rng& rng);

/// Forward pass over a batch and, when `backward` is set, gradient
/// accumulation into the model. Terms with zero weight are skipped entirely.
losses::LossBreakdown pretrain_step(model::Model& model, const Batch& batch, const PretrainConfig& cfg,
                                    nn::Rng& mask_rng, bool backward);

struct StepRecord {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  double lr = 0;
  losses::LossBreakdown loss;
};

void to_json(nlohmann::json& j, const StepRecord& r);

struct EpochRecord {
  std::int64_t epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  bool improved = false;
};

struct TrainState {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  nn::Rng rng;
  double best_val_loss = 0;
  std::int64_t best_epoch = -1;
  std::vector<StepRecord> history;
  std::vector<EpochRecord> epochs;
};

struct PretrainResult {
  std::filesystem::path best_checkpoint;
  TrainState state;
  int steps_per_epoch = 0;
  LrSchedule schedule;
};

struct PretrainHooks {
  /// Called after every optimizer step with the freshly updated model.
  std::function<void(const model::Model&, const StepRecord&)> on_step;
};

/// Full pretraining run. Writes `logs/train.jsonl` (one record per step),
/// `logs/val.jsonl` (one per epoch) and `checkpoints/best.ckpt` (lowest
/// validation loss) under `out_dir`.
PretrainResult pretrain(const corpus::CorpusManifest& corpus, const model::ModelConfig& model_cfg,
                        const PretrainConfig& cfg, const std::filesystem::path& out_dir,
                        const PretrainHooks& hooks = {});

/// Mean combined loss over a patient set with fixed masks and partner picks.
double validation_loss(model::Model& model, const std::vector<const corpus::PatientRecord*>& patients,
                       const PretrainConfig& cfg);

// --- fine-tuning ---------------------------------------------------------------

enum class FinetuneMode { single_label, multi_label };

struct FinetuneConfig {
  FinetuneMode mode = FinetuneMode::single_label;
  int total_epochs = 50;
  int freeze_epochs = 5;
  int warmup_epochs = 10;
  double peak_lr = 5e-4;
  double final_lr = 1e-6;
  int batch_size = 16;
  double weight_decay = 0.05;
  std::uint64_t seed = 7;

  /// 30 epochs, batch 4, constant learning rate 0.01.
  static FinetuneConfig multi_label_defaults();
  void validate() const;
};

void to_json(nlohmann::json& j, const FinetuneConfig& c);
void from_json(const nlohmann::json& j, FinetuneConfig& c);

LrSchedule finetune_schedule(const FinetuneConfig& cfg);

/// Images with per-class 0/1 targets. Single-label sets are one-hot.
struct LabeledSet {
  std::vector<const corpus::ImageRecord*> images;
  std::vector<std::string> class_names;
  std::vector<std::vector<std::uint8_t>> targets;

  [[nodiscard]] std::size_t size() const { return images.size(); }
  [[nodiscard]] int n_classes() const { return static_cast<int>(class_names.size()); }
  /// Class index of a single-label row.
  [[nodiscard]] int label_of(std::size_t i) const;
  [[nodiscard]] std::vector<int> labels() const;
};

/// Latent-class labels for every image of the given patients.
LabeledSet latent_class_set(const corpus::CorpusManifest& corpus, const std::vector<const corpus::PatientRecord*>& patients);

/// Pretrained encoder plus an MLP head over pooled image features.
class Classifier {
 public:
  Classifier(model::Model encoder, int n_outputs, FinetuneMode mode, std::uint64_t seed);

  [[nodiscard]] FinetuneMode mode() const { return mode_; }
  [[nodiscard]] int n_outputs() const { return n_outputs_; }
  model::Model& encoder() { return encoder_; }
  [[nodiscard]] const model::Model& encoder() const { return encoder_; }
  nn::ParameterSet& head_params() { return head_params_; }
  nn::MlpHead& head() { return head_; }

  [[nodiscard]] nn::Matrix logits_from_features(const nn::Matrix& features) const;
  /// Softmax rows (single-label) or independent sigmoids (multi-label).
  [[nodiscard]] nn::Matrix probabilities_from_logits(const nn::Matrix& logits) const;
  [[nodiscard]] nn::Matrix predict_proba(const std::vector<const corpus::ImageRecord*>& images) const;

  /// Encoder and head parameter values by name.
  [[nodiscard]] std::map<std::string, nn::Matrix> snapshot() const;
  void restore(const std::map<std::string, nn::Matrix>& values);

 private:
  model::Model encoder_;
  nn::ParameterSet head_params_;
  nn::MlpHead head_;
  FinetuneMode mode_;
  int n_outputs_;
};

struct FinetuneEpoch {
  std::int64_t epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double val_auroc = 0;
  bool encoder_frozen = false;
};

struct FinetuneHooks {
  /// Called after every epoch's training, before validation.
  std::function<void(const Classifier&, const FinetuneEpoch&)> on_epoch;
};

struct FinetuneResult {
  std::unique_ptr<Classifier> classifier;  // weights of the best validation epoch
  std::vector<FinetuneEpoch> history;
  std::int64_t best_epoch = -1;
  double best_val_auroc = 0;
};

/// Encoder frozen for `freeze_epochs`, then trained jointly with the head.
/// After each epoch the head is scored on `val` and the weights with the
/// highest macro AUROC are kept.
FinetuneResult finetune(const model::Checkpoint& pretrained, const LabeledSet& train, const LabeledSet& val,
                        const FinetuneConfig& cfg, const FinetuneHooks& hooks = {});

struct FewshotSample {
  LabeledSet subset;
  std::vector<std::string> warnings;
};

/// Uniform sample without replacement of min(n, available) items per class.
FewshotSample fewshot_sample(const LabeledSet& set, int n_per_class, std::uint64_t seed);

}  // namespace mclab::training
