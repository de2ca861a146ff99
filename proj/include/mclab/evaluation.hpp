// Copyright 2026 The mclab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include "mclab/corpus.hpp"
#include "mclab/metrics.hpp"
#include "mclab/model.hpp"
#include "mclab/training.hpp"

namespace mclab::evaluation {

// --- embedding store ---------------------------------------------------------------

enum class Side : std::uint8_t { image = 0, text = 1 };

std::string_view to_string(Side s);
Side side_from_string(std::string_view s);

/// Unit-norm embeddings with one id and one metadata object per row.
struct EmbeddingStore {
  Side side = Side::image;
  std::vector<std::string> ids;
  nn::Matrix matrix;
  std::vector<std::string> metadata;  // compact JSON object per row

  [[nodiscard]] std::size_t size() const { return ids.size(); }
  /// Throws ValidationError on duplicate or malformed ids, shape mismatches
  /// and rows whose norm is off by more than 1e-6.
  void validate() const;
  bool operator==(const EmbeddingStore& other) const;
};

inline constexpr std::uint32_t kEmbeddingStoreVersion = 1;

void save_embedding_store(const EmbeddingStore& store, const std::filesystem::path& path);
EmbeddingStore load_embedding_store(const std::filesystem::path& path);

/// Image rows for every image of the given patients, in patient then image order.
EmbeddingStore embed_image_store(const model::Model& model, const std::vector<const corpus::PatientRecord*>& patients);
/// One prompt per (modality, class) pair of the corpus.
EmbeddingStore embed_prompt_store(const model::Model& model, const corpus::CorpusManifest& corpus);

// --- zero-shot ---------------------------------------------------------------------

struct ZeroShotResult {
  std::vector<double> scores;  // cosine similarity per class, input order
  std::size_t predicted = 0;
  std::string predicted_class;
};

/// Scores an image embedding against class prompt embeddings; the highest
/// score wins and ties go to the earliest class.
ZeroShotResult zero_shot_classify(const Eigen::VectorXf& image,
                                  const std::vector<std::pair<std::string, Eigen::VectorXf>>& class_prompts);

/// Class probabilities for every image: softmax over the cosine similarities
/// to the prompts "<modality>, <class>" divided by the model temperature.
Eigen::MatrixXd zero_shot_scores(const model::Model& model, const std::vector<const corpus::ImageRecord*>& images,
                                 const std::vector<std::string>& class_names);

// --- reports -------------------------------------------------------------------------

struct MetricReport {
  std::string protocol;
  std::string dataset;
  std::string metric;
  double value = 0;
  double ci_low = 0;
  double ci_high = 0;
  std::size_t n = 0;
  std::optional<std::uint64_t> seed;
  std::optional<int> n_per_class;
  std::optional<double> p_value;
  std::optional<std::string> comparator;

  void validate() const;
};

void to_json(nlohmann::json& j, const MetricReport& r);
void from_json(const nlohmann::json& j, MetricReport& r);

void write_reports(const std::vector<MetricReport>& reports, const std::filesystem::path& path);
std::vector<MetricReport> read_reports(const std::filesystem::path& path);

/// Report whose value is the mean of `values`, with its 1.96 SE interval.
MetricReport summarize(std::string protocol, std::string dataset, std::string metric, const std::vector<double>& values);

// --- protocols -----------------------------------------------------------------------

/// Patient-level train/val/test partition of a labelled pool.
struct DownstreamSplit {
  training::LabeledSet train;
  training::LabeledSet val;
  training::LabeledSet test;
};

/// Shuffles patients (seeded) and cuts them by the given fractions.
DownstreamSplit downstream_split(const corpus::CorpusManifest& corpus,
                                 const std::vector<const corpus::PatientRecord*>& patients, std::uint64_t seed,
                                 double train_fraction = 0.55, double val_fraction = 0.15);

/// Per-class AUROC values and their macro mean.
struct ClassScores {
  std::vector<double> auroc;
  std::vector<double> aupr;
};
ClassScores per_class_scores(const Eigen::MatrixXd& scores, const LabelMatrix& targets);

std::vector<MetricReport> zeroshot_protocol(const model::Model& model, const training::LabeledSet& test,
                                            const std::string& dataset);

struct RetrievalSetup {
  std::vector<int> ks{1, 5, 10};
  /// Gallery size in images: whole patients are taken in id order while
  /// their images fit.
  std::size_t gallery_items = 200;
};

std::vector<MetricReport> retrieval_protocol(const model::Model& model, const corpus::CorpusManifest& corpus,
                                             const std::vector<const corpus::PatientRecord*>& patients,
                                             const RetrievalSetup& setup, const std::string& dataset);

struct FewshotSetup {
  std::vector<int> shots{1, 2, 4, 8, 16};
  int n_seeds = 5;
  std::uint64_t seed = 7;
  training::FinetuneConfig finetune;
};

/// Every (n, seed) run trains on a fresh sample of the train set, selects on
/// `val` and scores on the fixed `test` set.
std::vector<MetricReport> fewshot_protocol(const model::Checkpoint& checkpoint, const DownstreamSplit& split,
                                           const FewshotSetup& setup, const std::string& dataset,
                                           std::vector<std::string>* warnings = nullptr);

std::vector<MetricReport> finetune_protocol(const model::Checkpoint& checkpoint, const DownstreamSplit& split,
                                            const training::FinetuneConfig& cfg, const std::string& dataset);

enum class Protocol { zeroshot, fewshot, finetune, retrieval };

Protocol protocol_from_string(std::string_view s);
std::string_view to_string(Protocol p);

struct EvalConfig {
  std::string dataset = "synthetic";
  std::uint64_t seed = 7;
  RetrievalSetup retrieval;
  std::vector<int> shots{1, 2, 4, 8, 16};
  int n_seeds = 5;
  /// Restricts zero-shot and fine-tune evaluation to these classes (all when empty).
  std::vector<std::string> classes;

  void validate() const;
};

void to_json(nlohmann::json& j, const EvalConfig& c);
void from_json(const nlohmann::json& j, EvalConfig& c);

/// Runs one protocol on the corpus test split. Zero-shot and retrieval use
/// the whole split; fine-tune and few-shot use its 55:15:30 patient partition.
std::vector<MetricReport> evaluate_protocol(const model::Checkpoint& checkpoint, const corpus::CorpusManifest& corpus,
                                            Protocol protocol, const EvalConfig& eval,
                                            const training::FinetuneConfig& finetune,
                                            std::vector<std::string>* warnings = nullptr);

}  // namespace mclab::evaluation
