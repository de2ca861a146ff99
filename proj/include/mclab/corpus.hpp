// Copyright 2026 The mclab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mclab/text.hpp"

namespace mclab::corpus {

/// Imaging modality tag such as "CFP" or "OCT". Non-empty and uppercase.
class Modality {
 public:
  explicit Modality(std::string tag);
  [[nodiscard]] const std::string& tag() const { return tag_; }
  auto operator<=>(const Modality&) const = default;

 private:
  std::string tag_;
};

/// The five named modalities, used when a corpus does not declare its own.
std::vector<Modality> default_modalities();

/// One examination image. Pixels are stored 8-bit (H x W x C, interleaved)
/// and exposed as value / 255, which keeps persisted and in-memory images
/// identical.
struct ImageRecord {
  std::string image_id;
  std::string patient_id;
  Modality modality{"CFP"};
  int height = 224;
  int width = 224;
  int channels = 3;
  std::vector<std::uint8_t> pixels;

  [[nodiscard]] std::size_t size() const { return pixels.size(); }
  [[nodiscard]] float value(std::size_t i) const { return static_cast<float>(pixels[i]) / 255.0f; }
  [[nodiscard]] std::vector<float> to_float() const;
  [[nodiscard]] std::string relative_path() const { return "images/" + image_id + ".ppm"; }

  bool operator==(const ImageRecord&) const = default;
};

enum class Split { train, val, test };

std::string_view to_string(Split s);
Split split_from_string(std::string_view s);

struct PatientRecord {
  std::string patient_id;
  Split split = Split::train;
  std::vector<ImageRecord> images;
  std::optional<text::KeywordSet> keywords;
  /// Ground-truth class of synthetic patients. Only evaluation reads it.
  std::optional<int> latent_class;

  bool operator==(const PatientRecord&) const = default;
};

struct CorpusManifest {
  std::vector<Modality> modality_set;
  std::optional<std::uint64_t> generator_seed;
  /// Display name of each latent class (keyword text), index == class id.
  std::vector<std::string> class_names;
  std::vector<PatientRecord> records;

  /// Checks every corpus invariant; throws ValidationError on the first
  /// violation found.
  void validate() const;
  [[nodiscard]] std::vector<const PatientRecord*> patients(Split s) const;
  [[nodiscard]] std::size_t image_count() const;

  bool operator==(const CorpusManifest&) const = default;
};

/// Every unordered cross-modality image pair of the patient, each pair as
/// (smaller id, larger id), sorted lexicographically.
std::vector<std::pair<const ImageRecord*, const ImageRecord*>> pair_examinations(const PatientRecord& patient);

struct GeneratorConfig {
  int n_patients = 2200;
  int n_val = 200;
  int n_test = 400;
  int n_latent_classes = 4;
  std::vector<Modality> modality_set{Modality("CFP"), Modality("OCT")};
  int images_per_patient_per_modality = 1;
  double text_fraction = 0.25;
  int image_size = 64;
  double noise_sigma = 0.08;

  void validate() const;
};

/// Synthetic class catalogue: report sentence and keyword labels per class.
struct SyntheticClass {
  std::string report;
  text::KeywordSet keywords;
};
const std::vector<SyntheticClass>& synthetic_classes();

/// Builds a fully reproducible synthetic corpus. Each patient draws a latent
/// class; every modality renders the class pattern through its own fixed
/// transform, plus a patient-specific component shared across modalities and
/// per-image noise.
CorpusManifest generate_synthetic_corpus(const GeneratorConfig& cfg, std::uint64_t seed);

inline constexpr int kManifestFormatVersion = 1;
inline constexpr const char* kManifestFileName = "manifest.jsonl";

/// Writes `manifest.jsonl` plus one PPM per image below `dir`.
void persist_corpus(const CorpusManifest& manifest, const std::filesystem::path& dir);
/// Accepts the corpus directory or the manifest file itself.
CorpusManifest load_corpus(const std::filesystem::path& path);

void write_ppm(const std::filesystem::path& path, const ImageRecord& image);
void read_ppm(const std::filesystem::path& path, ImageRecord& image);

}  // namespace mclab::corpus
