// Copyright 2026 The mclab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json_fwd.hpp>

#include "mclab/corpus.hpp"
#include "mclab/evaluation.hpp"
#include "mclab/model.hpp"
#include "mclab/training.hpp"

namespace mclab::config {

struct CorpusSection {
  corpus::GeneratorConfig generator;
  std::uint64_t seed = 7;
};

/// Every tunable of a run. Sections mirror the library modules; each field
/// defaults to the module default, except the model, which defaults to the
/// synthetic-scale configuration.
struct RunConfig {
  CorpusSection corpus;
  model::ModelConfig model = model::ModelConfig::synthetic();
  training::PretrainConfig pretrain;
  training::FinetuneConfig finetune;
  evaluation::EvalConfig eval;

  /// Module checks plus cross-section consistency.
  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
/// Applies `j` over the defaults. Unknown keys and wrong types raise ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

/// Pretty-printed resolved configuration, as echoed to `config.resolved`.
std::string resolved_text(const RunConfig& c);

}  // namespace mclab::config
