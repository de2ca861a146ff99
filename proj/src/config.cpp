// Copyright 2026 The mclab Authors
// SPDX-License-Identifier: Apache-2.0

#include "mclab/config.hpp"

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mclab/errors.hpp"

namespace mclab::config {

using json = nlohmann::json;

void RunConfig::validate() const {
  corpus.generator.validate();
  model.validate();
  pretrain.validate();
  finetune.validate();
  eval.validate();
  if (model.image_size != corpus.generator.image_size)
    throw ConfigError("model.image_size (" + std::to_string(model.image_size) + ") differs from corpus.image_size (" +
                      std::to_string(corpus.generator.image_size) + ")");
  if (model.channels != 3) throw ConfigError("model.channels must be 3 for generated corpora");
}

void to_json(json& j, const RunConfig& c) {
  const auto& g = c.corpus.generator;
  json mods = json::array();
  for (const auto& m : g.modality_set) mods.push_back(m.tag());
  j = json{{"corpus",
            {{"n_patients", g.n_patients},
             {"n_val", g.n_val},
             {"n_test", g.n_test},
             {"n_latent_classes", g.n_latent_classes},
             {"modality_set", mods},
             {"images_per_patient_per_modality", g.images_per_patient_per_modality},
             {"text_fraction", g.text_fraction},
             {"image_size", g.image_size},
             {"noise_sigma", g.noise_sigma},
             {"seed", c.corpus.seed}}},
           {"model", c.model},
           {"pretrain", c.pretrain},
           {"finetune", c.finetune},
           {"eval", c.eval}};
}

namespace {

void corpus_from_json(const json& j, CorpusSection& c) {
  if (!j.is_object()) throw ConfigError("corpus config must be an object");
  auto& g = c.generator;
  for (const auto& [key, v] : j.items()) {
    if (key == "n_patients") g.n_patients = v.get<int>();
    else if (key == "n_val") g.n_val = v.get<int>();
    else if (key == "n_test") g.n_test = v.get<int>();
    else if (key == "n_latent_classes") g.n_latent_classes = v.get<int>();
    else if (key == "modality_set") {
      g.modality_set.clear();
      for (const auto& m : v) g.modality_set.emplace_back(m.get<std::string>());
    } else if (key == "images_per_patient_per_modality") g.images_per_patient_per_modality = v.get<int>();
    else if (key == "text_fraction") g.text_fraction = v.get<double>();
    else if (key == "image_size") g.image_size = v.get<int>();
    else if (key == "noise_sigma") g.noise_sigma = v.get<double>();
    else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else throw ConfigError("unknown key corpus." + key);
  }
}

}  // namespace

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("run config must be an object");
  RunConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "corpus") corpus_from_json(v, c.corpus);
      else if (key == "model") from_json(v, c.model);
      else if (key == "pretrain") training::from_json(v, c.pretrain);
      else if (key == "finetune") training::from_json(v, c.finetune);
      else if (key == "eval") evaluation::from_json(v, c.eval);
      else throw ConfigError("unknown config section " + key);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig parse_run_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return run_config_from_json(j);
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string resolved_text(const RunConfig& c) { return json(c).dump(2) + "\n"; }

}  // namespace mclab::config
