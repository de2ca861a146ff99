// Copyright 2026 The mclab Authors
// SPDX-License-Identifier: Apache-2.0

#include "mclab/mclab.h"

#include <cstdlib>
#include <cstring>
#include <new>
#include <span>
#include <string>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <nlohmann/json.hpp>

#include "mclab/config.hpp"
#include "mclab/corpus.hpp"
#include "mclab/errors.hpp"
#include "mclab/evaluation.hpp"
#include "mclab/model.hpp"
#include "mclab/report.hpp"
#include "mclab/training.hpp"

struct mclab_corpus {
  mclab::corpus::CorpusManifest manifest;
};

struct mclab_model {
  mclab::model::Model model;
};

namespace {

using json = nlohmann::json;

thread_local std::string g_last_error;

mclab_status fail(mclab_status code, const std::string& msg) {
  g_last_error = msg;
  return code;
}

template <typename F>
mclab_status guarded(F&& body) {
  try {
    body();
    g_last_error.clear();
    return MCLAB_OK;
  } catch (const mclab::ConfigError& e) {
    return fail(MCLAB_E_VALIDATION, std::string("config error: ") + e.what());
  } catch (const mclab::ParseError& e) {
    return fail(MCLAB_E_VALIDATION, std::string("parse error: ") + e.what());
  } catch (const mclab::IntegrityError& e) {
    return fail(MCLAB_E_VALIDATION, std::string("integrity error: ") + e.what());
  } catch (const mclab::ValidationError& e) {
    return fail(MCLAB_E_VALIDATION, std::string("validation error: ") + e.what());
  } catch (const mclab::DataError& e) {
    return fail(MCLAB_E_VALIDATION, std::string("data error: ") + e.what());
  } catch (const mclab::DimensionError& e) {
    return fail(MCLAB_E_RUNTIME, std::string("dimension error: ") + e.what());
  } catch (const mclab::NumericError& e) {
    return fail(MCLAB_E_RUNTIME, std::string("numeric error: ") + e.what());
  } catch (const mclab::DegenerateBatchError& e) {
    return fail(MCLAB_E_RUNTIME, std::string("degenerate batch: ") + e.what());
  } catch (const mclab::UndefinedMetricError& e) {
    return fail(MCLAB_E_RUNTIME, std::string("undefined metric: ") + e.what());
  } catch (const mclab::IoError& e) {
    return fail(MCLAB_E_RUNTIME, std::string("i/o error: ") + e.what());
  } catch (const std::bad_alloc&) {
    return fail(MCLAB_E_RUNTIME, "out of memory");
  } catch (const std::exception& e) {
    return fail(MCLAB_E_RUNTIME, e.what());
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

mclab::config::RunConfig config_of(const char* text) {
  return text ? mclab::config::parse_run_config(text) : mclab::config::RunConfig{};
}

void emit(mclab_log_fn fn, void* user, const json& j) {
  if (fn) fn(j.dump().c_str(), user);
}

}  // namespace

extern "C" {

const char* mclab_version(void) { return "1.0.0"; }

const char* mclab_last_error(void) { return g_last_error.c_str(); }

void mclab_string_free(char* s) { std::free(s); }

void mclab_tune_allocator(void) {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

mclab_status mclab_config_resolve(const char* config_json, const char* overrides_json, char** out_resolved) {
  if (!out_resolved) return fail(MCLAB_E_USAGE, "out_resolved is null");
  return guarded([&] {
    json base = json::object();
    try {
      if (config_json) base = json::parse(config_json);
      if (overrides_json) base.merge_patch(json::parse(overrides_json));
    } catch (const json::exception& e) {
      throw mclab::ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    const auto cfg = mclab::config::run_config_from_json(base);
    *out_resolved = dup_string(mclab::config::resolved_text(cfg));
  });
}

mclab_status mclab_corpus_generate(const char* config_json, mclab_corpus** out) {
  if (!out) return fail(MCLAB_E_USAGE, "out is null");
  return guarded([&] {
    const auto cfg = config_of(config_json);
    auto manifest = mclab::corpus::generate_synthetic_corpus(cfg.corpus.generator, cfg.corpus.seed);
    *out = new mclab_corpus{std::move(manifest)};
  });
}

mclab_status mclab_corpus_load(const char* path, mclab_corpus** out) {
  if (!path || !out) return fail(MCLAB_E_USAGE, "path and out must be non-null");
  return guarded([&] { *out = new mclab_corpus{mclab::corpus::load_corpus(path)}; });
}

mclab_status mclab_corpus_save(const mclab_corpus* corpus, const char* dir) {
  if (!corpus || !dir) return fail(MCLAB_E_USAGE, "corpus and dir must be non-null");
  return guarded([&] { mclab::corpus::persist_corpus(corpus->manifest, dir); });
}

size_t mclab_corpus_patient_count(const mclab_corpus* corpus) { return corpus ? corpus->manifest.records.size() : 0; }

size_t mclab_corpus_image_count(const mclab_corpus* corpus) { return corpus ? corpus->manifest.image_count() : 0; }

void mclab_corpus_free(mclab_corpus* corpus) { delete corpus; }

mclab_status mclab_pretrain(const mclab_corpus* corpus, const char* config_json, const char* out_dir,
                            mclab_log_fn on_step, void* user, char** out_checkpoint) {
  if (!corpus || !out_dir) return fail(MCLAB_E_USAGE, "corpus and out_dir must be non-null");
  return guarded([&] {
    const auto cfg = config_of(config_json);
    const auto& recs = corpus->manifest.records;
    if (!recs.empty() && !recs.front().images.empty() && cfg.model.image_size != recs.front().images.front().height)
      throw mclab::ConfigError("model.image_size does not match the corpus images");
    mclab::training::PretrainHooks hooks;
    if (on_step)
      hooks.on_step = [&](const mclab::model::Model&, const mclab::training::StepRecord& r) {
        emit(on_step, user, json(r));
      };
    const auto result = mclab::training::pretrain(corpus->manifest, cfg.model, cfg.pretrain, out_dir, hooks);
    if (out_checkpoint) *out_checkpoint = dup_string(result.best_checkpoint.string());
  });
}

mclab_status mclab_model_load(const char* checkpoint_path, mclab_model** out) {
  if (!checkpoint_path || !out) return fail(MCLAB_E_USAGE, "checkpoint_path and out must be non-null");
  return guarded([&] {
    const auto ckpt = mclab::model::load_checkpoint(checkpoint_path);
    *out = new mclab_model{mclab::model::model_from_checkpoint(ckpt)};
  });
}

void mclab_model_free(mclab_model* model) { delete model; }

int mclab_model_dim(const mclab_model* model) { return model ? model->model.config().proj_dim : 0; }

mclab_status mclab_model_embed_image(const mclab_model* model, const float* pixels, size_t n_pixels, float* out,
                                     size_t out_len) {
  if (!model || !pixels || !out) return fail(MCLAB_E_USAGE, "model, pixels and out must be non-null");
  const auto& c = model->model.config();
  const auto expected = static_cast<size_t>(c.image_size) * static_cast<size_t>(c.image_size) * static_cast<size_t>(c.channels);
  if (n_pixels != expected)
    return fail(MCLAB_E_USAGE, "expected " + std::to_string(expected) + " pixel values, got " + std::to_string(n_pixels));
  if (out_len < static_cast<size_t>(c.proj_dim)) return fail(MCLAB_E_USAGE, "output buffer too small");
  return guarded([&] {
    const auto enc = model->model.encode_image(std::span<const float>(pixels, n_pixels));
    std::memcpy(out, enc.embedding.data(), sizeof(float) * static_cast<size_t>(enc.embedding.size()));
  });
}

mclab_status mclab_model_embed_text(const mclab_model* model, const char* text, float* out, size_t out_len) {
  if (!model || !text || !out) return fail(MCLAB_E_USAGE, "model, text and out must be non-null");
  if (out_len < static_cast<size_t>(model->model.config().proj_dim)) return fail(MCLAB_E_USAGE, "output buffer too small");
  return guarded([&] {
    const auto enc = model->model.encode_text(std::string_view(text));
    std::memcpy(out, enc.embedding.data(), sizeof(float) * static_cast<size_t>(enc.embedding.size()));
  });
}

mclab_status mclab_embed_store(const mclab_model* model, const mclab_corpus* corpus, const char* split,
                               mclab_side side, const char* out_path, size_t* out_rows) {
  if (!model || !corpus || !out_path) return fail(MCLAB_E_USAGE, "model, corpus and out_path must be non-null");
  if (side != MCLAB_SIDE_IMAGE && side != MCLAB_SIDE_TEXT) return fail(MCLAB_E_USAGE, "unknown side");
  return guarded([&] {
    mclab::evaluation::EmbeddingStore store;
    if (side == MCLAB_SIDE_TEXT) {
      store = mclab::evaluation::embed_prompt_store(model->model, corpus->manifest);
    } else {
      const std::string s = split ? split : "all";
      std::vector<const mclab::corpus::PatientRecord*> patients;
      if (s == "all") {
        for (const auto& p : corpus->manifest.records) patients.push_back(&p);
      } else {
        patients = corpus->manifest.patients(mclab::corpus::split_from_string(s));
      }
      store = mclab::evaluation::embed_image_store(model->model, patients);
    }
    mclab::evaluation::save_embedding_store(store, out_path);
    if (out_rows) *out_rows = store.size();
  });
}

mclab_status mclab_evaluate(const char* checkpoint_path, const mclab_corpus* corpus, const char* protocol,
                            const char* config_json, const char* report_path, mclab_log_fn on_warning, void* user,
                            size_t* out_metrics) {
  if (!checkpoint_path || !corpus || !protocol || !report_path)
    return fail(MCLAB_E_USAGE, "checkpoint_path, corpus, protocol and report_path must be non-null");
  return guarded([&] {
    const auto cfg = config_of(config_json);
    const auto proto = mclab::evaluation::protocol_from_string(protocol);
    const auto ckpt = mclab::model::load_checkpoint(checkpoint_path);
    std::vector<std::string> warnings;
    const auto reports =
        mclab::evaluation::evaluate_protocol(ckpt, corpus->manifest, proto, cfg.eval, cfg.finetune, &warnings);
    for (const auto& w : warnings) emit(on_warning, user, json{{"warning", w}});
    mclab::evaluation::write_reports(reports, report_path);
    if (out_metrics) *out_metrics = reports.size();
  });
}

mclab_status mclab_report(const char* in_dir, const char* out_file, size_t* out_metrics) {
  if (!in_dir || !out_file) return fail(MCLAB_E_USAGE, "in_dir and out_file must be non-null");
  return guarded([&] {
    const auto out = mclab::report::render_report(in_dir, out_file);
    if (out_metrics) *out_metrics = out.n_metrics;
  });
}

}  // extern "C"
