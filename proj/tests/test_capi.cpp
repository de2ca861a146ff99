// Copyright 2026 The mclab Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mclab/mclab.h"
#include "support.hpp"

using json = nlohmann::json;
using mclab::testing::TempDir;
using mclab::testing::tiny_run_config_json;

namespace {

std::string take(char* s) {
  std::string out(s);
  mclab_string_free(s);
  return out;
}

double norm(const std::vector<float>& v) {
  double s = 0;
  for (float x : v) s += static_cast<double>(x) * x;
  return std::sqrt(s);
}

void count_lines(const char* line, void* user) {
  CHECK(json::parse(line).is_object());
  ++*static_cast<int*>(user);
}

// One pretrained tiny model shared by the model-level cases.
struct Trained {
  TempDir dir;
  mclab_corpus* corpus = nullptr;
  std::string checkpoint;
  int steps = 0;

  Trained() {
    const auto cfg = tiny_run_config_json();
    REQUIRE(mclab_corpus_generate(cfg.c_str(), &corpus) == MCLAB_OK);
    char* ckpt = nullptr;
    REQUIRE(mclab_pretrain(corpus, cfg.c_str(), (dir / "run").c_str(), count_lines, &steps, &ckpt) == MCLAB_OK);
    checkpoint = take(ckpt);
  }
  ~Trained() { mclab_corpus_free(corpus); }
};

Trained& trained() {
  static Trained t;
  return t;
}

}  // namespace

TEST_CASE("version and error state") {
  CHECK(std::string(mclab_version()).size() > 0);
  char* out = nullptr;
  CHECK(mclab_config_resolve("{bad", nullptr, &out) == MCLAB_E_VALIDATION);
  CHECK(std::string(mclab_last_error()).find("config") != std::string::npos);
  CHECK(mclab_config_resolve(nullptr, nullptr, &out) == MCLAB_OK);
  CHECK(std::string(mclab_last_error()).empty());
  mclab_string_free(out);
}

TEST_CASE("config resolution applies overrides and rejects unknown keys") {
  char* out = nullptr;
  REQUIRE(mclab_config_resolve(R"({"pretrain": {"seed": 3}})", R"({"pretrain": {"total_epochs": 4}})", &out) == MCLAB_OK);
  const auto j = json::parse(take(out));
  CHECK(j["pretrain"]["seed"] == 3);
  CHECK(j["pretrain"]["total_epochs"] == 4);
  CHECK(j["pretrain"]["batch_size"] == 64);
  CHECK(mclab_config_resolve(R"({"pretrain": {"sneed": 3}})", nullptr, &out) == MCLAB_E_VALIDATION);
  CHECK(mclab_config_resolve(nullptr, nullptr, nullptr) == MCLAB_E_USAGE);
}

TEST_CASE("corpus generation, persistence and loading") {
  TempDir dir;
  const auto cfg = tiny_run_config_json();
  mclab_corpus* corpus = nullptr;
  REQUIRE(mclab_corpus_generate(cfg.c_str(), &corpus) == MCLAB_OK);
  CHECK(mclab_corpus_patient_count(corpus) == 96);
  CHECK(mclab_corpus_image_count(corpus) == 192);
  REQUIRE(mclab_corpus_save(corpus, (dir / "c").c_str()) == MCLAB_OK);
  mclab_corpus* back = nullptr;
  REQUIRE(mclab_corpus_load((dir / "c").c_str(), &back) == MCLAB_OK);
  CHECK(mclab_corpus_image_count(back) == 192);
  mclab_corpus_free(back);
  mclab_corpus_free(corpus);

  CHECK(mclab_corpus_load((dir / "missing").c_str(), &back) != MCLAB_OK);
  CHECK(std::string(mclab_last_error()).size() > 0);
  CHECK(mclab_corpus_generate(R"({"corpus": {"modality_set": ["CFP"]}})", &corpus) == MCLAB_E_VALIDATION);
  CHECK(mclab_corpus_load(nullptr, &back) == MCLAB_E_USAGE);
  CHECK(mclab_corpus_patient_count(nullptr) == 0);
}

TEST_CASE("pretraining reports every step and writes a checkpoint") {
  auto& t = trained();
  CHECK(t.steps > 0);
  CHECK(std::filesystem::is_regular_file(t.checkpoint));
  CHECK(std::filesystem::is_regular_file(t.dir / "run" / "logs" / "train.jsonl"));
  CHECK(mclab::testing::read_lines(t.dir / "run" / "logs" / "train.jsonl").size() == static_cast<std::size_t>(t.steps));
}

TEST_CASE("pretraining rejects a model that does not fit the corpus") {
  auto& t = trained();
  char* ckpt = nullptr;
  CHECK(mclab_pretrain(t.corpus, nullptr, (t.dir / "bad").c_str(), nullptr, nullptr, &ckpt) == MCLAB_E_VALIDATION);
  CHECK(std::string(mclab_last_error()).find("image_size") != std::string::npos);
}

TEST_CASE("model handles embed images and text onto the unit sphere") {
  auto& t = trained();
  mclab_model* model = nullptr;
  REQUIRE(mclab_model_load(t.checkpoint.c_str(), &model) == MCLAB_OK);
  const int dim = mclab_model_dim(model);
  CHECK(dim == 8);
  std::vector<float> pixels(16 * 16 * 3, 0.5f), out(static_cast<std::size_t>(dim));
  REQUIRE(mclab_model_embed_image(model, pixels.data(), pixels.size(), out.data(), out.size()) == MCLAB_OK);
  CHECK(norm(out) == doctest::Approx(1.0).epsilon(1e-6));
  REQUIRE(mclab_model_embed_text(model, "CFP, diabetic retinopathy", out.data(), out.size()) == MCLAB_OK);
  CHECK(norm(out) == doctest::Approx(1.0).epsilon(1e-6));

  CHECK(mclab_model_embed_image(model, pixels.data(), pixels.size() - 1, out.data(), out.size()) == MCLAB_E_USAGE);
  CHECK(mclab_model_embed_text(model, "x", out.data(), 2) == MCLAB_E_USAGE);
  CHECK(mclab_model_dim(nullptr) == 0);
  mclab_model_free(model);

  CHECK(mclab_model_load("/nonexistent.ckpt", &model) != MCLAB_OK);
}

TEST_CASE("embedding stores cover the requested items") {
  auto& t = trained();
  mclab_model* model = nullptr;
  REQUIRE(mclab_model_load(t.checkpoint.c_str(), &model) == MCLAB_OK);
  size_t rows = 0;
  REQUIRE(mclab_embed_store(model, t.corpus, "test", MCLAB_SIDE_IMAGE, (t.dir / "img.store").c_str(), &rows) == MCLAB_OK);
  CHECK(rows == 80);
  REQUIRE(mclab_embed_store(model, t.corpus, "all", MCLAB_SIDE_IMAGE, (t.dir / "all.store").c_str(), &rows) == MCLAB_OK);
  CHECK(rows == 192);
  REQUIRE(mclab_embed_store(model, t.corpus, nullptr, MCLAB_SIDE_TEXT, (t.dir / "txt.store").c_str(), &rows) == MCLAB_OK);
  CHECK(rows == 8);
  CHECK(mclab_embed_store(model, t.corpus, "bogus", MCLAB_SIDE_IMAGE, (t.dir / "x.store").c_str(), &rows) != MCLAB_OK);
  mclab_model_free(model);
}

TEST_CASE("evaluation and report through the C interface") {
  auto& t = trained();
  const auto cfg = tiny_run_config_json();
  size_t n = 0;
  const auto report = t.dir / "reports" / "zeroshot.jsonl";
  std::filesystem::create_directories(report.parent_path());
  REQUIRE(mclab_evaluate(t.checkpoint.c_str(), t.corpus, "zeroshot", cfg.c_str(), report.c_str(), nullptr, nullptr, &n) ==
          MCLAB_OK);
  CHECK(n == 2);
  CHECK(mclab::testing::read_lines(report).size() == 2);
  CHECK(mclab_evaluate(t.checkpoint.c_str(), t.corpus, "linear", cfg.c_str(), report.c_str(), nullptr, nullptr, &n) ==
        MCLAB_E_VALIDATION);

  REQUIRE(mclab_report((t.dir / "reports").c_str(), (t.dir / "table.txt").c_str(), &n) == MCLAB_OK);
  CHECK(n == 2);
  std::filesystem::create_directories(t.dir / "empty");
  CHECK(mclab_report((t.dir / "empty").c_str(), (t.dir / "t2.txt").c_str(), &n) == MCLAB_E_VALIDATION);
}
