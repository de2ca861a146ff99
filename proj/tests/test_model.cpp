// Copyright 2026 The mclab Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "mclab/errors.hpp"
#include "mclab/model.hpp"
#include "mclab/training.hpp"
#include "support.hpp"

using namespace mclab;
using namespace mclab::model;
using mclab::testing::TempDir;

namespace {

struct Fixture {
  corpus::CorpusManifest corpus = corpus::generate_synthetic_corpus(mclab::testing::tiny_corpus_config(), 7);
  text::Vocabulary vocab = text::Vocabulary::fit(training::training_texts(corpus.patients(corpus::Split::train)));
  Model model{mclab::testing::tiny_model_config(), vocab, 3};
};

std::vector<float> random_pixels(const ModelConfig& c, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<float> px(static_cast<std::size_t>(c.image_size * c.image_size * c.channels));
  for (auto& v : px) v = u(rng);
  return px;
}

}  // namespace

TEST_CASE("image and text embeddings are unit norm and deterministic") {
  Fixture f;
  std::mt19937_64 rng(1);
  for (int i = 0; i < 10; ++i) {
    const auto px = random_pixels(f.model.config(), rng);
    const auto a = f.model.encode_image(px);
    const auto b = f.model.encode_image(px);
    CHECK(std::abs(a.embedding.norm() - 1.0f) < 1e-6f);
    CHECK(a.embedding == b.embedding);
    CHECK(a.features.size() == f.model.config().enc_dim);
    auto scaled = px;
    for (auto& v : scaled) v *= 0.5f;
    CHECK((f.model.encode_image(scaled).embedding - a.embedding).norm() > 1e-6f);
  }
  for (const std::string t : {"color fundus, DR, mild DR", "oct, normal", "", "unknown words here"}) {
    const auto a = f.model.encode_text(t);
    CHECK(std::abs(a.embedding.norm() - 1.0f) < 1e-6f);
    CHECK(a.embedding == f.model.encode_text(t).embedding);
  }
}

TEST_CASE("wrong image shape is a dimension error") {
  Fixture f;
  std::vector<float> px(10, 0.5f);
  CHECK_THROWS_AS(f.model.encode_image(px), DimensionError);
}

TEST_CASE("batched embeddings do not depend on batch order") {
  Fixture f;
  std::vector<const corpus::ImageRecord*> fwd, rev;
  for (int i = 0; i < 6; ++i) fwd.push_back(&f.corpus.records[static_cast<std::size_t>(i)].images[0]);
  rev.assign(fwd.rbegin(), fwd.rend());
  const auto a = f.model.embed_images(fwd);
  const auto b = f.model.embed_images(rev);
  for (int i = 0; i < 6; ++i) CHECK((a.row(i) - b.row(5 - i)).cwiseAbs().maxCoeff() < 1e-6f);
  for (int i = 0; i < 6; ++i) {
    const auto single = f.model.encode_image(fwd[static_cast<std::size_t>(i)]->to_float()).embedding;
    CHECK((a.row(i).transpose() - single).cwiseAbs().maxCoeff() < 1e-6f);
  }
  const std::vector<std::string> texts = {"oct, normal", "color fundus, glaucoma", "oct, DR, mild DR"};
  const std::vector<std::string> rtexts(texts.rbegin(), texts.rend());
  const auto ta = f.model.embed_texts(texts), tb = f.model.embed_texts(rtexts);
  for (int i = 0; i < 3; ++i) CHECK((ta.row(i) - tb.row(2 - i)).cwiseAbs().maxCoeff() < 1e-6f);
}

TEST_CASE("masking selects an exact, reproducible share of patches") {
  auto cfg = ModelConfig::synthetic();  // 64x64, patch 8: 64 patches
  cfg.enc_depth = cfg.dec_depth = cfg.text_depth = 1;
  Model m(cfg, text::Vocabulary::fit({"a"}), 1);
  std::mt19937_64 rng(2);
  const auto px = random_pixels(cfg, rng);
  nn::Rng r1(9), r2(9);
  const auto a = m.mask_patches(px, 0.75, r1);
  const auto b = m.mask_patches(px, 0.75, r2);
  CHECK(a.mask.size() == 64);
  CHECK(a.mask.count() == 48);
  CHECK(a.mask == b.mask);
  CHECK(a.visible.rows() == 16);
  const auto patches = m.patchify(px);
  for (std::size_t i = 0; i < a.positions.size(); ++i) {
    CHECK(!a.mask.masked[static_cast<std::size_t>(a.positions[i])]);
    CHECK(a.visible.row(static_cast<Eigen::Index>(i)) == patches.row(a.positions[i]));
  }
  nn::Rng r3(9);
  const auto none = m.mask_patches(px, 0.0, r3);
  CHECK(none.mask.count() == 0);
  CHECK(none.visible.rows() == 64);
  for (double ratio : {0.1, 0.33, 0.5, 0.9}) {
    nn::Rng r(4);
    CHECK(m.mask_patches(px, ratio, r).mask.count() == static_cast<int>(std::lround(ratio * 64)));
  }
}

TEST_CASE("reconstruction covers the full grid with a finite positive loss") {
  Fixture f;
  std::mt19937_64 rng(3);
  const auto px = random_pixels(f.model.config(), rng);
  nn::Rng r(5);
  const auto masked = f.model.mask_patches(px, 0.75, r);
  const auto pred = f.model.reconstruct(masked);
  CHECK(pred.rows() == f.model.config().n_patches());
  CHECK(pred.cols() == f.model.config().patch_dim());
  const auto orig = f.model.patchify(px);
  double se = 0;
  int n = 0;
  for (int i = 0; i < pred.rows(); ++i)
    if (masked.mask.masked[static_cast<std::size_t>(i)]) {
      se += (pred.row(i) - orig.row(i)).squaredNorm();
      n += static_cast<int>(pred.cols());
    }
  CHECK(std::isfinite(se / n));
  CHECK(se / n > 0);
}

TEST_CASE("temperature starts at its initial value and receives gradient") {
  Fixture f;
  CHECK(f.model.temperature() == doctest::Approx(0.07).epsilon(1e-6));
  training::PretrainConfig cfg;
  nn::Rng rng(1), mask_rng(2);
  const auto batch = training::compose_batch(f.corpus.patients(corpus::Split::train), 16, f.vocab, rng);
  REQUIRE(batch.n_pairs() >= 2);
  f.model.params().zero_grad();
  training::pretrain_step(f.model, batch, cfg, mask_rng, true);
  CHECK(f.model.params().at("logit.log_tau").grad(0, 0) != 0.0f);
  CHECK(f.model.params().all_finite());

  f.model.params().at("logit.log_tau").value(0, 0) = 10.0f;
  CHECK(f.model.temperature() == doctest::Approx(100.0));
  CHECK(f.model.temperature_clamped());
  f.model.params().at("logit.log_tau").value(0, 0) = -10.0f;
  CHECK(f.model.temperature() == doctest::Approx(0.01));
}

TEST_CASE("full-model gradients of the combined loss match finite differences") {
  Fixture f;
  training::PretrainConfig cfg;
  nn::Rng rng(4);
  const auto batch = training::compose_batch(f.corpus.patients(corpus::Split::train), 8, f.vocab, rng);
  REQUIRE(batch.n_text() >= 2);
  REQUIRE(batch.n_pairs() >= 2);
  f.model.params().at("logit.log_tau").value(0, 0) = std::log(0.5f);
  const nn::Rng mask_seed(6);
  auto loss = [&]() {
    nn::Rng r = mask_seed;
    return training::pretrain_step(f.model, batch, cfg, r, false).total;
  };
  f.model.params().zero_grad();
  {
    nn::Rng r = mask_seed;
    training::pretrain_step(f.model, batch, cfg, r, true);
  }
  std::mt19937_64 pick_rng(8);
  double num = 0, den = 0;
  int checked = 0;
  for (auto* p : f.model.params().all()) {
    if (p->grad.cwiseAbs().maxCoeff() == 0.0f) continue;  // unused vocabulary rows
    std::uniform_int_distribution<Eigen::Index> pick(0, p->value.size() - 1);
    for (int s = 0; s < 3; ++s) {
      const auto i = pick(pick_rng);
      constexpr float eps = 3e-3f;
      const float keep = p->value.data()[i];
      p->value.data()[i] = keep + eps;
      const double up = loss();
      p->value.data()[i] = keep - eps;
      const double down = loss();
      p->value.data()[i] = keep;
      const double fd = (up - down) / (2.0 * eps);
      num += std::pow(fd - p->grad.data()[i], 2);
      den += std::pow(fd, 2);
      ++checked;
    }
  }
  CHECK(checked > 60);
  CHECK(std::sqrt(num / den) < 5e-2);
}

TEST_CASE("checkpoints round-trip bit-exactly and reject other versions") {
  Fixture f;
  TempDir dir;
  auto ckpt = make_checkpoint(f.model);
  ckpt.step = 42;
  ckpt.epoch = 3;
  ckpt.val_loss = 1.25;
  ckpt.best_val_loss = 1.0;
  ckpt.rng_state = "123 456";
  save_checkpoint(ckpt, dir / "a.ckpt");
  const auto back = load_checkpoint(dir / "a.ckpt");
  CHECK(back == ckpt);
  save_checkpoint(back, dir / "b.ckpt");
  CHECK(mclab::testing::read_file(dir / "a.ckpt") == mclab::testing::read_file(dir / "b.ckpt"));

  const Model rebuilt = model_from_checkpoint(back);
  std::mt19937_64 rng(1);
  const auto px = random_pixels(f.model.config(), rng);
  CHECK(rebuilt.encode_image(px).embedding == f.model.encode_image(px).embedding);

  auto bytes = mclab::testing::read_file(dir / "a.ckpt");
  bytes[10] = 2;  // format_version follows the 10-byte magic
  std::ofstream(dir / "v2.ckpt", std::ios::binary) << bytes;
  CHECK_THROWS_AS(load_checkpoint(dir / "v2.ckpt"), ParseError);
  std::ofstream(dir / "junk.ckpt", std::ios::binary) << "not a checkpoint";
  CHECK_THROWS_AS(load_checkpoint(dir / "junk.ckpt"), ParseError);
}

TEST_CASE("model configuration is validated") {
  auto c = ModelConfig::synthetic();
  c.validate();
  c.patch_size = 7;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig::synthetic();
  c.mask_ratio = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig::synthetic();
  c.enc_dim = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig::synthetic();
  c.temperature_init = 1000;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}
