// Copyright 2026 The mclab Authors
// SPDX-License-Identifier: Apache-2.0

#include "mclab/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mclab/errors.hpp"
#include "mclab/metrics.hpp"

namespace mclab::training {

using json = nlohmann::json;
using nn::Matrix;

// --- schedules ---------------------------------------------------------------

double WarmupCosine::at(std::int64_t unit) const {
  if (unit <= 0) return warmup > 0 ? 0.0 : peak;
  if (warmup > 0 && unit <= warmup) return peak * static_cast<double>(unit) / static_cast<double>(warmup);
  if (unit >= total) return final_value;
  const double progress = static_cast<double>(unit - warmup) / static_cast<double>(total - warmup);
  return final_value + 0.5 * (peak - final_value) * (1.0 + std::cos(std::numbers::pi * progress));
}

double lr_at(std::int64_t step, std::int64_t epoch, const LrSchedule& schedule) {
  return schedule.kind == ScheduleKind::pretrain ? schedule.curve.at(step + 1) : schedule.curve.at(epoch + 1);
}

// --- pretraining configuration ----------------------------------------------------

void PretrainConfig::validate() const {
  if (!(base_lr > 0 && std::isfinite(base_lr))) throw ConfigError("pretrain.base_lr must be positive");
  if (total_epochs < 1) throw ConfigError("pretrain.total_epochs must be at least 1");
  if (warmup_epochs < 0 || warmup_epochs >= total_epochs)
    throw ConfigError("pretrain.warmup_epochs must be non-negative and below total_epochs");
  if (warmup_steps && *warmup_steps < 0) throw ConfigError("pretrain.warmup_steps must be non-negative");
  if (batch_size < 2) throw ConfigError("pretrain.batch_size must be at least 2");
  if (!(mask_ratio >= 0 && mask_ratio < 1)) throw ConfigError("pretrain.mask_ratio must lie in [0, 1)");
  if (checkpoint_every < 0) throw ConfigError("pretrain.checkpoint_every must be non-negative");
  if (!(val_fraction > 0 && val_fraction < 1)) throw ConfigError("pretrain.val_fraction must lie in (0, 1)");
  weights.validate();
}

void to_json(json& j, const PretrainConfig& c) {
  j = json{{"base_lr", c.base_lr},
           {"warmup_epochs", c.warmup_epochs},
           {"warmup_steps", c.warmup_steps ? json(*c.warmup_steps) : json(nullptr)},
           {"total_epochs", c.total_epochs},
           {"batch_size", c.batch_size},
           {"weights", {{"img_text", c.weights.img_text}, {"img_img", c.weights.img_img}, {"recon", c.weights.recon}}},
           {"mask_ratio", c.mask_ratio},
           {"seed", c.seed},
           {"checkpoint_every", c.checkpoint_every},
           {"val_fraction", c.val_fraction},
           {"recon_target", c.recon_target == losses::ReconTarget::masked_only ? "masked_only" : "whole_image"},
           {"optimizer",
            {{"beta1", c.optimizer.beta1},
             {"beta2", c.optimizer.beta2},
             {"eps", c.optimizer.eps},
             {"weight_decay", c.optimizer.weight_decay},
             {"clip_norm", c.optimizer.clip_norm}}}};
}

void from_json(const json& j, PretrainConfig& c) {
  if (!j.is_object()) throw ConfigError("pretrain config must be an object");
  for (const auto& [key, v] : j.items()) {
    if (key == "base_lr") c.base_lr = v.get<double>();
    else if (key == "warmup_epochs") c.warmup_epochs = v.get<int>();
    else if (key == "warmup_steps") c.warmup_steps = v.is_null() ? std::nullopt : std::optional<int>(v.get<int>());
    else if (key == "total_epochs") c.total_epochs = v.get<int>();
    else if (key == "batch_size") c.batch_size = v.get<int>();
    else if (key == "mask_ratio") c.mask_ratio = v.get<double>();
    else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else if (key == "checkpoint_every") c.checkpoint_every = v.get<int>();
    else if (key == "val_fraction") c.val_fraction = v.get<double>();
    else if (key == "recon_target") {
      const auto s = v.get<std::string>();
      if (s == "masked_only") c.recon_target = losses::ReconTarget::masked_only;
      else if (s == "whole_image") c.recon_target = losses::ReconTarget::whole_image;
      else throw ConfigError("pretrain.recon_target must be masked_only or whole_image");
    } else if (key == "weights") {
      if (!v.is_object()) throw ConfigError("pretrain.weights must be an object");
      for (const auto& [wk, wv] : v.items()) {
        if (wk == "img_text") c.weights.img_text = wv.get<double>();
        else if (wk == "img_img") c.weights.img_img = wv.get<double>();
        else if (wk == "recon") c.weights.recon = wv.get<double>();
        else throw ConfigError("unknown key pretrain.weights." + wk);
      }
    } else if (key == "optimizer") {
      if (!v.is_object()) throw ConfigError("pretrain.optimizer must be an object");
      for (const auto& [ok, ov] : v.items()) {
        if (ok == "beta1") c.optimizer.beta1 = ov.get<double>();
        else if (ok == "beta2") c.optimizer.beta2 = ov.get<double>();
        else if (ok == "eps") c.optimizer.eps = ov.get<double>();
        else if (ok == "weight_decay") c.optimizer.weight_decay = ov.get<double>();
        else if (ok == "clip_norm") c.optimizer.clip_norm = ov.get<double>();
        else throw ConfigError("unknown key pretrain.optimizer." + ok);
      }
    } else {
      throw ConfigError("unknown key pretrain." + key);
    }
  }
}

int steps_per_epoch(std::size_t n_train, int batch_size) {
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (n_train == 0) throw DataError("training split is empty");
  return static_cast<int>((n_train + static_cast<std::size_t>(batch_size) - 1) / static_cast<std::size_t>(batch_size));
}

LrSchedule pretrain_schedule(const PretrainConfig& cfg, int spe) {
  LrSchedule s;
  s.kind = ScheduleKind::pretrain;
  s.curve.peak = cfg.base_lr;
  s.curve.final_value = 0.0;
  s.curve.total = static_cast<std::int64_t>(cfg.total_epochs) * spe;
  s.curve.warmup = cfg.warmup_steps ? *cfg.warmup_steps : static_cast<std::int64_t>(cfg.warmup_epochs) * spe;
  if (s.curve.warmup >= s.curve.total) throw ConfigError("pretrain warmup covers the whole run");
  return s;
}

// --- batch composition -----------------------------------------------------------

std::string training_text(const corpus::ImageRecord& image, const text::KeywordSet& keywords) {
  return text::build_prompt(image.modality.tag(), text::keywords_to_text(keywords));
}

std::vector<std::string> training_texts(const std::vector<const corpus::PatientRecord*>& patients) {
  std::vector<std::string> out;
  for (const auto* p : patients)
    if (p->keywords)
      for (const auto& img : p->images) out.push_back(training_text(img, *p->keywords));
  return out;
}

int Batch::n_text() const {
  return static_cast<int>(std::count_if(samples.begin(), samples.end(), [](const Sample& s) { return s.feeds_text(); }));
}

int Batch::n_pairs() const {
  return static_cast<int>(std::count_if(samples.begin(), samples.end(), [](const Sample& s) { return s.feeds_pair(); }));
}

std::vector<std::string> Batch::image_ids() const {
  std::vector<std::string> ids;
  for (const auto& s : samples) {
    ids.push_back(s.image->image_id);
    if (s.partner) ids.push_back(s.partner->image_id);
  }
  return ids;
}

namespace {

std::size_t uniform_index(nn::Rng& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

}  // namespace

Batch compose_samples(const std::vector<const corpus::PatientRecord*>& patients, const text::Vocabulary& vocab,
                      nn::Rng& rng) {
  Batch batch;
  batch.samples.reserve(patients.size());
  for (const auto* p : patients) {
    if (p->images.empty()) throw DataError("patient " + p->patient_id + " has no images");
    Sample s;
    s.patient = p;
    s.image = &p->images[uniform_index(rng, p->images.size())];
    std::vector<const corpus::ImageRecord*> partners;
    for (const auto& img : p->images)
      if (img.modality != s.image->modality) partners.push_back(&img);
    if (!partners.empty()) s.partner = partners[uniform_index(rng, partners.size())];
    if (p->keywords) s.text = text::tokenize(training_text(*s.image, *p->keywords), vocab);
    batch.samples.push_back(std::move(s));
  }
  return batch;
}

Batch compose_batch(const std::vector<const corpus::PatientRecord*>& pool, int batch_size,
                    const text::Vocabulary& vocab, nn::Rng& rng) {
  if (pool.empty()) throw DataError("cannot compose a batch from an empty patient pool");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  std::vector<std::size_t> idx(pool.size());
  std::iota(idx.begin(), idx.end(), 0);
  const std::size_t take = std::min(pool.size(), static_cast<std::size_t>(batch_size));
  // Partial Fisher-Yates: the first `take` slots form a uniform sample.
  for (std::size_t i = 0; i < take; ++i) {
    const std::size_t j = i + uniform_index(rng, idx.size() - i);
    std::swap(idx[i], idx[j]);
  }
  std::vector<const corpus::PatientRecord*> chosen;
  chosen.reserve(take);
  for (std::size_t i = 0; i < take; ++i) chosen.push_back(pool[idx[i]]);
  return compose_samples(chosen, vocab, rng);
}

// --- one optimisation step ---------------------------------------------------------

namespace {

Eigen::MatrixXd to_double(const Matrix& m) { return m.cast<double>(); }
Matrix to_float(const Eigen::MatrixXd& m) { return m.cast<float>(); }

struct FullImagePass {
  nn::Segments segs;
  std::vector<int> positions;
  model::EncoderTrace enc;
  model::ProjectionTrace proj;
  Matrix embedding;
};

FullImagePass encode_full(const model::Model& m, const std::vector<const corpus::ImageRecord*>& images, bool keep_trace) {
  const int n = m.config().n_patches();
  FullImagePass pass;
  pass.segs = nn::Segments::uniform(static_cast<int>(images.size()), n);
  Matrix patches(static_cast<Eigen::Index>(images.size()) * n, m.config().patch_dim());
  pass.positions.reserve(patches.rows());
  for (std::size_t i = 0; i < images.size(); ++i) {
    patches.middleRows(static_cast<Eigen::Index>(i) * n, n) = m.patchify(*images[i]);
    for (int p = 0; p < n; ++p) pass.positions.push_back(p);
  }
  Matrix tokens = m.encoder_forward(patches, pass.positions, pass.segs, keep_trace ? &pass.enc : nullptr);
  pass.embedding = m.image_head_forward(tokens, pass.segs, keep_trace ? &pass.proj : nullptr);
  return pass;
}

}  // namespace

losses::LossBreakdown pretrain_step(model::Model& m, const Batch& batch, const PretrainConfig& cfg,
                                    nn::Rng& mask_rng, bool backward) {
  const auto& mc = m.config();
  const int n_patch = mc.n_patches();
  const double tau = m.temperature();
  const bool want_text = cfg.weights.img_text > 0 && batch.n_text() >= 2;
  const bool want_pairs = cfg.weights.img_img > 0 && batch.n_pairs() >= 2;
  const bool want_recon = cfg.weights.recon > 0;

  std::vector<const corpus::ImageRecord*> primary;
  for (const auto& s : batch.samples) primary.push_back(s.image);

  losses::LossTerms terms;
  terms.recon_available = want_recon;

  // Contrastive passes over unmasked images.
  FullImagePass full;
  FullImagePass partner;
  model::TextTrace text_trace;
  std::vector<int> text_rows, pair_rows;
  losses::ContrastiveResult it, ii;
  if (want_text || want_pairs) full = encode_full(m, primary, backward);
  if (want_text) {
    std::vector<const text::TokenSequence*> seqs;
    for (std::size_t i = 0; i < batch.samples.size(); ++i)
      if (batch.samples[i].text) {
        text_rows.push_back(static_cast<int>(i));
        seqs.push_back(&*batch.samples[i].text);
      }
    Matrix text_emb = m.text_forward(seqs, backward ? &text_trace : nullptr);
    Eigen::MatrixXd img(static_cast<Eigen::Index>(text_rows.size()), mc.proj_dim);
    for (std::size_t r = 0; r < text_rows.size(); ++r)
      img.row(static_cast<Eigen::Index>(r)) = full.embedding.row(text_rows[r]).cast<double>();
    it = losses::image_text_contrastive(img, to_double(text_emb), tau);
    terms.img_text = it.loss;
    terms.n_text_pairs = static_cast<int>(text_rows.size());
  }
  if (want_pairs) {
    std::vector<const corpus::ImageRecord*> partners;
    for (std::size_t i = 0; i < batch.samples.size(); ++i)
      if (batch.samples[i].partner) {
        pair_rows.push_back(static_cast<int>(i));
        partners.push_back(batch.samples[i].partner);
      }
    partner = encode_full(m, partners, backward);
    Eigen::MatrixXd a(static_cast<Eigen::Index>(pair_rows.size()), mc.proj_dim);
    for (std::size_t r = 0; r < pair_rows.size(); ++r)
      a.row(static_cast<Eigen::Index>(r)) = full.embedding.row(pair_rows[r]).cast<double>();
    ii = losses::image_image_contrastive(a, to_double(partner.embedding), tau);
    terms.img_img = ii.loss;
    terms.n_img_pairs = static_cast<int>(pair_rows.size());
  }

  // Masked reconstruction pass.
  model::EncoderTrace masked_enc;
  model::DecoderTrace dec_trace;
  nn::Segments vis_segs;
  std::vector<int> vis_positions;
  losses::ReconstructionResult rec;
  if (want_recon) {
    Matrix originals(static_cast<Eigen::Index>(primary.size()) * n_patch, mc.patch_dim());
    std::vector<std::uint8_t> masked_flags;
    std::vector<Matrix> visible;
    Eigen::Index vis_rows = 0;
    for (std::size_t i = 0; i < primary.size(); ++i) {
      Matrix patches = m.patchify(*primary[i]);
      auto mi = m.mask_patch_matrix(patches, cfg.mask_ratio, mask_rng);
      originals.middleRows(static_cast<Eigen::Index>(i) * n_patch, n_patch) = patches;
      masked_flags.insert(masked_flags.end(), mi.mask.masked.begin(), mi.mask.masked.end());
      vis_segs.lengths.push_back(static_cast<int>(mi.positions.size()));
      vis_positions.insert(vis_positions.end(), mi.positions.begin(), mi.positions.end());
      vis_rows += mi.visible.rows();
      visible.push_back(std::move(mi.visible));
    }
    Matrix vis(vis_rows, mc.patch_dim());
    Eigen::Index off = 0;
    for (const auto& v : visible) {
      vis.middleRows(off, v.rows()) = v;
      off += v.rows();
    }
    Matrix tokens = m.encoder_forward(vis, vis_positions, vis_segs, backward ? &masked_enc : nullptr);
    Matrix pred = m.decoder_forward(tokens, vis_positions, vis_segs, backward ? &dec_trace : nullptr);
    rec = losses::masked_reconstruction_loss(to_double(pred), to_double(originals), masked_flags, n_patch,
                                             cfg.recon_target);
    terms.recon = rec.loss;
    terms.n_masked = rec.n_masked;
  }

  auto breakdown = losses::combined_loss(terms, cfg.weights);
  if (!backward) return breakdown;

  double d_tau = 0;
  if (want_text || want_pairs) {
    Eigen::MatrixXd d_full = Eigen::MatrixXd::Zero(full.embedding.rows(), full.embedding.cols());
    if (want_text) {
      const double w = breakdown.scale_img_text;
      for (std::size_t r = 0; r < text_rows.size(); ++r) d_full.row(text_rows[r]) += w * it.grad_a.row(static_cast<Eigen::Index>(r));
      m.text_backward(text_trace, to_float(w * it.grad_b));
      d_tau += w * it.grad_tau;
    }
    if (want_pairs) {
      const double w = breakdown.scale_img_img;
      for (std::size_t r = 0; r < pair_rows.size(); ++r) d_full.row(pair_rows[r]) += w * ii.grad_a.row(static_cast<Eigen::Index>(r));
      Matrix d_tokens = m.image_head_backward(partner.proj, partner.segs, to_float(w * ii.grad_b));
      m.encoder_backward(partner.enc, partner.positions, d_tokens);
      d_tau += w * ii.grad_tau;
    }
    Matrix d_tokens = m.image_head_backward(full.proj, full.segs, to_float(d_full));
    m.encoder_backward(full.enc, full.positions, d_tokens);
  }
  if (want_recon) {
    Matrix d_enc = m.decoder_backward(dec_trace, to_float(breakdown.scale_recon * rec.grad));
    m.encoder_backward(masked_enc, vis_positions, d_enc);
  }
  if (d_tau != 0 && m.config().learnable_temperature) m.temperature_backward(d_tau);
  return breakdown;
}

void to_json(json& j, const StepRecord& r) {
  j = json{{"step", r.step},
           {"epoch", r.epoch},
           {"lr", r.lr},
           {"l_img_text", r.loss.l_img_text},
           {"l_img_img", r.loss.l_img_img},
           {"l_recon", r.loss.l_recon},
           {"total", r.loss.total},
           {"n_text_pairs", r.loss.n_text_pairs},
           {"n_img_pairs", r.loss.n_img_pairs}};
}

// --- pretraining loop -------------------------------------------------------------

namespace {

constexpr std::uint64_t kValidationSalt = 0x5EEDF00DULL;
constexpr std::uint64_t kMaskSalt = 0x3A5C0FFEEULL;

std::string rng_state(const nn::Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void append_line(std::ofstream& out, const json& j) {
  out << j.dump() << '\n';
  out.flush();
}

}  // namespace

double validation_loss(model::Model& m, const std::vector<const corpus::PatientRecord*>& patients,
                       const PretrainConfig& cfg) {
  if (patients.empty()) throw DataError("validation split is empty");
  nn::Rng rng(cfg.seed ^ kValidationSalt);
  nn::Rng mask_rng(cfg.seed ^ kValidationSalt ^ kMaskSalt);
  double sum = 0;
  std::size_t counted = 0;
  const auto chunk = static_cast<std::size_t>(cfg.batch_size);
  for (std::size_t start = 0; start < patients.size(); start += chunk) {
    const std::vector<const corpus::PatientRecord*> part(
        patients.begin() + static_cast<std::ptrdiff_t>(start),
        patients.begin() + static_cast<std::ptrdiff_t>(std::min(patients.size(), start + chunk)));
    const Batch batch = compose_samples(part, m.vocabulary(), rng);
    try {
      const auto b = pretrain_step(m, batch, cfg, mask_rng, false);
      sum += b.total * static_cast<double>(part.size());
      counted += part.size();
    } catch (const DegenerateBatchError&) {
      continue;
    }
  }
  if (counted == 0) throw DegenerateBatchError("no validation batch feeds any loss term");
  return sum / static_cast<double>(counted);
}

PretrainResult pretrain(const corpus::CorpusManifest& corpus, const model::ModelConfig& model_cfg,
                        const PretrainConfig& cfg, const std::filesystem::path& out_dir, const PretrainHooks& hooks) {
  cfg.validate();
  model_cfg.validate();
  auto train = corpus.patients(corpus::Split::train);
  auto val = corpus.patients(corpus::Split::val);
  if (train.empty()) throw DataError("corpus has no train patients");
  if (val.empty()) {
    // Hold out a seeded fraction of train patients.
    nn::Rng split_rng(cfg.seed ^ kValidationSalt);
    for (std::size_t i = train.size() - 1; i > 0; --i) std::swap(train[i], train[uniform_index(split_rng, i + 1)]);
    const auto n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(cfg.val_fraction * static_cast<double>(train.size()))));
    if (n_val >= train.size()) throw DataError("too few train patients to hold out a validation set");
    val.assign(train.end() - static_cast<std::ptrdiff_t>(n_val), train.end());
    train.resize(train.size() - n_val);
    auto by_id = [](const corpus::PatientRecord* a, const corpus::PatientRecord* b) { return a->patient_id < b->patient_id; };
    std::sort(train.begin(), train.end(), by_id);
    std::sort(val.begin(), val.end(), by_id);
  }

  std::filesystem::create_directories(out_dir / "logs");
  std::filesystem::create_directories(out_dir / "checkpoints");
  std::ofstream train_log(out_dir / "logs" / "train.jsonl");
  std::ofstream val_log(out_dir / "logs" / "val.jsonl");
  if (!train_log || !val_log) throw IoError("cannot write logs under " + (out_dir / "logs").string());

  auto model_cfg_run = model_cfg;
  model_cfg_run.mask_ratio = cfg.mask_ratio;
  model::Model m(model_cfg_run, text::Vocabulary::fit(training_texts(train)), cfg.seed);
  nn::AdamW opt(cfg.optimizer);

  PretrainResult result;
  result.steps_per_epoch = steps_per_epoch(train.size(), cfg.batch_size);
  result.schedule = pretrain_schedule(cfg, result.steps_per_epoch);
  result.best_checkpoint = out_dir / "checkpoints" / "best.ckpt";
  auto& st = result.state;
  st.rng.seed(cfg.seed);
  nn::Rng mask_rng(cfg.seed ^ kMaskSalt);
  st.best_val_loss = std::numeric_limits<double>::infinity();

  auto snapshot = [&](double val_loss) {
    auto ck = model::make_checkpoint(m);
    ck.optimizer_steps = opt.steps();
    ck.moments = opt.moments();
    ck.step = st.step;
    ck.epoch = st.epoch;
    ck.rng_state = rng_state(st.rng);
    ck.val_loss = val_loss;
    ck.best_val_loss = st.best_val_loss;
    ck.seed = cfg.seed;
    return ck;
  };

  const auto params = m.trainable();
  for (st.epoch = 0; st.epoch < cfg.total_epochs; ++st.epoch) {
    double epoch_loss = 0;
    int epoch_steps = 0;
    for (int s = 0; s < result.steps_per_epoch; ++s) {
      const Batch batch = compose_batch(train, cfg.batch_size, m.vocabulary(), st.rng);
      m.params().zero_grad();
      losses::LossBreakdown b;
      try {
        b = pretrain_step(m, batch, cfg, mask_rng, true);
      } catch (const DegenerateBatchError&) {
        continue;
      } catch (const NumericError& e) {
        std::string ids;
        for (const auto& id : batch.image_ids()) ids += (ids.empty() ? "" : ",") + id;
        throw NumericError(std::string(e.what()) + " at step " + std::to_string(st.step) + "; batch images: " + ids);
      }
      StepRecord rec{st.step, st.epoch, lr_at(st.step, st.epoch, result.schedule), b};
      opt.step(params, rec.lr);
      if (!m.params().all_finite()) {
        std::string ids;
        for (const auto& id : batch.image_ids()) ids += (ids.empty() ? "" : ",") + id;
        throw NumericError("non-finite parameter after step " + std::to_string(st.step) + "; batch images: " + ids);
      }
      json line = rec;
      append_line(train_log, line);
      st.history.push_back(rec);
      if (hooks.on_step) hooks.on_step(m, rec);
      epoch_loss += b.total;
      ++epoch_steps;
      ++st.step;
    }
    const double vl = validation_loss(m, val, cfg);
    EpochRecord er{st.epoch, epoch_steps ? epoch_loss / epoch_steps : 0.0, vl, vl < st.best_val_loss};
    if (er.improved) {
      st.best_val_loss = vl;
      st.best_epoch = st.epoch;
      model::save_checkpoint(snapshot(vl), result.best_checkpoint);
    }
    st.epochs.push_back(er);
    append_line(val_log, json{{"epoch", er.epoch},
                              {"train_loss", er.train_loss},
                              {"val_loss", er.val_loss},
                              {"best_val_loss", st.best_val_loss},
                              {"improved", er.improved}});
    if (cfg.checkpoint_every > 0 && (st.epoch + 1) % cfg.checkpoint_every == 0)
      model::save_checkpoint(snapshot(vl), out_dir / "checkpoints" / "last.ckpt");
  }
  return result;
}

// --- fine-tuning -----------------------------------------------------------------

FinetuneConfig FinetuneConfig::multi_label_defaults() {
  FinetuneConfig c;
  c.mode = FinetuneMode::multi_label;
  c.total_epochs = 30;
  c.batch_size = 4;
  c.warmup_epochs = 0;
  c.peak_lr = 1e-2;
  c.final_lr = 1e-2;
  return c;
}

void FinetuneConfig::validate() const {
  if (total_epochs < 1) throw ConfigError("finetune.total_epochs must be at least 1");
  if (freeze_epochs < 0 || freeze_epochs >= total_epochs)
    throw ConfigError("finetune.freeze_epochs must be non-negative and below total_epochs");
  if (warmup_epochs < 0 || warmup_epochs > total_epochs)
    throw ConfigError("finetune.warmup_epochs must lie in [0, total_epochs]");
  if (!(peak_lr > 0) || !(final_lr >= 0) || final_lr > peak_lr)
    throw ConfigError("finetune learning rates must satisfy 0 <= final_lr <= peak_lr, peak_lr > 0");
  if (batch_size < 1) throw ConfigError("finetune.batch_size must be positive");
  if (weight_decay < 0) throw ConfigError("finetune.weight_decay must be non-negative");
}

void to_json(json& j, const FinetuneConfig& c) {
  j = json{{"mode", c.mode == FinetuneMode::single_label ? "single_label" : "multi_label"},
           {"total_epochs", c.total_epochs},
           {"freeze_epochs", c.freeze_epochs},
           {"warmup_epochs", c.warmup_epochs},
           {"peak_lr", c.peak_lr},
           {"final_lr", c.final_lr},
           {"batch_size", c.batch_size},
           {"weight_decay", c.weight_decay},
           {"seed", c.seed}};
}

void from_json(const json& j, FinetuneConfig& c) {
  if (!j.is_object()) throw ConfigError("finetune config must be an object");
  if (j.contains("mode")) {
    const auto mode = j.at("mode").get<std::string>();
    if (mode == "multi_label") c = FinetuneConfig::multi_label_defaults();
    else if (mode == "single_label") c.mode = FinetuneMode::single_label;
    else throw ConfigError("finetune.mode must be single_label or multi_label");
  }
  for (const auto& [key, v] : j.items()) {
    if (key == "mode") continue;
    if (key == "total_epochs") c.total_epochs = v.get<int>();
    else if (key == "freeze_epochs") c.freeze_epochs = v.get<int>();
    else if (key == "warmup_epochs") c.warmup_epochs = v.get<int>();
    else if (key == "peak_lr") c.peak_lr = v.get<double>();
    else if (key == "final_lr") c.final_lr = v.get<double>();
    else if (key == "batch_size") c.batch_size = v.get<int>();
    else if (key == "weight_decay") c.weight_decay = v.get<double>();
    else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else throw ConfigError("unknown key finetune." + key);
  }
}

LrSchedule finetune_schedule(const FinetuneConfig& cfg) {
  LrSchedule s;
  s.kind = ScheduleKind::finetune;
  s.curve.peak = cfg.peak_lr;
  s.curve.final_value = cfg.final_lr;
  s.curve.warmup = cfg.warmup_epochs;
  s.curve.total = cfg.total_epochs;
  return s;
}

int LabeledSet::label_of(std::size_t i) const {
  const auto& row = targets.at(i);
  int label = -1;
  for (std::size_t c = 0; c < row.size(); ++c)
    if (row[c]) {
      if (label >= 0) throw DataError("image " + images.at(i)->image_id + " carries more than one label");
      label = static_cast<int>(c);
    }
  if (label < 0) throw DataError("image " + images.at(i)->image_id + " carries no label");
  return label;
}

std::vector<int> LabeledSet::labels() const {
  std::vector<int> out(size());
  for (std::size_t i = 0; i < size(); ++i) out[i] = label_of(i);
  return out;
}

LabeledSet latent_class_set(const corpus::CorpusManifest& corpus, const std::vector<const corpus::PatientRecord*>& patients) {
  LabeledSet set;
  set.class_names = corpus.class_names;
  if (set.class_names.empty()) throw DataError("corpus declares no class names");
  for (const auto* p : patients) {
    if (!p->latent_class) throw DataError("patient " + p->patient_id + " has no class label");
    for (const auto& img : p->images) {
      set.images.push_back(&img);
      std::vector<std::uint8_t> row(set.class_names.size(), 0);
      row.at(static_cast<std::size_t>(*p->latent_class)) = 1;
      set.targets.push_back(std::move(row));
    }
  }
  return set;
}

Classifier::Classifier(model::Model encoder, int n_outputs, FinetuneMode mode, std::uint64_t seed)
    : encoder_(std::move(encoder)), mode_(mode), n_outputs_(n_outputs) {
  if (n_outputs < 1) throw ConfigError("classifier needs at least one output");
  nn::Rng rng(seed);
  const int d = encoder_.config().enc_dim;
  head_ = nn::MlpHead(head_params_, "head", d, d, n_outputs, rng);
}

Matrix Classifier::logits_from_features(const Matrix& features) const { return head_.forward(features, nullptr); }

Matrix Classifier::probabilities_from_logits(const Matrix& logits) const {
  Matrix p(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    if (mode_ == FinetuneMode::single_label) {
      const Eigen::RowVectorXd l = logits.row(r).cast<double>();
      const Eigen::RowVectorXd e = (l.array() - l.maxCoeff()).exp();
      p.row(r) = (e / e.sum()).cast<float>();
    } else {
      for (Eigen::Index c = 0; c < logits.cols(); ++c)
        p(r, c) = static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(logits(r, c)))));
    }
  }
  return p;
}

Matrix Classifier::predict_proba(const std::vector<const corpus::ImageRecord*>& images) const {
  return probabilities_from_logits(logits_from_features(encoder_.image_features(images)));
}

std::map<std::string, Matrix> Classifier::snapshot() const {
  std::map<std::string, Matrix> out;
  for (const auto* p : encoder_.params().all()) out.emplace(p->name, p->value);
  for (const auto* p : head_params_.all()) out.emplace(p->name, p->value);
  return out;
}

void Classifier::restore(const std::map<std::string, Matrix>& values) {
  for (auto* p : encoder_.params().all()) p->value = values.at(p->name);
  for (auto* p : head_params_.all()) p->value = values.at(p->name);
}

namespace {

/// Mean cross-entropy (softmax or per-label sigmoid) and its logit gradient.
double classification_loss(const Matrix& logits, const std::vector<const std::vector<std::uint8_t>*>& targets,
                           FinetuneMode mode, Matrix& d_logits) {
  const auto n = logits.rows();
  const auto c = logits.cols();
  d_logits.resize(n, c);
  double loss = 0;
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto& t = *targets[static_cast<std::size_t>(r)];
    const Eigen::RowVectorXd l = logits.row(r).cast<double>();
    if (mode == FinetuneMode::single_label) {
      const double m = l.maxCoeff();
      const Eigen::RowVectorXd e = (l.array() - m).exp();
      const double s = e.sum();
      for (Eigen::Index k = 0; k < c; ++k) {
        const double p = e(k) / s;
        const double y = t[static_cast<std::size_t>(k)];
        if (y) loss -= (l(k) - m) - std::log(s);
        d_logits(r, k) = static_cast<float>((p - y) / static_cast<double>(n));
      }
    } else {
      for (Eigen::Index k = 0; k < c; ++k) {
        const double x = l(k);
        const double y = t[static_cast<std::size_t>(k)];
        loss += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::fabs(x)));
        const double p = 1.0 / (1.0 + std::exp(-x));
        d_logits(r, k) = static_cast<float>((p - y) / static_cast<double>(n * c));
      }
    }
  }
  return mode == FinetuneMode::single_label ? loss / static_cast<double>(n) : loss / static_cast<double>(n * c);
}

double score_macro_auroc(const Classifier& clf, const Matrix& val_features, const LabeledSet& val) {
  const Matrix prob = clf.probabilities_from_logits(clf.logits_from_features(val_features));
  return evaluation::macro_auroc(prob.cast<double>(), val.targets);
}

void check_classes(const LabeledSet& train, const FinetuneConfig& cfg) {
  if (train.size() == 0) throw ConfigError("fine-tune training set is empty");
  if (cfg.mode == FinetuneMode::single_label && train.n_classes() < 2)
    throw ConfigError("single-label fine-tuning needs at least 2 classes");
  std::vector<bool> seen(static_cast<std::size_t>(train.n_classes()), false);
  for (const auto& row : train.targets) {
    if (static_cast<int>(row.size()) != train.n_classes()) throw DimensionError("fine-tune target width differs from class count");
    for (std::size_t c = 0; c < row.size(); ++c)
      if (row[c]) seen[c] = true;
  }
  std::string missing;
  for (std::size_t c = 0; c < seen.size(); ++c)
    if (!seen[c]) missing += (missing.empty() ? "" : ", ") + train.class_names[c];
  if (!missing.empty()) throw ConfigError("classes absent from the fine-tune training split: " + missing);
}

}  // namespace

FinetuneResult finetune(const model::Checkpoint& pretrained, const LabeledSet& train, const LabeledSet& val,
                        const FinetuneConfig& cfg, const FinetuneHooks& hooks) {
  cfg.validate();
  check_classes(train, cfg);
  if (val.size() == 0) throw ConfigError("fine-tune validation set is empty");
  if (val.class_names != train.class_names) throw ConfigError("fine-tune train and validation class lists differ");

  FinetuneResult result;
  result.classifier = std::make_unique<Classifier>(model::model_from_checkpoint(pretrained), train.n_classes(), cfg.mode, cfg.seed);
  Classifier& clf = *result.classifier;
  model::Model& enc = clf.encoder();
  const auto schedule = finetune_schedule(cfg);

  nn::AdamWConfig ocfg;
  ocfg.weight_decay = cfg.weight_decay;
  nn::AdamW head_opt(ocfg);
  nn::AdamW enc_opt(ocfg);
  const auto head_params = clf.head_params().all();
  const auto enc_params = enc.image_encoder_params();

  // Features are fixed while the encoder is frozen.
  Matrix train_features = enc.image_features(train.images);
  Matrix val_features = enc.image_features(val.images);
  bool features_fresh = true;

  nn::Rng rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::map<std::string, Matrix> best;
  result.best_val_auroc = -1;
  const int n_patch = enc.config().n_patches();

  for (int epoch = 0; epoch < cfg.total_epochs; ++epoch) {
    const bool frozen = epoch < cfg.freeze_epochs;
    const double lr = lr_at(0, epoch, schedule);
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[uniform_index(rng, i + 1)]);
    double loss_sum = 0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const std::vector<std::uint8_t>*> tgt;
      for (std::size_t k = start; k < end; ++k) tgt.push_back(&train.targets[order[k]]);
      clf.head_params().zero_grad();
      Matrix d_logits;
      if (frozen) {
        Matrix feats(static_cast<Eigen::Index>(end - start), train_features.cols());
        for (std::size_t k = start; k < end; ++k) feats.row(static_cast<Eigen::Index>(k - start)) = train_features.row(static_cast<Eigen::Index>(order[k]));
        nn::MlpHeadCache hc;
        Matrix logits = clf.head().forward(feats, &hc);
        loss_sum += classification_loss(logits, tgt, cfg.mode, d_logits) * static_cast<double>(end - start);
        clf.head().backward(hc, d_logits);
      } else {
        enc.params().zero_grad();
        std::vector<const corpus::ImageRecord*> imgs;
        for (std::size_t k = start; k < end; ++k) imgs.push_back(train.images[order[k]]);
        const auto segs = nn::Segments::uniform(static_cast<int>(imgs.size()), n_patch);
        Matrix patches(static_cast<Eigen::Index>(imgs.size()) * n_patch, enc.config().patch_dim());
        std::vector<int> positions;
        for (std::size_t k = 0; k < imgs.size(); ++k) {
          patches.middleRows(static_cast<Eigen::Index>(k) * n_patch, n_patch) = enc.patchify(*imgs[k]);
          for (int p = 0; p < n_patch; ++p) positions.push_back(p);
        }
        model::EncoderTrace trace;
        Matrix tokens = enc.encoder_forward(patches, positions, segs, &trace);
        Matrix feats = enc.pool_tokens(tokens, segs);
        nn::MlpHeadCache hc;
        Matrix logits = clf.head().forward(feats, &hc);
        loss_sum += classification_loss(logits, tgt, cfg.mode, d_logits) * static_cast<double>(end - start);
        Matrix d_feats = clf.head().backward(hc, d_logits);
        enc.encoder_backward(trace, positions, enc.pool_backward(d_feats, segs));
        enc_opt.step(enc_params, lr);
        features_fresh = false;
      }
      head_opt.step(head_params, lr);
      seen += end - start;
    }
    if (!std::isfinite(loss_sum)) throw NumericError("fine-tune loss became non-finite in epoch " + std::to_string(epoch));
    FinetuneEpoch fe{epoch, lr, loss_sum / static_cast<double>(seen), 0.0, frozen};
    if (hooks.on_epoch) hooks.on_epoch(clf, fe);
    if (!features_fresh) val_features = enc.image_features(val.images);
    fe.val_auroc = score_macro_auroc(clf, val_features, val);
    if (fe.val_auroc > result.best_val_auroc) {
      result.best_val_auroc = fe.val_auroc;
      result.best_epoch = epoch;
      best = clf.snapshot();
    }
    result.history.push_back(fe);
  }
  clf.restore(best);
  return result;
}

FewshotSample fewshot_sample(const LabeledSet& set, int n_per_class, std::uint64_t seed) {
  if (n_per_class < 1) throw ConfigError("few-shot n_per_class must be at least 1");
  const auto labels = set.labels();
  FewshotSample out;
  out.subset.class_names = set.class_names;
  nn::Rng rng(seed);
  std::vector<std::size_t> picked;
  for (int c = 0; c < set.n_classes(); ++c) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == c) idx.push_back(i);
    if (idx.empty()) throw DataError("few-shot sampling: class " + set.class_names[static_cast<std::size_t>(c)] + " has no examples");
    const std::size_t take = std::min(idx.size(), static_cast<std::size_t>(n_per_class));
    if (take < static_cast<std::size_t>(n_per_class))
      out.warnings.push_back("class " + set.class_names[static_cast<std::size_t>(c)] + " has only " +
                             std::to_string(idx.size()) + " examples; using all of them instead of " +
                             std::to_string(n_per_class));
    for (std::size_t i = 0; i < take; ++i) {
      const std::size_t j = i + uniform_index(rng, idx.size() - i);
      std::swap(idx[i], idx[j]);
    }
    picked.insert(picked.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take));
  }
  std::sort(picked.begin(), picked.end());
  for (auto i : picked) {
    out.subset.images.push_back(set.images[i]);
    out.subset.targets.push_back(set.targets[i]);
  }
  return out;
}

}  // namespace mclab::training
