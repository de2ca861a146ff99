// Copyright 2026 The mclab Authors
// SPDX-License-Identifier: Apache-2.0

#include "mclab/evaluation.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mclab/errors.hpp"

namespace mclab::evaluation {

using json = nlohmann::json;
using nn::Matrix;

// --- embedding store ---------------------------------------------------------------

std::string_view to_string(Side s) { return s == Side::image ? "image" : "text"; }

Side side_from_string(std::string_view s) {
  if (s == "image") return Side::image;
  if (s == "text") return Side::text;
  throw ConfigError("side must be image or text, got " + std::string(s));
}

void EmbeddingStore::validate() const {
  if (matrix.rows() != static_cast<Eigen::Index>(ids.size()))
    throw ValidationError("embedding store: " + std::to_string(ids.size()) + " ids for " +
                          std::to_string(matrix.rows()) + " rows");
  if (metadata.size() != ids.size()) throw ValidationError("embedding store: metadata count differs from id count");
  std::set<std::string_view> seen;
  for (const auto& id : ids) {
    if (id.empty() || id.find_first_of("\t\n\r") != std::string::npos)
      throw ValidationError("embedding store: malformed id '" + id + "'");
    if (!seen.insert(id).second) throw ValidationError("embedding store: duplicate id " + id);
  }
  for (const auto& m : metadata)
    if (m.find_first_of("\n\r") != std::string::npos) throw ValidationError("embedding store: metadata spans lines");
  for (Eigen::Index r = 0; r < matrix.rows(); ++r) {
    const double norm = matrix.row(r).cast<double>().norm();
    if (!(std::fabs(norm - 1.0) <= 1e-6))
      throw ValidationError("embedding store: row " + ids[static_cast<std::size_t>(r)] + " has norm " +
                            std::to_string(norm));
  }
}

bool EmbeddingStore::operator==(const EmbeddingStore& o) const {
  return side == o.side && ids == o.ids && metadata == o.metadata && matrix.rows() == o.matrix.rows() &&
         matrix.cols() == o.matrix.cols() &&
         std::memcmp(matrix.data(), o.matrix.data(), static_cast<std::size_t>(matrix.size()) * sizeof(float)) == 0;
}

namespace {

constexpr char kStoreMagic[] = "MCLAB-EMB";
constexpr std::size_t kStoreMagicLen = sizeof(kStoreMagic) - 1;

static_assert(std::endian::native == std::endian::little, "embedding store I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in, const char* what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw ParseError(std::string("embedding store truncated while reading ") + what);
  return v;
}

/// Rows rescaled in double precision so the float norm is within rounding of 1.
Matrix renormalize(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const Eigen::RowVectorXd row = m.row(r).cast<double>();
    const double n = row.norm();
    if (!(n > 0) || !std::isfinite(n)) throw NumericError("cannot normalize a zero or non-finite embedding");
    out.row(r) = (row / n).cast<float>();
  }
  return out;
}

}  // namespace

void save_embedding_store(const EmbeddingStore& store, const std::filesystem::path& path) {
  store.validate();
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write embedding store " + path.string());
    out.write(kStoreMagic, kStoreMagicLen);
    put<std::uint32_t>(out, kEmbeddingStoreVersion);
    put<std::uint64_t>(out, store.ids.size());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(store.matrix.cols()));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(store.side));
    out.write(reinterpret_cast<const char*>(store.matrix.data()),
              static_cast<std::streamsize>(store.matrix.size() * sizeof(float)));
    for (std::size_t i = 0; i < store.ids.size(); ++i) out << store.ids[i] << '\t' << store.metadata[i] << '\n';
    if (!out) throw IoError("short write to embedding store " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

EmbeddingStore load_embedding_store(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open embedding store " + path.string());
  char magic[kStoreMagicLen];
  in.read(magic, kStoreMagicLen);
  if (!in || std::memcmp(magic, kStoreMagic, kStoreMagicLen) != 0)
    throw ParseError(path.string() + " is not an embedding store");
  const auto version = get<std::uint32_t>(in, "version");
  if (version != kEmbeddingStoreVersion)
    throw ParseError("embedding store version " + std::to_string(version) + " is not supported");
  const auto count = get<std::uint64_t>(in, "count");
  const auto dim = get<std::uint32_t>(in, "dim");
  const auto side = get<std::uint8_t>(in, "side");
  if (side > 1) throw ParseError("embedding store: unknown side byte " + std::to_string(side));
  if (count * dim > (1ULL << 31)) throw ParseError("embedding store: implausible size");
  EmbeddingStore s;
  s.side = static_cast<Side>(side);
  s.matrix.resize(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(dim));
  in.read(reinterpret_cast<char*>(s.matrix.data()), static_cast<std::streamsize>(s.matrix.size() * sizeof(float)));
  if (!in) throw ParseError("embedding store truncated in the row block");
  std::string line;
  while (std::getline(in, line)) {
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError("embedding store: metadata line without a tab");
    s.ids.push_back(line.substr(0, tab));
    s.metadata.push_back(line.substr(tab + 1));
  }
  if (s.ids.size() != count)
    throw ParseError("embedding store: " + std::to_string(s.ids.size()) + " metadata lines for " +
                     std::to_string(count) + " rows");
  s.validate();
  return s;
}

EmbeddingStore embed_image_store(const model::Model& model, const std::vector<const corpus::PatientRecord*>& patients) {
  EmbeddingStore s;
  s.side = Side::image;
  std::vector<const corpus::ImageRecord*> images;
  for (const auto* p : patients)
    for (const auto& img : p->images) {
      images.push_back(&img);
      s.ids.push_back(img.image_id);
      json meta{{"patient_id", p->patient_id}, {"modality", img.modality.tag()}};
      if (p->latent_class) meta["latent_class"] = *p->latent_class;
      s.metadata.push_back(meta.dump());
    }
  s.matrix = images.empty() ? Matrix(0, model.config().proj_dim) : renormalize(model.embed_images(images));
  return s;
}

EmbeddingStore embed_prompt_store(const model::Model& model, const corpus::CorpusManifest& corpus) {
  EmbeddingStore s;
  s.side = Side::text;
  std::vector<std::string> prompts;
  for (const auto& mod : corpus.modality_set)
    for (std::size_t c = 0; c < corpus.class_names.size(); ++c) {
      prompts.push_back(text::build_prompt(mod.tag(), corpus.class_names[c]));
      s.ids.push_back("prompt:" + mod.tag() + ":" + std::to_string(c));
      s.metadata.push_back(json{{"modality", mod.tag()},
                                {"class", corpus.class_names[c]},
                                {"latent_class", static_cast<int>(c)},
                                {"text", prompts.back()}}
                               .dump());
    }
  s.matrix = prompts.empty() ? Matrix(0, model.config().proj_dim) : renormalize(model.embed_texts(prompts));
  return s;
}

// --- zero-shot -------------------------------------------------------------------------

ZeroShotResult zero_shot_classify(const Eigen::VectorXf& image,
                                  const std::vector<std::pair<std::string, Eigen::VectorXf>>& class_prompts) {
  if (class_prompts.size() < 2) throw ConfigError("zero-shot classification needs at least 2 classes");
  std::set<std::string> names;
  for (const auto& [name, emb] : class_prompts) {
    if (!names.insert(name).second) throw ConfigError("duplicate zero-shot class " + name);
    if (emb.size() != image.size()) throw DimensionError("prompt " + name + " has the wrong embedding dimension");
  }
  ZeroShotResult r;
  const Eigen::VectorXd img = image.cast<double>();
  for (std::size_t c = 0; c < class_prompts.size(); ++c) {
    r.scores.push_back(img.dot(class_prompts[c].second.cast<double>()));
    if (r.scores[c] > r.scores[r.predicted]) r.predicted = c;
  }
  r.predicted_class = class_prompts[r.predicted].first;
  return r;
}

Eigen::MatrixXd zero_shot_scores(const model::Model& model, const std::vector<const corpus::ImageRecord*>& images,
                                 const std::vector<std::string>& class_names) {
  if (class_names.size() < 2) throw ConfigError("zero-shot classification needs at least 2 classes");
  const std::set<std::string> unique(class_names.begin(), class_names.end());
  if (unique.size() != class_names.size()) throw ConfigError("duplicate zero-shot class name");
  const Matrix img = images.empty() ? Matrix(0, model.config().proj_dim) : model.embed_images(images);
  const double tau = model.temperature();
  std::map<std::string, Matrix> prompts;
  Eigen::MatrixXd out(static_cast<Eigen::Index>(images.size()), static_cast<Eigen::Index>(class_names.size()));
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& tag = images[i]->modality.tag();
    auto it = prompts.find(tag);
    if (it == prompts.end()) {
      std::vector<std::string> texts;
      for (const auto& c : class_names) texts.push_back(text::build_prompt(tag, c));
      it = prompts.emplace(tag, model.embed_texts(texts)).first;
    }
    const Eigen::RowVectorXd logits =
        (it->second.cast<double>() * img.row(static_cast<Eigen::Index>(i)).transpose().cast<double>()).transpose() / tau;
    const Eigen::RowVectorXd e = (logits.array() - logits.maxCoeff()).exp();
    out.row(static_cast<Eigen::Index>(i)) = e / e.sum();
  }
  return out;
}

// --- reports -------------------------------------------------------------------------

void MetricReport::validate() const {
  if (!std::isfinite(value) || !std::isfinite(ci_low) || !std::isfinite(ci_high))
    throw ValidationError("metric report " + metric + " has a non-finite value");
  if (!(ci_low <= value && value <= ci_high)) throw ValidationError("metric report " + metric + " lies outside its interval");
  if (p_value && !(*p_value >= 0 && *p_value <= 1)) throw ValidationError("metric report " + metric + " has p outside [0, 1]");
}

void to_json(json& j, const MetricReport& r) {
  j = json{{"protocol", r.protocol}, {"dataset", r.dataset}, {"metric", r.metric}, {"value", r.value},
           {"ci_low", r.ci_low},     {"ci_high", r.ci_high},  {"n", r.n}};
  if (r.seed) j["seed"] = *r.seed;
  if (r.n_per_class) j["n_per_class"] = *r.n_per_class;
  if (r.p_value) j["p_value"] = *r.p_value;
  if (r.comparator) j["comparator"] = *r.comparator;
}

void from_json(const json& j, MetricReport& r) {
  r.protocol = j.at("protocol").get<std::string>();
  r.dataset = j.at("dataset").get<std::string>();
  r.metric = j.at("metric").get<std::string>();
  r.value = j.at("value").get<double>();
  r.ci_low = j.at("ci_low").get<double>();
  r.ci_high = j.at("ci_high").get<double>();
  r.n = j.at("n").get<std::size_t>();
  if (j.contains("seed")) r.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("n_per_class")) r.n_per_class = j.at("n_per_class").get<int>();
  if (j.contains("p_value")) r.p_value = j.at("p_value").get<double>();
  if (j.contains("comparator")) r.comparator = j.at("comparator").get<std::string>();
}

void write_reports(const std::vector<MetricReport>& reports, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write report file " + path.string());
  for (const auto& r : reports) {
    r.validate();
    out << json(r).dump() << '\n';
  }
  if (!out) throw IoError("short write to report file " + path.string());
}

std::vector<MetricReport> read_reports(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open report file " + path.string());
  std::vector<MetricReport> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(json::parse(line).get<MetricReport>());
    } catch (const json::exception& e) {
      throw ParseError(path.string() + " line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

namespace {

MetricReport centred(std::string protocol, std::string dataset, std::string metric, double value,
                     const std::vector<double>& values) {
  MetricReport r;
  r.protocol = std::move(protocol);
  r.dataset = std::move(dataset);
  r.metric = std::move(metric);
  r.value = value;
  r.n = values.size();
  const double se = values.size() >= 2 ? confidence_interval(values).se : 0.0;
  r.ci_low = value - 1.96 * se;
  r.ci_high = value + 1.96 * se;
  return r;
}

}  // namespace

MetricReport summarize(std::string protocol, std::string dataset, std::string metric, const std::vector<double>& values) {
  const auto ci = confidence_interval(values);
  MetricReport r;
  r.protocol = std::move(protocol);
  r.dataset = std::move(dataset);
  r.metric = std::move(metric);
  r.value = ci.mean;
  r.ci_low = ci.low;
  r.ci_high = ci.high;
  r.n = ci.n;
  return r;
}

// --- protocols -----------------------------------------------------------------------

DownstreamSplit downstream_split(const corpus::CorpusManifest& corpus,
                                 const std::vector<const corpus::PatientRecord*>& patients, std::uint64_t seed,
                                 double train_fraction, double val_fraction) {
  if (!(train_fraction > 0 && val_fraction > 0 && train_fraction + val_fraction < 1))
    throw ConfigError("downstream split fractions must be positive and leave a test share");
  std::vector<const corpus::PatientRecord*> order(patients);
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->patient_id < b->patient_id; });
  nn::Rng rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[static_cast<std::size_t>(rng() % i)]);
  const auto n = static_cast<double>(order.size());
  const auto n_train = static_cast<std::size_t>(std::lround(train_fraction * n));
  const auto n_val = static_cast<std::size_t>(std::lround(val_fraction * n));
  if (n_train == 0 || n_val == 0 || n_train + n_val >= order.size())
    throw DataError("too few patients (" + std::to_string(order.size()) + ") for a train/val/test partition");
  auto slice = [&](std::size_t from, std::size_t to) {
    return std::vector<const corpus::PatientRecord*>(order.begin() + static_cast<std::ptrdiff_t>(from),
                                                     order.begin() + static_cast<std::ptrdiff_t>(to));
  };
  DownstreamSplit s;
  s.train = training::latent_class_set(corpus, slice(0, n_train));
  s.val = training::latent_class_set(corpus, slice(n_train, n_train + n_val));
  s.test = training::latent_class_set(corpus, slice(n_train + n_val, order.size()));
  return s;
}

ClassScores per_class_scores(const Eigen::MatrixXd& scores, const LabelMatrix& targets) {
  if (static_cast<std::size_t>(scores.rows()) != targets.size()) throw DimensionError("score rows differ from target rows");
  ClassScores out;
  for (Eigen::Index c = 0; c < scores.cols(); ++c) {
    std::vector<double> s(static_cast<std::size_t>(scores.rows()));
    std::vector<int> l(targets.size());
    for (std::size_t r = 0; r < targets.size(); ++r) {
      s[r] = scores(static_cast<Eigen::Index>(r), c);
      l[r] = targets[r].at(static_cast<std::size_t>(c));
    }
    out.auroc.push_back(auroc(s, l));
    out.aupr.push_back(aupr(s, l));
  }
  return out;
}

namespace {

std::vector<MetricReport> classification_reports(const std::string& protocol, const std::string& dataset,
                                                 const Eigen::MatrixXd& scores, const training::LabeledSet& test) {
  const auto pc = per_class_scores(scores, test.targets);
  return {centred(protocol, dataset, "macro_auroc", macro_auroc(scores, test.targets), pc.auroc),
          centred(protocol, dataset, "macro_aupr", macro_aupr(scores, test.targets), pc.aupr)};
}

}  // namespace

std::vector<MetricReport> zeroshot_protocol(const model::Model& model, const training::LabeledSet& test,
                                            const std::string& dataset) {
  return classification_reports("zeroshot", dataset, zero_shot_scores(model, test.images, test.class_names), test);
}

std::vector<MetricReport> retrieval_protocol(const model::Model& model, const corpus::CorpusManifest& corpus,
                                             const std::vector<const corpus::PatientRecord*>& patients,
                                             const RetrievalSetup& setup, const std::string& dataset) {
  if (corpus.modality_set.size() < 2) throw ConfigError("retrieval needs at least two modalities");
  std::vector<const corpus::PatientRecord*> sorted(patients);
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->patient_id < b->patient_id; });
  std::vector<const corpus::PatientRecord*> gallery;
  std::size_t n_items = 0;
  for (const auto* p : sorted) {
    if (n_items + p->images.size() > setup.gallery_items) break;
    gallery.push_back(p);
    n_items += p->images.size();
  }
  if (gallery.empty()) throw DataError("retrieval gallery is empty");

  const EmbeddingStore images = embed_image_store(model, gallery);
  std::map<std::string, const corpus::ImageRecord*> by_id;
  std::map<std::string, int> class_of;
  for (const auto* p : gallery) {
    if (!p->latent_class) throw DataError("patient " + p->patient_id + " has no class label");
    for (const auto& img : p->images) {
      by_id[img.image_id] = &img;
      class_of[img.image_id] = *p->latent_class;
    }
  }
  std::set<int> present;
  for (const auto& [id, c] : class_of) present.insert(c);

  // Prompts for classes that occur in the gallery.
  const EmbeddingStore all_prompts = embed_prompt_store(model, corpus);
  std::vector<std::string> prompt_ids;
  std::vector<int> prompt_class;
  std::vector<Eigen::Index> prompt_rows;
  for (std::size_t i = 0; i < all_prompts.size(); ++i) {
    const int c = json::parse(all_prompts.metadata[i]).at("latent_class").get<int>();
    if (!present.count(c)) continue;
    prompt_ids.push_back(all_prompts.ids[i]);
    prompt_class.push_back(c);
    prompt_rows.push_back(static_cast<Eigen::Index>(i));
  }
  Eigen::MatrixXf prompts(static_cast<Eigen::Index>(prompt_rows.size()), all_prompts.matrix.cols());
  for (std::size_t i = 0; i < prompt_rows.size(); ++i) prompts.row(static_cast<Eigen::Index>(i)) = all_prompts.matrix.row(prompt_rows[i]);
  const Eigen::MatrixXf image_rows = images.matrix;

  std::vector<MetricReport> out;
  auto emit = [&](const std::string& task, const RetrievalResult& r) {
    for (std::size_t k = 0; k < r.ks.size(); ++k) {
      std::vector<double> hit;
      for (auto rank : r.best_rank) hit.push_back(rank < static_cast<std::size_t>(r.ks[k]) ? 1.0 : 0.0);
      out.push_back(centred("retrieval", dataset, task + "_R@" + std::to_string(r.ks[k]), r.recall[k], hit));
    }
    std::vector<double> per_query;
    for (auto rank : r.best_rank) {
      double s = 0;
      for (int k : r.ks) s += rank < static_cast<std::size_t>(k) ? 1.0 : 0.0;
      per_query.push_back(s / static_cast<double>(r.ks.size()));
    }
    out.push_back(centred("retrieval", dataset, task + "_mean_recall", r.mean_recall, per_query));
  };

  // Text to image: every gallery image of the prompt's class is correct.
  {
    std::map<std::string, std::set<std::string>> gt;
    for (std::size_t q = 0; q < prompt_ids.size(); ++q)
      for (const auto& [id, c] : class_of)
        if (c == prompt_class[q]) gt[prompt_ids[q]].insert(id);
    emit("t2i", recall_at_k(prompt_ids, prompts, images.ids, image_rows, gt, setup.ks));
  }
  // Image to image: first-modality queries against other-modality targets.
  {
    const auto& query_mod = corpus.modality_set.front();
    std::vector<std::string> q_ids, t_ids;
    std::vector<Eigen::Index> q_rows, t_rows;
    for (std::size_t i = 0; i < images.size(); ++i) {
      const bool is_query = by_id.at(images.ids[i])->modality == query_mod;
      (is_query ? q_ids : t_ids).push_back(images.ids[i]);
      (is_query ? q_rows : t_rows).push_back(static_cast<Eigen::Index>(i));
    }
    Eigen::MatrixXf q(static_cast<Eigen::Index>(q_rows.size()), image_rows.cols());
    Eigen::MatrixXf t(static_cast<Eigen::Index>(t_rows.size()), image_rows.cols());
    for (std::size_t i = 0; i < q_rows.size(); ++i) q.row(static_cast<Eigen::Index>(i)) = image_rows.row(q_rows[i]);
    for (std::size_t i = 0; i < t_rows.size(); ++i) t.row(static_cast<Eigen::Index>(i)) = image_rows.row(t_rows[i]);
    std::map<std::string, std::set<std::string>> by_class, by_patient;
    for (const auto& qid : q_ids)
      for (const auto& tid : t_ids) {
        if (class_of.at(qid) == class_of.at(tid)) by_class[qid].insert(tid);
        if (by_id.at(qid)->patient_id == by_id.at(tid)->patient_id) by_patient[qid].insert(tid);
      }
    emit("i2i", recall_at_k(q_ids, q, t_ids, t, by_class, setup.ks, true));
    emit("i2i_patient", recall_at_k(q_ids, q, t_ids, t, by_patient, setup.ks, true));
  }
  // Image to text: prompts of the image's class are correct.
  {
    std::map<std::string, std::set<std::string>> gt;
    for (const auto& id : images.ids)
      for (std::size_t p = 0; p < prompt_ids.size(); ++p)
        if (prompt_class[p] == class_of.at(id)) gt[id].insert(prompt_ids[p]);
    emit("i2t", recall_at_k(images.ids, image_rows, prompt_ids, prompts, gt, setup.ks));
  }
  return out;
}

std::vector<MetricReport> fewshot_protocol(const model::Checkpoint& checkpoint, const DownstreamSplit& split,
                                           const FewshotSetup& setup, const std::string& dataset,
                                           std::vector<std::string>* warnings) {
  if (setup.shots.empty()) throw ConfigError("few-shot protocol needs at least one shot count");
  if (setup.n_seeds < 1) throw ConfigError("few-shot protocol needs at least one seed");
  std::vector<MetricReport> runs, aggregates;
  std::vector<std::vector<double>> values(setup.shots.size());
  for (std::size_t si = 0; si < setup.shots.size(); ++si) {
    const int n = setup.shots[si];
    for (int s = 0; s < setup.n_seeds; ++s) {
      const std::uint64_t seed = setup.seed + static_cast<std::uint64_t>(s);
      auto sample = training::fewshot_sample(split.train, n, seed);
      if (warnings)
        for (auto& w : sample.warnings) warnings->push_back("n=" + std::to_string(n) + " seed=" + std::to_string(seed) + ": " + w);
      auto cfg = setup.finetune;
      cfg.seed = seed;
      auto result = training::finetune(checkpoint, sample.subset, split.val, cfg);
      const Eigen::MatrixXd scores = result.classifier->predict_proba(split.test.images).cast<double>();
      auto reports = classification_reports("fewshot", dataset, scores, split.test);
      auto& r = reports.front();
      r.seed = seed;
      r.n_per_class = n;
      values[si].push_back(r.value);
      runs.push_back(r);
    }
    auto agg = values[si].size() >= 2 ? summarize("fewshot", dataset, "macro_auroc", values[si])
                                      : centred("fewshot", dataset, "macro_auroc", values[si][0], values[si]);
    agg.n_per_class = n;
    if (si > 0 && values[si].size() >= 2) {
      agg.p_value = two_sided_t_test(values[si], values[0], true);
      agg.comparator = "n_per_class=" + std::to_string(setup.shots[0]);
    }
    aggregates.push_back(agg);
  }
  runs.insert(runs.end(), aggregates.begin(), aggregates.end());
  return runs;
}

std::vector<MetricReport> finetune_protocol(const model::Checkpoint& checkpoint, const DownstreamSplit& split,
                                            const training::FinetuneConfig& cfg, const std::string& dataset) {
  auto result = training::finetune(checkpoint, split.train, split.val, cfg);
  const Eigen::MatrixXd scores = result.classifier->predict_proba(split.test.images).cast<double>();
  return classification_reports("finetune", dataset, scores, split.test);
}

Protocol protocol_from_string(std::string_view s) {
  if (s == "zeroshot") return Protocol::zeroshot;
  if (s == "fewshot") return Protocol::fewshot;
  if (s == "finetune") return Protocol::finetune;
  if (s == "retrieval") return Protocol::retrieval;
  throw ConfigError("unknown protocol " + std::string(s));
}

std::string_view to_string(Protocol p) {
  switch (p) {
    case Protocol::zeroshot: return "zeroshot";
    case Protocol::fewshot: return "fewshot";
    case Protocol::finetune: return "finetune";
    case Protocol::retrieval: return "retrieval";
  }
  return "unknown";
}

void EvalConfig::validate() const {
  if (dataset.empty()) throw ConfigError("eval.dataset must not be empty");
  if (retrieval.ks.empty()) throw ConfigError("eval.ks must not be empty");
  for (int k : retrieval.ks)
    if (k < 1) throw ConfigError("eval.ks entries must be positive");
  if (retrieval.gallery_items < 1) throw ConfigError("eval.gallery_items must be positive");
  if (shots.empty()) throw ConfigError("eval.shots must not be empty");
  for (int n : shots)
    if (n < 1) throw ConfigError("eval.shots entries must be positive");
  if (n_seeds < 1) throw ConfigError("eval.n_seeds must be positive");
  const std::set<std::string> unique(classes.begin(), classes.end());
  if (unique.size() != classes.size()) throw ConfigError("eval.classes contains duplicates");
  if (classes.size() == 1) throw ConfigError("eval.classes needs at least 2 classes");
}

void to_json(json& j, const EvalConfig& c) {
  j = json{{"dataset", c.dataset},
           {"seed", c.seed},
           {"ks", c.retrieval.ks},
           {"gallery_items", c.retrieval.gallery_items},
           {"shots", c.shots},
           {"n_seeds", c.n_seeds},
           {"classes", c.classes}};
}

void from_json(const json& j, EvalConfig& c) {
  if (!j.is_object()) throw ConfigError("eval config must be an object");
  for (const auto& [key, v] : j.items()) {
    if (key == "dataset") c.dataset = v.get<std::string>();
    else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else if (key == "ks") c.retrieval.ks = v.get<std::vector<int>>();
    else if (key == "gallery_items") c.retrieval.gallery_items = v.get<std::size_t>();
    else if (key == "shots") c.shots = v.get<std::vector<int>>();
    else if (key == "n_seeds") c.n_seeds = v.get<int>();
    else if (key == "classes") c.classes = v.get<std::vector<std::string>>();
    else throw ConfigError("unknown key eval." + key);
  }
}

namespace {

training::LabeledSet restrict_classes(const training::LabeledSet& set, const std::vector<std::string>& classes) {
  if (classes.empty()) return set;
  std::vector<std::size_t> cols;
  for (const auto& name : classes) {
    auto it = std::find(set.class_names.begin(), set.class_names.end(), name);
    if (it == set.class_names.end()) throw ConfigError("unknown class " + name);
    cols.push_back(static_cast<std::size_t>(it - set.class_names.begin()));
  }
  training::LabeledSet out;
  out.class_names = classes;
  for (std::size_t i = 0; i < set.size(); ++i) {
    std::vector<std::uint8_t> row;
    bool any = false;
    for (auto c : cols) {
      row.push_back(set.targets[i][c]);
      any = any || set.targets[i][c];
    }
    if (!any) continue;
    out.images.push_back(set.images[i]);
    out.targets.push_back(std::move(row));
  }
  return out;
}

}  // namespace

std::vector<MetricReport> evaluate_protocol(const model::Checkpoint& checkpoint, const corpus::CorpusManifest& corpus,
                                            Protocol protocol, const EvalConfig& eval,
                                            const training::FinetuneConfig& finetune, std::vector<std::string>* warnings) {
  eval.validate();
  const auto test = corpus.patients(corpus::Split::test);
  if (test.empty()) throw DataError("corpus has no test patients");
  switch (protocol) {
    case Protocol::zeroshot: {
      const auto m = model::model_from_checkpoint(checkpoint);
      return zeroshot_protocol(m, restrict_classes(training::latent_class_set(corpus, test), eval.classes), eval.dataset);
    }
    case Protocol::retrieval: {
      const auto m = model::model_from_checkpoint(checkpoint);
      return retrieval_protocol(m, corpus, test, eval.retrieval, eval.dataset);
    }
    case Protocol::fewshot:
    case Protocol::finetune: {
      auto split = downstream_split(corpus, test, eval.seed);
      split.train = restrict_classes(split.train, eval.classes);
      split.val = restrict_classes(split.val, eval.classes);
      split.test = restrict_classes(split.test, eval.classes);
      if (protocol == Protocol::finetune) return finetune_protocol(checkpoint, split, finetune, eval.dataset);
      FewshotSetup setup;
      setup.shots = eval.shots;
      setup.n_seeds = eval.n_seeds;
      setup.seed = eval.seed;
      setup.finetune = finetune;
      return fewshot_protocol(checkpoint, split, setup, eval.dataset, warnings);
    }
  }
  throw ConfigError("unknown protocol");
}

}  // namespace mclab::evaluation
