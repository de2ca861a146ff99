// Copyright 2026 The mclab Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mclab/mclab.h"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// Failure carrying the exit code and a one-line diagnostic.
struct Failure {
  int code;
  std::string message;
};

void check(mclab_status s) {
  if (s != MCLAB_OK) throw Failure{static_cast<int>(s), mclab_last_error()};
}

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Failure{MCLAB_E_VALIDATION, "config error: cannot read config file " + path};
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  if (!out) throw Failure{MCLAB_E_RUNTIME, "i/o error: cannot write " + path.string()};
}

std::string resolve(const std::string& config_path, const json& overrides) {
  std::optional<std::string> base;
  if (!config_path.empty()) base = read_text(config_path);
  const std::string patch = overrides.dump();
  char* out = nullptr;
  check(mclab_config_resolve(base ? base->c_str() : nullptr, patch.c_str(), &out));
  std::string text(out);
  mclab_string_free(out);
  return text;
}

struct CorpusHandle {
  mclab_corpus* ptr = nullptr;
  explicit CorpusHandle(const std::string& dir) {
    if (!fs::is_directory(dir)) throw Failure{MCLAB_E_VALIDATION, "data error: data directory " + dir + " not found"};
    check(mclab_corpus_load(dir.c_str(), &ptr));
  }
  ~CorpusHandle() { mclab_corpus_free(ptr); }
  CorpusHandle(const CorpusHandle&) = delete;
  CorpusHandle& operator=(const CorpusHandle&) = delete;
};

std::vector<int> int_list(const std::string& text, const char* flag) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw Failure{MCLAB_E_USAGE, std::string("usage error: ") + flag + " expects comma-separated integers"};
    }
  }
  return out;
}

std::vector<std::string> class_list(const std::vector<std::string>& flags) {
  std::vector<std::string> out;
  for (const auto& f : flags) {
    std::stringstream ss(f);
    std::string item;
    while (std::getline(ss, item, ';'))
      if (!item.empty()) out.push_back(item);
  }
  return out;
}

// Records a failure inside an output directory that may hold partial results.
void mark_failed(const fs::path& dir, const std::string& message) {
  std::error_code ec;
  if (!fs::exists(dir, ec)) return;
  std::ofstream(dir / "FAILED") << message << '\n';
}

void print_json_line(const char* line, void*) { std::cerr << line << '\n'; }

struct Options {
  std::string config, out, data, checkpoint, side = "image", split = "all", in;
  std::optional<std::uint64_t> seed;
  bool verbose = false;
  std::vector<std::string> classes;
  std::string ks, shots;
  std::optional<int> seeds;
};

int generate_data(const Options& o) {
  if (fs::exists(o.out) && !(fs::is_directory(o.out) && fs::is_empty(o.out)))
    throw Failure{MCLAB_E_VALIDATION, "validation error: output directory " + o.out + " is not empty"};
  json overrides = json::object();
  if (o.seed) overrides["corpus"]["seed"] = *o.seed;
  const auto resolved = resolve(o.config, overrides);
  mclab_corpus* corpus = nullptr;
  check(mclab_corpus_generate(resolved.c_str(), &corpus));
  const auto status = mclab_corpus_save(corpus, o.out.c_str());
  const auto n = mclab_corpus_image_count(corpus);
  mclab_corpus_free(corpus);
  try {
    check(status);
  } catch (const Failure& f) {
    mark_failed(o.out, f.message);
    throw;
  }
  write_text(fs::path(o.out) / "config.resolved", resolved);
  std::cout << "wrote " << n << " images to " << o.out << '\n';
  return 0;
}

int pretrain(const Options& o) {
  const auto resolved = resolve(o.config, json::object());
  CorpusHandle corpus(o.data);
  const fs::path out(o.out);
  fs::create_directories(out / "reports");
  try {
    fs::remove(out / "FAILED");
    write_text(out / "config.resolved", resolved);
    char* ckpt = nullptr;
    check(mclab_pretrain(corpus.ptr, resolved.c_str(), o.out.c_str(), o.verbose ? print_json_line : nullptr, nullptr,
                         &ckpt));
    std::cout << "best checkpoint " << ckpt << '\n';
    mclab_string_free(ckpt);
  } catch (const Failure& f) {
    mark_failed(out, f.message);
    throw;
  }
  return 0;
}

int embed(const Options& o) {
  CorpusHandle corpus(o.data);
  mclab_model* model = nullptr;
  check(mclab_model_load(o.checkpoint.c_str(), &model));
  size_t rows = 0;
  const auto side = o.side == "text" ? MCLAB_SIDE_TEXT : MCLAB_SIDE_IMAGE;
  const auto status = mclab_embed_store(model, corpus.ptr, o.split.c_str(), side, o.out.c_str(), &rows);
  mclab_model_free(model);
  check(status);
  std::cout << "wrote " << rows << " embeddings to " << o.out << '\n';
  return 0;
}

int evaluate(const char* protocol, const Options& o) {
  json overrides = json::object();
  if (!o.ks.empty()) overrides["eval"]["ks"] = int_list(o.ks, "--K");
  if (!o.shots.empty()) overrides["eval"]["shots"] = int_list(o.shots, "--shots");
  if (o.seeds) overrides["eval"]["n_seeds"] = *o.seeds;
  if (o.seed) overrides["eval"]["seed"] = *o.seed;
  const auto classes = class_list(o.classes);
  if (!classes.empty()) overrides["eval"]["classes"] = classes;
  const auto resolved = resolve(o.config, overrides);
  CorpusHandle corpus(o.data);
  if (!fs::is_regular_file(o.checkpoint))
    throw Failure{MCLAB_E_VALIDATION, "data error: checkpoint " + o.checkpoint + " not found"};
  const fs::path out(o.out);
  fs::create_directories(out / "reports");
  try {
    fs::remove(out / "FAILED");
    write_text(out / "config.resolved", resolved);
    const auto report = (out / "reports" / (std::string(protocol) + ".jsonl")).string();
    size_t n = 0;
    check(mclab_evaluate(o.checkpoint.c_str(), corpus.ptr, protocol, resolved.c_str(), report.c_str(), print_json_line,
                         nullptr, &n));
    std::cout << "wrote " << n << " metric lines to " << report << '\n';
  } catch (const Failure& f) {
    mark_failed(out, f.message);
    throw;
  }
  return 0;
}

int report(const Options& o) {
  size_t n = 0;
  check(mclab_report(o.in.c_str(), o.out.c_str(), &n));
  std::cout << "reported " << n << " metric lines in " << o.out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  mclab_tune_allocator();
  CLI::App app{"mclab: multi-modal contrastive pretraining and evaluation"};
  app.set_version_flag("--version", mclab_version());
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("generate-data", "Write a synthetic corpus");
  gen->add_option("--config", o.config, "Run config file")->check(CLI::ExistingFile);
  gen->add_option("--out", o.out, "Output directory (absent or empty)")->required();
  gen->add_option("--seed", o.seed, "Corpus seed");

  auto* pre = app.add_subcommand("pretrain", "Pretrain on a corpus");
  pre->add_option("--config", o.config, "Run config file")->check(CLI::ExistingFile);
  pre->add_option("--data", o.data, "Corpus directory")->required();
  pre->add_option("--out", o.out, "Run directory")->required();
  pre->add_flag("--verbose", o.verbose, "Print every step record");

  auto* emb = app.add_subcommand("embed", "Write an embedding store");
  emb->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  emb->add_option("--data", o.data, "Corpus directory")->required();
  emb->add_option("--side", o.side, "image or text")->check(CLI::IsMember({"image", "text"}));
  emb->add_option("--split", o.split, "Image split")->check(CLI::IsMember({"train", "val", "test", "all"}));
  emb->add_option("--out", o.out, "Store file")->required();

  std::vector<std::pair<CLI::App*, const char*>> evals;
  for (const auto& [name, protocol] : {std::pair{"zeroshot", "zeroshot"}, std::pair{"retrieve", "retrieval"},
                                       std::pair{"fewshot", "fewshot"}, std::pair{"finetune", "finetune"}}) {
    auto* sub = app.add_subcommand(name, std::string("Run the ") + protocol + " protocol");
    sub->add_option("--config", o.config, "Run config file")->check(CLI::ExistingFile);
    sub->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
    sub->add_option("--data", o.data, "Corpus directory")->required();
    sub->add_option("--out", o.out, "Output directory")->required();
    sub->add_option("--classes", o.classes, "Class names, ';'-separated or repeated");
    sub->add_option("--K", o.ks, "Recall cut-offs, e.g. 1,5,10");
    sub->add_option("--shots", o.shots, "Examples per class, e.g. 1,2,4,8,16");
    sub->add_option("--seeds", o.seeds, "Seeds per shot count");
    sub->add_option("--seed", o.seed, "Base seed");
    evals.emplace_back(sub, protocol);
  }

  auto* rep = app.add_subcommand("report", "Tabulate metric lines and draw plots");
  rep->add_option("--in", o.in, "Directory with metric lines")->required();
  rep->add_option("--out", o.out, "Table file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : MCLAB_E_USAGE;
  }

  try {
    if (gen->parsed()) return generate_data(o);
    if (pre->parsed()) return pretrain(o);
    if (emb->parsed()) return embed(o);
    if (rep->parsed()) return report(o);
    for (const auto& [sub, protocol] : evals)
      if (sub->parsed()) return evaluate(protocol, o);
  } catch (const Failure& f) {
    std::cerr << "mclab: " << f.message << '\n';
    return f.code;
  } catch (const std::exception& e) {
    std::cerr << "mclab: " << e.what() << '\n';
    return MCLAB_E_RUNTIME;
  }
  return MCLAB_E_USAGE;
}
