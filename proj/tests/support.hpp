// Copyright 2026 The mclab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mclab/corpus.hpp"
#include "mclab/model.hpp"

namespace mclab::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::string tmpl = (std::filesystem::temp_directory_path() / "mclab-test-XXXXXX").string();
    if (!mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  [[nodiscard]] const std::filesystem::path& path() const { return path_; }
  [[nodiscard]] std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline Eigen::MatrixXd random_matrix(int rows, int cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Eigen::MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = g(rng);
  return m;
}

inline Eigen::MatrixXd random_unit_rows(int rows, int cols, std::mt19937_64& rng) {
  Eigen::MatrixXd m = random_matrix(rows, cols, rng);
  for (int i = 0; i < rows; ++i) m.row(i).normalize();
  return m;
}

inline int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

/// Small corpus that generates and trains in well under a second.
inline corpus::GeneratorConfig tiny_corpus_config() {
  corpus::GeneratorConfig g;
  g.n_patients = 48;
  g.n_val = 8;
  g.n_test = 16;
  g.image_size = 16;
  g.text_fraction = 0.5;
  return g;
}

inline model::ModelConfig tiny_model_config() {
  model::ModelConfig c;
  c.image_size = 16;
  c.patch_size = 8;
  c.enc_dim = 16;
  c.enc_depth = 1;
  c.enc_heads = 2;
  c.dec_dim = 8;
  c.dec_depth = 1;
  c.dec_heads = 2;
  c.text_dim = 16;
  c.text_depth = 1;
  c.text_heads = 2;
  c.proj_dim = 8;
  return c;
}

/// Run config for the C API and CLI suites: tiny corpus, tiny model, short runs.
inline std::string tiny_run_config_json() {
  return R"({
  "corpus": {"n_patients": 96, "n_val": 12, "n_test": 40, "image_size": 16, "text_fraction": 0.5},
  "model": {"image_size": 16, "patch_size": 8, "enc_dim": 16, "enc_depth": 1, "enc_heads": 2, "dec_dim": 8,
            "dec_depth": 1, "dec_heads": 2, "text_dim": 16, "text_depth": 1, "text_heads": 2, "proj_dim": 8},
  "pretrain": {"total_epochs": 2, "warmup_epochs": 1, "batch_size": 16},
  "finetune": {"total_epochs": 4, "warmup_epochs": 1, "freeze_epochs": 1},
  "eval": {"shots": [1, 2], "n_seeds": 2}
})";
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(line);
  return out;
}

}  // namespace mclab::testing
