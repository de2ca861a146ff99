// Copyright 2026 The mclab Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mclab/corpus.hpp"
#include "mclab/evaluation.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using mclab::testing::read_file;
using mclab::testing::read_lines;
using mclab::testing::TempDir;

namespace {

struct Result {
  int code = -1;
  std::string err;
};

std::string quote(const std::string& s) { return "'" + s + "'"; }

Result cli(const std::vector<std::string>& args, const fs::path& scratch) {
  std::string cmd = quote(MCLAB_CLI_PATH);
  for (const auto& a : args) cmd += " " + quote(a);
  const fs::path err = scratch / "stderr.txt";
  cmd += " > /dev/null 2> " + quote(err.string());
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = read_file(err);
  return r;
}

// Every regular file below `root`, relative path to contents.
std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = read_file(e.path());
  return out;
}

std::vector<mclab::evaluation::MetricReport> reports_in(const fs::path& file) {
  return mclab::evaluation::read_reports(file);
}

// Tiny corpus and one pretrained run, built once through the CLI.
struct Pipeline {
  TempDir dir;
  fs::path config, data, run;

  Pipeline() : config(dir / "config.json"), data(dir / "data"), run(dir / "run") {
    std::ofstream(config) << mclab::testing::tiny_run_config_json();
    REQUIRE(cli({"generate-data", "--config", config.string(), "--out", data.string(), "--seed", "7"}, dir.path()).code == 0);
    const auto r = cli({"pretrain", "--config", config.string(), "--data", data.string(), "--out", run.string()}, dir.path());
    INFO(r.err);
    REQUIRE(r.code == 0);
  }
  [[nodiscard]] fs::path checkpoint() const { return run / "checkpoints" / "best.ckpt"; }
};

Pipeline& pipeline() {
  static Pipeline p;
  return p;
}

}  // namespace

TEST_CASE("usage errors exit with code 2") {
  TempDir dir;
  CHECK(cli({}, dir.path()).code == 2);
  CHECK(cli({"train-everything"}, dir.path()).code == 2);
  CHECK(cli({"pretrain", "--data", "x"}, dir.path()).code == 2);
  CHECK(cli({"--help"}, dir.path()).code == 0);
  const auto& p = pipeline();
  CHECK(cli({"retrieve", "--checkpoint", p.checkpoint().string(), "--data", p.data.string(), "--out",
             (dir / "o").string(), "--K", "1,five"},
            dir.path())
            .code == 2);
}

TEST_CASE("generate-data with the default config writes a valid corpus") {
  TempDir dir;
  const auto r = cli({"generate-data", "--out", (dir / "c").string()}, dir.path());
  INFO(r.err);
  REQUIRE(r.code == 0);
  CHECK(fs::is_regular_file(dir / "c" / "manifest.jsonl"));
  CHECK(fs::is_regular_file(dir / "c" / "config.resolved"));
  const auto corpus = mclab::corpus::load_corpus(dir / "c");
  CHECK_NOTHROW(corpus.validate());
  CHECK(corpus.records.size() == 2200);
  CHECK(corpus.image_count() == 4400);
}

TEST_CASE("generate-data with the same seed writes identical trees") {
  TempDir dir;
  const auto& p = pipeline();
  REQUIRE(cli({"generate-data", "--config", p.config.string(), "--out", (dir / "b").string(), "--seed", "7"}, dir.path())
              .code == 0);
  CHECK(tree(dir / "b") == tree(p.data));
  REQUIRE(cli({"generate-data", "--config", p.config.string(), "--out", (dir / "c").string(), "--seed", "8"}, dir.path())
              .code == 0);
  CHECK(tree(dir / "c") != tree(p.data));
}

TEST_CASE("generate-data refuses a non-empty directory and invalid configs") {
  TempDir dir;
  const auto& p = pipeline();
  const auto r = cli({"generate-data", "--config", p.config.string(), "--out", p.data.string()}, dir.path());
  CHECK(r.code == 3);
  CHECK(r.err.find("not empty") != std::string::npos);

  std::ofstream(dir / "one.json") << R"({"corpus": {"modality_set": ["CFP"]}})";
  const auto bad = cli({"generate-data", "--config", (dir / "one.json").string(), "--out", (dir / "x").string()}, dir.path());
  CHECK(bad.code == 3);
  CHECK(bad.err.find("modalit") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "x"));

  std::ofstream(dir / "unknown.json") << R"({"pretrain": {"epochz": 3}})";
  CHECK(cli({"generate-data", "--config", (dir / "unknown.json").string(), "--out", (dir / "y").string()}, dir.path()).code ==
        3);
}

TEST_CASE("pretrain writes checkpoint, step log and resolved config") {
  const auto& p = pipeline();
  CHECK(fs::is_regular_file(p.checkpoint()));
  CHECK(fs::is_regular_file(p.run / "logs" / "train.jsonl"));
  CHECK(fs::is_regular_file(p.run / "logs" / "val.jsonl"));
  CHECK(fs::is_regular_file(p.run / "config.resolved"));
  CHECK(fs::is_directory(p.run / "reports"));
  CHECK_FALSE(fs::exists(p.run / "FAILED"));
}

TEST_CASE("the resolved config replays the run exactly") {
  TempDir dir;
  const auto& p = pipeline();
  const auto r = cli({"pretrain", "--config", (p.run / "config.resolved").string(), "--data", p.data.string(), "--out",
                      (dir / "replay").string()},
                     dir.path());
  REQUIRE(r.code == 0);
  const auto a = read_lines(p.run / "logs" / "train.jsonl");
  const auto b = read_lines(dir / "replay" / "logs" / "train.jsonl");
  REQUIRE(!a.empty());
  CHECK(a.front() == b.front());
  CHECK(a == b);
  CHECK(read_file(p.checkpoint()) == read_file(dir / "replay" / "checkpoints" / "best.ckpt"));
}

TEST_CASE("pretrain on a missing data directory leaves no output") {
  TempDir dir;
  const auto r = cli({"pretrain", "--data", (dir / "nope").string(), "--out", (dir / "run").string()}, dir.path());
  CHECK(r.code == 3);
  CHECK(r.err.find("nope") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "run"));
}

TEST_CASE("embed writes a valid store with one row per item") {
  TempDir dir;
  const auto& p = pipeline();
  REQUIRE(cli({"embed", "--checkpoint", p.checkpoint().string(), "--data", p.data.string(), "--side", "image", "--out",
               (dir / "img.store").string()},
              dir.path())
              .code == 0);
  const auto store = mclab::evaluation::load_embedding_store(dir / "img.store");
  CHECK_NOTHROW(store.validate());
  CHECK(store.size() == mclab::corpus::load_corpus(p.data).image_count());
  for (Eigen::Index i = 0; i < store.matrix.rows(); ++i) CHECK(std::abs(store.matrix.row(i).norm() - 1.0f) <= 1e-6f);

  REQUIRE(cli({"embed", "--checkpoint", p.checkpoint().string(), "--data", p.data.string(), "--side", "text", "--out",
               (dir / "txt.store").string()},
              dir.path())
              .code == 0);
  CHECK(mclab::evaluation::load_embedding_store(dir / "txt.store").size() == 8);
  CHECK(cli({"embed", "--checkpoint", p.checkpoint().string(), "--data", p.data.string(), "--side", "audio", "--out",
             (dir / "x.store").string()},
            dir.path())
            .code == 2);
}

TEST_CASE("zeroshot and finetune emit one line per metric") {
  TempDir dir;
  const auto& p = pipeline();
  for (const std::string cmd : {"zeroshot", "finetune"}) {
    CAPTURE(cmd);
    const auto r = cli({cmd, "--config", p.config.string(), "--checkpoint", p.checkpoint().string(), "--data",
                        p.data.string(), "--out", (dir / cmd).string()},
                       dir.path());
    INFO(r.err);
    REQUIRE(r.code == 0);
    const auto reports = reports_in(dir / cmd / "reports" / (cmd + ".jsonl"));
    REQUIRE(reports.size() == 2);
    CHECK(reports[0].metric == "macro_auroc");
    CHECK(reports[1].metric == "macro_aupr");
    CHECK(fs::is_regular_file(dir / cmd / "config.resolved"));
  }
}

TEST_CASE("zeroshot restricted to named classes") {
  TempDir dir;
  const auto& p = pipeline();
  const auto corpus = mclab::corpus::load_corpus(p.data);
  const std::string classes = corpus.class_names[0] + ";" + corpus.class_names[2];
  REQUIRE(cli({"zeroshot", "--config", p.config.string(), "--checkpoint", p.checkpoint().string(), "--data",
               p.data.string(), "--out", (dir / "z").string(), "--classes", classes},
              dir.path())
              .code == 0);
  const auto j = json::parse(read_file(dir / "z" / "config.resolved"));
  CHECK(j["eval"]["classes"].size() == 2);
  CHECK(cli({"zeroshot", "--config", p.config.string(), "--checkpoint", p.checkpoint().string(), "--data",
             p.data.string(), "--out", (dir / "bad").string(), "--classes", "no such class;other"},
            dir.path())
            .code == 3);
}

TEST_CASE("fewshot with the default shots emits 25 run records") {
  TempDir dir;
  const auto& p = pipeline();
  const auto r = cli({"fewshot", "--config", p.config.string(), "--checkpoint", p.checkpoint().string(), "--data",
                      p.data.string(), "--out", (dir / "f").string(), "--shots", "1,2,4,8,16", "--seeds", "5"},
                     dir.path());
  INFO(r.err);
  REQUIRE(r.code == 0);
  const auto reports = reports_in(dir / "f" / "reports" / "fewshot.jsonl");
  int runs = 0, aggregates = 0;
  for (const auto& m : reports) (m.seed ? runs : aggregates)++;
  CHECK(runs == 25);
  CHECK(aggregates == 5);
}

TEST_CASE("retrieve emits task triples whose mean recall is the mean over K") {
  TempDir dir;
  const auto& p = pipeline();
  REQUIRE(cli({"retrieve", "--config", p.config.string(), "--checkpoint", p.checkpoint().string(), "--data",
               p.data.string(), "--out", (dir / "r").string(), "--K", "1,5,10"},
              dir.path())
              .code == 0);
  std::map<std::string, double> v;
  for (const auto& m : reports_in(dir / "r" / "reports" / "retrieval.jsonl")) v[m.metric] = m.value;
  for (const std::string task : {"t2i", "i2i", "i2t"}) {
    CAPTURE(task);
    REQUIRE(v.count(task + "_R@1"));
    REQUIRE(v.count(task + "_mean_recall"));
    const double mean = (v[task + "_R@1"] + v[task + "_R@5"] + v[task + "_R@10"]) / 3.0;
    CHECK(v[task + "_mean_recall"] == doctest::Approx(mean).epsilon(1e-12));
  }
}

TEST_CASE("a failing evaluation leaves a FAILED marker") {
  TempDir dir;
  const auto& p = pipeline();
  std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
  const auto r = cli({"zeroshot", "--config", p.config.string(), "--checkpoint", (dir / "junk.ckpt").string(), "--data",
                      p.data.string(), "--out", (dir / "z").string()},
                     dir.path());
  CHECK(r.code == 3);
  CHECK(r.err.find('\n') == r.err.size() - 1);
  CHECK(fs::is_regular_file(dir / "z" / "FAILED"));
}

TEST_CASE("report tabulates every metric line and draws plots") {
  TempDir dir;
  const auto& p = pipeline();
  REQUIRE(cli({"zeroshot", "--config", p.config.string(), "--checkpoint", p.checkpoint().string(), "--data",
               p.data.string(), "--out", (dir / "e").string()},
              dir.path())
              .code == 0);
  fs::copy(p.run / "logs", dir / "e" / "logs", fs::copy_options::recursive);
  REQUIRE(cli({"report", "--in", (dir / "e").string(), "--out", (dir / "report.txt").string()}, dir.path()).code == 0);
  const auto table = read_lines(dir / "report.txt");
  CHECK(table.size() == 2 + 2);
  CHECK(fs::file_size(dir / "report_metrics.svg") > 0);
  CHECK(fs::file_size(dir / "report_loss.svg") > 0);

  fs::create_directories(dir / "empty");
  CHECK(cli({"report", "--in", (dir / "empty").string(), "--out", (dir / "r2.txt").string()}, dir.path()).code == 3);
}
