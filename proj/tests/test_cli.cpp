#include <catch2/catch_amalgamated.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "todlab/evaluation.hpp"
#include "todlab/jsonio.hpp"

using namespace todlab;
namespace fs = std::filesystem;

namespace {

const char* kCli = TODLAB_CLI_PATH;

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("todlab_cli_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

int run(const std::string& args) {
  std::string cmd = std::string(kCli) + " " + args + " >/dev/null 2>&1";
  int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void write_file(const fs::path& p, const std::string& content) {
  std::ofstream out(p);
  out << content;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* kGenCfg = R"({
  "schema_version": 1,
  "world": {"n_domains": 2, "slots_per_domain": 2, "entities_per_domain": 6,
            "values_per_slot": 3, "n_sessions": 40, "min_turns": 1, "max_turns": 3,
            "grammar_seed": 3},
  "seed": 11,
  "split": {"train": 0.9, "valid": 0.05, "test": 0.05}
})";

const char* kTrainCfg = R"({
  "schema_version": 1,
  "batch_size": 4, "lr": 3e-3, "stage1_epochs": 3, "stage2_epochs": 2,
  "alpha": 0.01, "seed": 1, "validation_cadence": 3, "threads": 2,
  "sampler": {"epsilon": 0.05, "max_span_tokens": 32},
  "mask": {"rate": 0.02},
  "model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "dropout": 0.1,
            "max_len": 200, "init_seed": 4}
})";

}  // namespace

TEST_CASE("gen-data writes three deterministic splits with exact ratios", "[cli]") {
  TempDir tmp;
  write_file(tmp.path / "gen.json", kGenCfg);
  REQUIRE(run("gen-data --config " + (tmp.path / "gen.json").string() + " --out " +
              (tmp.path / "d1").string()) == 0);
  for (const char* f : {"train.json", "valid.json", "test.json"})
    REQUIRE(fs::exists(tmp.path / "d1" / f));

  Corpus train = load_corpus((tmp.path / "d1" / "train.json").string());
  Corpus valid = load_corpus((tmp.path / "d1" / "valid.json").string());
  Corpus test = load_corpus((tmp.path / "d1" / "test.json").string());
  REQUIRE(train.sessions.size() == 36);  // 40 * 0.9
  REQUIRE(valid.sessions.size() == 2);
  REQUIRE(test.sessions.size() == 2);

  // same seed, second directory: byte-identical files
  REQUIRE(run("gen-data --config " + (tmp.path / "gen.json").string() + " --out " +
              (tmp.path / "d2").string()) == 0);
  for (const char* f : {"train.json", "valid.json", "test.json"})
    REQUIRE(slurp(tmp.path / "d1" / f) == slurp(tmp.path / "d2" / f));

  // refuses to overwrite without --force
  REQUIRE(run("gen-data --config " + (tmp.path / "gen.json").string() + " --out " +
              (tmp.path / "d1").string()) != 0);
  REQUIRE(run("gen-data --config " + (tmp.path / "gen.json").string() + " --out " +
              (tmp.path / "d1").string() + " --force") == 0);
}

TEST_CASE("train/eval/report pipeline runs end to end", "[cli][slow]") {
  TempDir tmp;
  write_file(tmp.path / "gen.json", kGenCfg);
  write_file(tmp.path / "train.json", kTrainCfg);
  const std::string data = (tmp.path / "data").string();
  const std::string run1 = (tmp.path / "run1").string();
  REQUIRE(run("gen-data --config " + (tmp.path / "gen.json").string() + " --out " +
              data) == 0);

  REQUIRE(run("train --config " + (tmp.path / "train.json").string() + " --data " +
              data + " --out " + run1 + " --stage both") == 0);
  for (const char* f : {"stage1_final.ckpt", "stage1_best.ckpt", "train_stage1.jsonl",
                        "stage2_final.ckpt", "stage2_best.ckpt", "train_stage2.jsonl"})
    REQUIRE(fs::exists(fs::path(run1) / f));

  // the training log header echoes the config snapshot
  {
    std::ifstream log(fs::path(run1) / "train_stage1.jsonl");
    std::string first;
    std::getline(log, first);
    json header = json::parse(first);
    REQUIRE(header["config"]["lr"] == 3e-3);
    REQUIRE(header["config"]["sampler"]["epsilon"] == 0.05);
    // step records carry exactly the log schema
    std::string line;
    std::getline(log, line);
    json rec = json::parse(line);
    for (const char* key : {"step", "epoch", "stage", "nll", "kl", "alpha", "total"})
      REQUIRE(rec.contains(key));
    REQUIRE(rec.size() == 7);
  }

  // stage 2 alone requires a checkpoint
  REQUIRE(run("train --config " + (tmp.path / "train.json").string() + " --data " +
              data + " --out " + (tmp.path / "run_missing").string() + " --stage 2") !=
          0);

  const std::string evaldir = (tmp.path / "eval1").string();
  REQUIRE(run("eval --ckpt " + run1 + "/stage2_best.ckpt --data " + data +
              " --mode e2e --out " + evaldir) == 0);
  REQUIRE(fs::exists(fs::path(evaldir) / "metrics.json"));
  REQUIRE(fs::exists(fs::path(evaldir) / "verdicts.jsonl"));
  json m = json::parse(slurp(fs::path(evaldir) / "metrics.json"));
  Metrics parsed = metrics_from_json(m, "metrics.json");  // schema-validating
  REQUIRE(parsed.n_sessions == 2);

  const std::string evaldir2 = (tmp.path / "eval2").string();
  REQUIRE(run("eval --ckpt " + run1 + "/stage2_best.ckpt --data " + data +
              " --mode policy --out " + evaldir2) == 0);

  // report over both runs
  REQUIRE(run("report " + evaldir + " " + evaldir2 + " --out " +
              (tmp.path / "report.md").string()) == 0);
  std::string table = slurp(tmp.path / "report.md");
  REQUIRE(table.find("| run |") != std::string::npos);
  REQUIRE(table.find(evaldir) != std::string::npos);

  // k-shot without exclude-domain is rejected
  REQUIRE(run("eval --ckpt " + run1 + "/stage2_best.ckpt --data " + data +
              " --mode e2e --k-shot 3 --out " + (tmp.path / "eval3").string()) != 0);

  // domain-filtered evaluation emits two blocks
  const std::string evaldir4 = (tmp.path / "eval4").string();
  Corpus test = load_corpus((fs::path(data) / "test.json").string());
  std::string domain = test.ontology.domains.begin()->first;
  REQUIRE(run("eval --ckpt " + run1 + "/stage2_best.ckpt --data " + data +
              " --mode e2e --exclude-domain " + domain + " --k-shot 0 --out " +
              evaldir4) == 0);
  bool any_block = fs::exists(fs::path(evaldir4) / "metrics_in_domain.json") ||
                   fs::exists(fs::path(evaldir4) / "metrics_new_domain.json");
  REQUIRE(any_block);
}

TEST_CASE("sweep emits one CSV row per cell plus a median table", "[cli][slow]") {
  TempDir tmp;
  write_file(tmp.path / "gen.json", kGenCfg);
  write_file(tmp.path / "train.json", kTrainCfg);
  const std::string data = (tmp.path / "data").string();
  const std::string base = (tmp.path / "base").string();
  REQUIRE(run("gen-data --config " + (tmp.path / "gen.json").string() + " --out " +
              data) == 0);
  REQUIRE(run("train --config " + (tmp.path / "train.json").string() + " --data " +
              data + " --out " + base + " --stage 1") == 0);

  json spec{{"schema_version", 1},
            {"param", "epsilon"},
            {"values", {0.0, 0.05}},
            {"seeds", {1}},
            {"base_config", (tmp.path / "train.json").string()},
            {"data", data},
            {"init", base + "/stage1_final.ckpt"}};
  write_file(tmp.path / "sweep.json", spec.dump());
  const std::string sweepdir = (tmp.path / "sweep").string();
  REQUIRE(run("sweep --spec " + (tmp.path / "sweep.json").string() + " --out " +
              sweepdir) == 0);

  std::string csv = slurp(fs::path(sweepdir) / "sweep.csv");
  int rows = 0;
  for (char ch : csv)
    if (ch == '\n') rows++;
  REQUIRE(rows == 3);  // header + (2 values x 1 seed)
  REQUIRE(csv.find("param,value,seed,inform,success,bleu,combined") == 0);
  REQUIRE(fs::exists(fs::path(sweepdir) / "sweep_median.csv"));
}
