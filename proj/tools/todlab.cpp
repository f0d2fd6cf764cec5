// todlab: synthetic-world data generation, two-stage training, evaluation,
// hyperparameter sweeps, and result reporting for session-level dialog models.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "todlab/corpus.hpp"
#include "todlab/engine.hpp"
#include "todlab/evaluation.hpp"
#include "todlab/inference.hpp"

namespace fs = std::filesystem;
using namespace todlab;

namespace {

void ensure_writable(const fs::path& p, bool force) {
  if (fs::exists(p) && !force)
    throw std::runtime_error(p.string() + " exists; pass --force to overwrite");
}

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw std::runtime_error(path + ": invalid JSON: " + e.what());
  }
  return j;
}

void write_json_file(const json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(1) << "\n";
}

// --------------------------------------------------------------------------
// gen-data
// --------------------------------------------------------------------------

struct GenDataConfig {
  SyntheticWorldConfig world;
  uint64_t seed = 1;
  double train_ratio = 0.9, valid_ratio = 0.05, test_ratio = 0.05;
};

GenDataConfig parse_gen_config(const json& j, const std::string& where) {
  require_keys(j, where, {"schema_version"}, {"world", "seed", "split"});
  if (get_int(j, "schema_version", where) != 1)
    throw SchemaError(where, "unsupported schema_version");
  GenDataConfig c;
  if (j.contains("world")) {
    const json& w = j.at("world");
    const std::string ww = where + "/world";
    require_keys(w, ww, {},
                 {"n_domains", "slots_per_domain", "entities_per_domain",
                  "values_per_slot", "n_sessions", "min_turns", "max_turns",
                  "grammar_seed"});
    if (w.contains("n_domains")) c.world.n_domains = get_int(w, "n_domains", ww);
    if (w.contains("slots_per_domain"))
      c.world.slots_per_domain = get_int(w, "slots_per_domain", ww);
    if (w.contains("entities_per_domain"))
      c.world.entities_per_domain = get_int(w, "entities_per_domain", ww);
    if (w.contains("values_per_slot"))
      c.world.values_per_slot = get_int(w, "values_per_slot", ww);
    if (w.contains("n_sessions")) c.world.n_sessions = get_int(w, "n_sessions", ww);
    if (w.contains("min_turns")) c.world.min_turns = get_int(w, "min_turns", ww);
    if (w.contains("max_turns")) c.world.max_turns = get_int(w, "max_turns", ww);
    if (w.contains("grammar_seed")) c.world.grammar_seed = w.at("grammar_seed").get<uint64_t>();
  }
  if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
  if (j.contains("split")) {
    const json& s = j.at("split");
    require_keys(s, where + "/split", {"train", "valid", "test"});
    c.train_ratio = get_number(s, "train", where + "/split");
    c.valid_ratio = get_number(s, "valid", where + "/split");
    c.test_ratio = get_number(s, "test", where + "/split");
    if (std::abs(c.train_ratio + c.valid_ratio + c.test_ratio - 1.0) > 1e-9)
      throw SchemaError(where + "/split", "ratios must sum to 1");
  }
  c.world.validate();
  return c;
}

int cmd_gen_data(const std::string& config_path, const std::string& out_dir, bool force) {
  GenDataConfig cfg = parse_gen_config(load_json_file(config_path), config_path);
  Corpus full = generate_synthetic_corpus(cfg.world, cfg.seed);

  const int n = static_cast<int>(full.sessions.size());
  const int n_valid = static_cast<int>(n * cfg.valid_ratio + 0.5);
  const int n_test = static_cast<int>(n * cfg.test_ratio + 0.5);
  const int n_train = n - n_valid - n_test;
  if (n_train < 1) throw std::runtime_error("split leaves no training sessions");

  fs::create_directories(out_dir);
  auto make_split = [&](int begin, int count) {
    Corpus c;
    c.ontology = full.ontology;
    c.database = full.database;
    c.sessions.assign(full.sessions.begin() + begin, full.sessions.begin() + begin + count);
    return c;
  };
  struct Out {
    const char* name;
    int begin, count;
  };
  const Out outs[3] = {{"train.json", 0, n_train},
                       {"valid.json", n_train, n_valid},
                       {"test.json", n_train + n_valid, n_test}};
  for (const Out& o : outs) ensure_writable(fs::path(out_dir) / o.name, force);
  for (const Out& o : outs) {
    save_corpus(make_split(o.begin, o.count), (fs::path(out_dir) / o.name).string());
    std::cout << o.name << ": " << o.count << " sessions\n";
  }
  return 0;
}

// --------------------------------------------------------------------------
// train
// --------------------------------------------------------------------------

struct LoadedData {
  Corpus train, valid, test;
  Vocab vocab;
};

LoadedData load_data_dir(const std::string& data_dir) {
  LoadedData d;
  d.train = load_corpus((fs::path(data_dir) / "train.json").string());
  d.valid = load_corpus((fs::path(data_dir) / "valid.json").string());
  const fs::path test_path = fs::path(data_dir) / "test.json";
  if (fs::exists(test_path)) d.test = load_corpus(test_path.string());
  d.vocab = build_vocab(d.train.ontology, d.train.database,
                        {&d.train.sessions, &d.valid.sessions, &d.test.sessions});
  return d;
}

void save_result_checkpoint(const TrainResult& r, const Vocab& vocab,
                            const fs::path& final_path, const fs::path& best_path) {
  Checkpoint ck;
  ck.config = r.model.config();
  ck.vocab = vocab;
  ck.params = r.model.params();
  ck.optimizer = r.optimizer;
  ck.global_step = r.global_step;
  ck.epoch = r.next_epoch;
  save_checkpoint(ck, final_path.string());
  Checkpoint best = ck;
  best.optimizer.reset();
  best.params = r.has_best ? r.best_params : r.model.params();
  save_checkpoint(best, best_path.string());
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir, const std::string& stage,
              const std::string& init_ckpt, const std::string& exclude_domain,
              int k_shot, bool force) {
  TrainConfig config = train_config_from_json(load_json_file(config_path), config_path);
  LoadedData data = load_data_dir(data_dir);

  std::vector<DialogSession> train_sessions = data.train.sessions;
  std::vector<DialogSession> fewshot;
  if (!exclude_domain.empty()) {
    if (!data.train.ontology.has_domain(exclude_domain))
      throw std::runtime_error("unknown domain '" + exclude_domain + "'");
    DomainSplits splits = split_by_domain(train_sessions, exclude_domain, k_shot, 0.0);
    train_sessions = splits.train;
    fewshot = splits.fewshot;
    std::cout << "excluding domain " << exclude_domain << ": " << train_sessions.size()
              << " train sessions, " << fewshot.size() << " few-shot sessions\n";
  } else if (k_shot > 0) {
    throw std::runtime_error("--k-shot requires --exclude-domain");
  }

  TrainData td;
  td.train = train_sessions;
  td.valid = data.valid.sessions;
  td.vocab = data.vocab;
  td.database = data.train.database;
  td.ontology = data.train.ontology;

  fs::create_directories(out_dir);
  const fs::path out(out_dir);
  auto out_files = [&](const std::string& tag) {
    return std::array<fs::path, 4>{out / (tag + "_final.ckpt"), out / (tag + "_best.ckpt"),
                                   out / ("train_" + tag + ".jsonl"),
                                   out / (tag + "_val_metrics.json")};
  };

  const bool run1 = stage == "1" || stage == "both";
  const bool run2 = stage == "2" || stage == "both";
  for (const std::string tag : {std::string("stage1"), std::string("stage2")}) {
    if ((tag == "stage1" && !run1) || (tag == "stage2" && !run2)) continue;
    for (const auto& f : out_files(tag)) ensure_writable(f, force);
  }

  std::optional<TrainResult> r1;
  if (run1) {
    r1 = train_stage1(td, config);
    auto files = out_files("stage1");
    save_result_checkpoint(*r1, data.vocab, files[0], files[1]);
    r1->log.write_jsonl(files[2].string());
    write_json_file(metrics_to_json(r1->has_best ? r1->best_metrics : Metrics{}),
                    files[3]);
    std::cout << "stage1 done: " << r1->log.steps.size() << " steps";
    if (r1->has_best) std::cout << ", best val combined " << r1->best_metrics.combined;
    std::cout << "\n";
  }

  if (run2) {
    TransformerLM model = [&]() {
      if (r1) return r1->model;  // continue from the stage-1 endpoint
      const std::string src = !init_ckpt.empty()
                                  ? init_ckpt
                                  : (out / "stage1_final.ckpt").string();
      if (!fs::exists(src))
        throw std::runtime_error("stage 2 needs a stage-1 checkpoint (--init or " + src +
                                 ")");
      Checkpoint ck = load_checkpoint(src);
      if (!(ck.vocab == data.vocab))
        throw std::runtime_error("checkpoint vocabulary does not match the corpus");
      return model_from_checkpoint(ck);
    }();
    std::optional<OptimizerState> resume;
    int start_epoch = 0;
    int64_t start_step = 0;
    if (r1) {
      resume = r1->optimizer;
      start_epoch = r1->next_epoch;
      start_step = r1->global_step;
    } else {
      const std::string src =
          !init_ckpt.empty() ? init_ckpt : (out / "stage1_final.ckpt").string();
      Checkpoint ck = load_checkpoint(src);
      resume = ck.optimizer;
      start_epoch = ck.epoch;
      start_step = ck.global_step;
    }
    TrainResult r2 = train_stage2(std::move(model), resume, start_epoch, start_step, td,
                                  config);
    auto files = out_files("stage2");
    save_result_checkpoint(r2, data.vocab, files[0], files[1]);
    r2.log.write_jsonl(files[2].string());
    write_json_file(metrics_to_json(r2.has_best ? r2.best_metrics : Metrics{}), files[3]);
    std::cout << "stage2 done: " << r2.log.steps.size() << " steps";
    if (r2.has_best) std::cout << ", best val combined " << r2.best_metrics.combined;
    std::cout << "\n";

    // few-shot fine-tune on the held-out domain examples
    if (!fewshot.empty()) {
      TrainData ftd = td;
      ftd.train = fewshot;
      TrainConfig fcfg = config;
      fcfg.stage1_epochs = config.stage2_epochs;
      ensure_writable(out / "fewshot_final.ckpt", force);
      TrainResult rf = run_training(r2.model, r2.optimizer, ftd, fcfg, Stage::stage1,
                                    fcfg.stage1_epochs, r2.next_epoch, r2.global_step);
      Checkpoint ck;
      ck.config = rf.model.config();
      ck.vocab = data.vocab;
      ck.params = rf.model.params();
      ck.global_step = rf.global_step;
      ck.epoch = rf.next_epoch;
      save_checkpoint(ck, (out / "fewshot_final.ckpt").string());
      std::cout << "few-shot fine-tune done on " << fewshot.size() << " sessions\n";
    }
  }
  return 0;
}

// --------------------------------------------------------------------------
// eval
// --------------------------------------------------------------------------

Metrics evaluate_sessions(const TransformerLM& model, const Vocab& vocab,
                          const Corpus& corpus,
                          const std::vector<DialogSession>& sessions,
                          const std::string& mode, int max_span_tokens,
                          std::vector<SessionVerdict>* verdicts) {
  std::vector<GeneratedSession> records;
  records.reserve(sessions.size());
  for (const DialogSession& s : sessions) {
    records.push_back(mode == "policy"
                          ? run_policy_opt(model, s, vocab, corpus.database,
                                           corpus.ontology, max_span_tokens)
                          : run_end_to_end(model, s, vocab, corpus.database,
                                           corpus.ontology, max_span_tokens));
  }
  return evaluate_corpus(records, sessions, vocab, corpus.database, corpus.ontology,
                         verdicts);
}

void write_verdicts(const std::vector<SessionVerdict>& verdicts, const fs::path& path) {
  std::ofstream out(path);
  for (const auto& v : verdicts) {
    out << json{{"session_id", v.session_id}, {"inform", v.inform}, {"success", v.success}}
               .dump()
        << "\n";
  }
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir,
             const std::string& mode, const std::string& exclude_domain, int k_shot,
             const std::string& out_dir, int max_span_tokens, bool force) {
  if (k_shot >= 0 && exclude_domain.empty())
    throw std::runtime_error("--k-shot requires --exclude-domain");
  Checkpoint ck = load_checkpoint(ckpt_path);
  TransformerLM model = model_from_checkpoint(ck);
  Corpus test = load_corpus((fs::path(data_dir) / "test.json").string());

  fs::create_directories(out_dir);
  const fs::path out(out_dir);

  if (exclude_domain.empty()) {
    ensure_writable(out / "metrics.json", force);
    ensure_writable(out / "verdicts.jsonl", force);
    std::vector<SessionVerdict> verdicts;
    Metrics m = evaluate_sessions(model, ck.vocab, test, test.sessions, mode,
                                  max_span_tokens, &verdicts);
    write_json_file(metrics_to_json(m), out / "metrics.json");
    write_verdicts(verdicts, out / "verdicts.jsonl");
    std::cout << metrics_to_json(m).dump() << "\n";
    return 0;
  }

  if (!test.ontology.has_domain(exclude_domain))
    throw std::runtime_error("unknown domain '" + exclude_domain + "'");
  DomainSplits splits = split_by_domain(test.sessions, exclude_domain, 0, 1.0);
  // eval_in holds every session not touching the domain, eval_new the rest
  struct Block {
    const char* tag;
    const std::vector<DialogSession>* sessions;
  };
  const Block blocks[2] = {{"in_domain", &splits.eval_in}, {"new_domain", &splits.eval_new}};
  for (const Block& b : blocks) {
    const fs::path mpath = out / (std::string("metrics_") + b.tag + ".json");
    const fs::path vpath = out / (std::string("verdicts_") + b.tag + ".jsonl");
    ensure_writable(mpath, force);
    ensure_writable(vpath, force);
    if (b.sessions->empty()) {
      std::cout << b.tag << ": no sessions\n";
      continue;
    }
    std::vector<SessionVerdict> verdicts;
    Metrics m = evaluate_sessions(model, ck.vocab, test, *b.sessions, mode,
                                  max_span_tokens, &verdicts);
    json jm = metrics_to_json(m);
    json wrapped{{"metrics", jm},
                 {"excluded_domain", exclude_domain},
                 {"k_shot", std::max(0, k_shot)},
                 {"block", b.tag}};
    write_json_file(wrapped, mpath);
    write_verdicts(verdicts, vpath);
    std::cout << b.tag << ": " << jm.dump() << "\n";
  }
  return 0;
}

// --------------------------------------------------------------------------
// sweep
// --------------------------------------------------------------------------

struct SweepSpec {
  std::string param;  // epsilon | alpha | mask_rate
  std::vector<double> values;
  std::vector<uint64_t> seeds;
  std::string base_config;
  std::string data_dir;
  std::string init_ckpt;
};

SweepSpec parse_sweep_spec(const json& j, const std::string& where) {
  require_keys(j, where, {"schema_version", "param", "values", "seeds", "base_config",
                          "data", "init"});
  if (get_int(j, "schema_version", where) != 1)
    throw SchemaError(where, "unsupported schema_version");
  SweepSpec s;
  s.param = get_string(j, "param", where);
  if (s.param != "epsilon" && s.param != "alpha" && s.param != "mask_rate")
    throw SchemaError(where + "/param", "expected epsilon|alpha|mask_rate");
  for (const auto& v : j.at("values")) s.values.push_back(v.get<double>());
  if (s.values.empty()) throw SchemaError(where + "/values", "must be non-empty");
  for (const auto& v : j.at("seeds")) s.seeds.push_back(v.get<uint64_t>());
  if (s.seeds.empty()) throw SchemaError(where + "/seeds", "must be non-empty");
  s.base_config = get_string(j, "base_config", where);
  s.data_dir = get_string(j, "data", where);
  s.init_ckpt = get_string(j, "init", where);
  return s;
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

int cmd_sweep(const std::string& spec_path, const std::string& out_dir, bool force) {
  SweepSpec spec = parse_sweep_spec(load_json_file(spec_path), spec_path);
  TrainConfig base = train_config_from_json(load_json_file(spec.base_config),
                                            spec.base_config);
  LoadedData data = load_data_dir(spec.data_dir);
  Checkpoint init = load_checkpoint(spec.init_ckpt);
  if (!(init.vocab == data.vocab))
    throw std::runtime_error("init checkpoint vocabulary does not match the corpus");

  fs::create_directories(out_dir);
  const fs::path out(out_dir);
  ensure_writable(out / "sweep.csv", force);
  ensure_writable(out / "sweep_median.csv", force);

  TrainData td;
  td.train = data.train.sessions;
  td.valid = data.valid.sessions;
  td.vocab = data.vocab;
  td.database = data.train.database;
  td.ontology = data.train.ontology;

  std::ofstream csv(out / "sweep.csv");
  csv << "param,value,seed,inform,success,bleu,combined\n";
  std::map<double, std::array<std::vector<double>, 4>> by_value;

  for (double value : spec.values) {
    for (uint64_t seed : spec.seeds) {
      TrainConfig cfg = base;
      cfg.seed = seed;
      cfg.sampler.seed = seed;
      cfg.mask.seed = seed;
      if (spec.param == "epsilon") cfg.sampler.epsilon = value;
      else if (spec.param == "alpha") cfg.alpha = value;
      else cfg.mask.rate = value;
      csv << spec.param << "," << value << "," << seed;
      try {
        TransformerLM model = model_from_checkpoint(init);
        TrainResult r = train_stage2(std::move(model), init.optimizer, init.epoch,
                                     init.global_step, td, cfg);
        TransformerLM chosen = r.best_model();
        Metrics m = evaluate_sessions(chosen, data.vocab, data.valid,
                                      data.valid.sessions, "e2e",
                                      cfg.sampler.max_span_tokens, nullptr);
        csv << "," << m.inform << "," << m.success << "," << m.bleu << "," << m.combined
            << "\n";
        auto& acc = by_value[value];
        acc[0].push_back(m.inform);
        acc[1].push_back(m.success);
        acc[2].push_back(m.bleu);
        acc[3].push_back(m.combined);
        std::ostringstream cell;
        cell << spec.param << "_" << value << "_s" << seed;
        fs::path cell_dir = out / cell.str();
        fs::create_directories(cell_dir);
        write_json_file(metrics_to_json(m), cell_dir / "metrics.json");
        r.log.write_jsonl((cell_dir / "train.jsonl").string());
      } catch (const std::exception& e) {
        csv << ",,,,\n";
        std::cerr << "sweep cell " << spec.param << "=" << value << " seed " << seed
                  << " failed: " << e.what() << "\n";
      }
      csv.flush();
    }
  }

  std::ofstream med(out / "sweep_median.csv");
  med << "param,value,inform,success,bleu,combined\n";
  for (const auto& [value, acc] : by_value) {
    if (acc[0].empty()) continue;
    med << spec.param << "," << value << "," << median_of(acc[0]) << ","
        << median_of(acc[1]) << "," << median_of(acc[2]) << "," << median_of(acc[3])
        << "\n";
  }
  std::cout << "sweep complete: " << spec.values.size() * spec.seeds.size() << " cells\n";
  return 0;
}

// --------------------------------------------------------------------------
// report
// --------------------------------------------------------------------------

int cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_file) {
  std::ostringstream md;
  md << "| run | inform | success | bleu | combined | delta |\n";
  md << "|---|---|---|---|---|---|\n";
  std::optional<double> baseline;
  for (const std::string& dir : run_dirs) {
    const fs::path mpath = fs::path(dir) / "metrics.json";
    if (!fs::exists(mpath)) {
      md << "| " << dir << " | - | - | - | - | absent |\n";
      continue;
    }
    Metrics m = metrics_from_json(load_json_file(mpath.string()), mpath.string());
    if (!baseline) baseline = m.combined;
    char buf[256];
    std::snprintf(buf, sizeof(buf), "| %s | %.1f | %.1f | %.1f | %.2f | %+.2f |\n",
                  dir.c_str(), m.inform, m.success, m.bleu, m.combined,
                  m.combined - *baseline);
    md << buf;
  }
  std::cout << md.str();
  if (!out_file.empty()) {
    std::ofstream out(out_file);
    out << md.str();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale task-oriented dialog modeling laboratory"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_dir, stage = "both", init_ckpt;
  std::string ckpt_path, mode = "e2e", exclude_domain, spec_path, report_out;
  std::vector<std::string> run_dirs;
  int k_shot = -1;
  int max_span_tokens = 48;
  bool force = false;

  auto* gen = app.add_subcommand("gen-data", "generate synthetic corpus splits");
  gen->add_option("--config", config_path, "synthetic world config JSON")->required();
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_flag("--force", force, "overwrite existing outputs");

  auto* train = app.add_subcommand("train", "run the two-stage training pipeline");
  train->add_option("--config", config_path, "train config JSON")->required();
  train->add_option("--data", data_dir, "directory with train/valid/test.json")->required();
  train->add_option("--out", out_dir, "output directory")->required();
  train->add_option("--stage", stage, "1, 2, or both")->check(CLI::IsMember({"1", "2", "both"}));
  train->add_option("--init", init_ckpt, "stage-1 checkpoint for --stage 2");
  train->add_option("--exclude-domain", exclude_domain, "hold one domain out of training");
  train->add_option("--k-shot", k_shot, "few-shot sessions from the excluded domain");
  train->add_flag("--force", force, "overwrite existing outputs");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  eval->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
  eval->add_option("--data", data_dir, "directory with test.json")->required();
  eval->add_option("--mode", mode, "e2e or policy")->check(CLI::IsMember({"e2e", "policy"}));
  eval->add_option("--exclude-domain", exclude_domain,
                   "report in-domain and new-domain blocks separately");
  eval->add_option("--k-shot", k_shot, "few-shot protocol label for the report");
  eval->add_option("--out", out_dir, "output directory")->required();
  eval->add_option("--max-span-tokens", max_span_tokens, "per-span generation cap");
  eval->add_flag("--force", force, "overwrite existing outputs");

  auto* sweep = app.add_subcommand("sweep", "stage-2 hyperparameter sweep");
  sweep->add_option("--spec", spec_path, "sweep spec JSON")->required();
  sweep->add_option("--out", out_dir, "output directory")->required();
  sweep->add_flag("--force", force, "overwrite existing outputs");

  auto* report = app.add_subcommand("report", "markdown comparison of run metrics");
  report->add_option("dirs", run_dirs, "run directories with metrics.json")->required();
  report->add_option("--out", report_out, "also write the table to a file");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(config_path, out_dir, force);
    if (train->parsed())
      return cmd_train(config_path, data_dir, out_dir, stage, init_ckpt, exclude_domain,
                       std::max(0, k_shot), force);
    if (eval->parsed())
      return cmd_eval(ckpt_path, data_dir, mode, exclude_domain, k_shot, out_dir,
                      max_span_tokens, force);
    if (sweep->parsed()) return cmd_sweep(spec_path, out_dir, force);
    if (report->parsed()) return cmd_report(run_dirs, report_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
