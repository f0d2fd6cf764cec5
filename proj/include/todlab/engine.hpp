#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "todlab/corpus.hpp"
#include "todlab/evaluation.hpp"
#include "todlab/inference.hpp"
#include "todlab/lm.hpp"
#include "todlab/mask.hpp"
#include "todlab/sampler.hpp"

namespace todlab {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct TrainConfig {
  int batch_size = 8;
  double lr = 1.5e-4;
  int stage1_epochs = 60;
  int stage2_epochs = 5;
  double alpha = 0.01;
  double grad_clip = 1.0;  // 0 disables clipping
  uint64_t seed = 1;
  int checkpoint_cadence = 1;  // epochs between periodic checkpoints, 0 = off
  int validation_cadence = 1;  // epochs between validation evals, 0 = off
  int patience = 0;            // non-improving validations before early stop, 0 = off
  int threads = 0;             // 0 = hardware concurrency
  SamplerConfig sampler;
  MaskConfig mask;
  AdamWConfig adamw;
  LMConfig lm;  // vocab_size is filled from the corpus at train time

  void validate() const {
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
    if (stage1_epochs < 1 || stage2_epochs < 1)
      throw std::invalid_argument("epoch counts must be positive");
    if (alpha < 0.0) throw std::invalid_argument("alpha must be >= 0");
    sampler.validate();
    mask.validate();
  }
};

// ---------------------------------------------------------------------------
// Config JSON (versioned, strict)
// ---------------------------------------------------------------------------

inline json train_config_to_json(const TrainConfig& c) {
  return json{
      {"schema_version", 1},
      {"batch_size", c.batch_size},
      {"lr", c.lr},
      {"stage1_epochs", c.stage1_epochs},
      {"stage2_epochs", c.stage2_epochs},
      {"alpha", c.alpha},
      {"grad_clip", c.grad_clip},
      {"seed", c.seed},
      {"checkpoint_cadence", c.checkpoint_cadence},
      {"validation_cadence", c.validation_cadence},
      {"patience", c.patience},
      {"threads", c.threads},
      {"sampler",
       {{"epsilon", c.sampler.epsilon},
        {"strategy", strategy_name(c.sampler.strategy)},
        {"prev_turns", c.sampler.context.prev_turns == ContextSource::Mixed ? "mixed" : "ground_truth"},
        {"current_turn", c.sampler.context.current_turn == ContextSource::Mixed ? "mixed" : "ground_truth"},
        {"seed", c.sampler.seed},
        {"at_most_one_unconditional", c.sampler.at_most_one_unconditional},
        {"max_span_tokens", c.sampler.max_span_tokens}}},
      {"mask",
       {{"target", c.mask.target == MaskTarget::GroundTruthBelief ? "ground_truth" : "generated"},
        {"positions", c.mask.positions == MaskPositions::Same ? "same" : "diff"},
        {"rate", c.mask.rate},
        {"seed", c.mask.seed}}},
      {"adamw",
       {{"beta1", c.adamw.beta1},
        {"beta2", c.adamw.beta2},
        {"eps", c.adamw.eps},
        {"weight_decay", c.adamw.weight_decay}}},
      {"model",
       {{"d_model", c.lm.d_model},
        {"n_layers", c.lm.n_layers},
        {"n_heads", c.lm.n_heads},
        {"dropout", c.lm.dropout},
        {"max_len", c.lm.max_len},
        {"init_seed", c.lm.init_seed}}}};
}

inline TrainConfig train_config_from_json(const json& j, const std::string& where) {
  require_keys(j, where, {"schema_version"},
               {"batch_size", "lr", "stage1_epochs", "stage2_epochs", "alpha",
                "grad_clip", "seed", "checkpoint_cadence", "validation_cadence",
                "patience", "threads", "sampler", "mask", "adamw", "model"});
  if (get_int(j, "schema_version", where) != 1)
    throw SchemaError(where, "unsupported schema_version");
  TrainConfig c;
  if (j.contains("batch_size")) c.batch_size = get_int(j, "batch_size", where);
  if (j.contains("lr")) c.lr = get_number(j, "lr", where);
  if (j.contains("stage1_epochs")) c.stage1_epochs = get_int(j, "stage1_epochs", where);
  if (j.contains("stage2_epochs")) c.stage2_epochs = get_int(j, "stage2_epochs", where);
  if (j.contains("alpha")) c.alpha = get_number(j, "alpha", where);
  if (j.contains("grad_clip")) c.grad_clip = get_number(j, "grad_clip", where);
  if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
  if (j.contains("checkpoint_cadence"))
    c.checkpoint_cadence = get_int(j, "checkpoint_cadence", where);
  if (j.contains("validation_cadence"))
    c.validation_cadence = get_int(j, "validation_cadence", where);
  if (j.contains("patience")) c.patience = get_int(j, "patience", where);
  if (j.contains("threads")) c.threads = get_int(j, "threads", where);
  if (j.contains("sampler")) {
    const json& s = j.at("sampler");
    const std::string sw = where + "/sampler";
    require_keys(s, sw, {},
                 {"epsilon", "strategy", "prev_turns", "current_turn", "seed",
                  "at_most_one_unconditional", "max_span_tokens"});
    if (s.contains("epsilon")) c.sampler.epsilon = get_number(s, "epsilon", sw);
    if (s.contains("strategy")) {
      auto v = strategy_from_name(get_string(s, "strategy", sw));
      if (!v) throw SchemaError(sw + "/strategy", "unknown strategy");
      c.sampler.strategy = *v;
    }
    auto parse_src = [&](const char* key, ContextSource* out) {
      if (!s.contains(key)) return;
      std::string v = get_string(s, key, sw);
      if (v == "mixed") *out = ContextSource::Mixed;
      else if (v == "ground_truth") *out = ContextSource::GroundTruth;
      else throw SchemaError(sw + "/" + key, "expected mixed|ground_truth");
    };
    parse_src("prev_turns", &c.sampler.context.prev_turns);
    parse_src("current_turn", &c.sampler.context.current_turn);
    if (s.contains("seed")) c.sampler.seed = s.at("seed").get<uint64_t>();
    if (s.contains("at_most_one_unconditional"))
      c.sampler.at_most_one_unconditional = get_bool(s, "at_most_one_unconditional", sw);
    if (s.contains("max_span_tokens"))
      c.sampler.max_span_tokens = get_int(s, "max_span_tokens", sw);
  }
  if (j.contains("mask")) {
    const json& m = j.at("mask");
    const std::string mw = where + "/mask";
    require_keys(m, mw, {}, {"target", "positions", "rate", "seed"});
    if (m.contains("target")) {
      std::string v = get_string(m, "target", mw);
      if (v == "ground_truth") c.mask.target = MaskTarget::GroundTruthBelief;
      else if (v == "generated") c.mask.target = MaskTarget::GeneratedBelief;
      else throw SchemaError(mw + "/target", "expected ground_truth|generated");
    }
    if (m.contains("positions")) {
      std::string v = get_string(m, "positions", mw);
      if (v == "same") c.mask.positions = MaskPositions::Same;
      else if (v == "diff") c.mask.positions = MaskPositions::Diff;
      else throw SchemaError(mw + "/positions", "expected same|diff");
    }
    if (m.contains("rate")) c.mask.rate = get_number(m, "rate", mw);
    if (m.contains("seed")) c.mask.seed = m.at("seed").get<uint64_t>();
  }
  if (j.contains("adamw")) {
    const json& a = j.at("adamw");
    const std::string aw = where + "/adamw";
    require_keys(a, aw, {}, {"beta1", "beta2", "eps", "weight_decay"});
    if (a.contains("beta1")) c.adamw.beta1 = get_number(a, "beta1", aw);
    if (a.contains("beta2")) c.adamw.beta2 = get_number(a, "beta2", aw);
    if (a.contains("eps")) c.adamw.eps = get_number(a, "eps", aw);
    if (a.contains("weight_decay")) c.adamw.weight_decay = get_number(a, "weight_decay", aw);
  }
  if (j.contains("model")) {
    const json& m = j.at("model");
    const std::string mw = where + "/model";
    require_keys(m, mw, {},
                 {"d_model", "n_layers", "n_heads", "dropout", "max_len", "init_seed"});
    if (m.contains("d_model")) c.lm.d_model = get_int(m, "d_model", mw);
    if (m.contains("n_layers")) c.lm.n_layers = get_int(m, "n_layers", mw);
    if (m.contains("n_heads")) c.lm.n_heads = get_int(m, "n_heads", mw);
    if (m.contains("dropout")) c.lm.dropout = get_number(m, "dropout", mw);
    if (m.contains("max_len")) c.lm.max_len = get_int(m, "max_len", mw);
    if (m.contains("init_seed")) c.lm.init_seed = m.at("init_seed").get<uint64_t>();
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Training log
// ---------------------------------------------------------------------------

struct StepRecord {
  int64_t step = 0;
  int epoch = 0;
  Stage stage = Stage::stage1;
  double nll = 0.0;
  double kl = 0.0;
  double alpha = 0.0;
  double total = 0.0;
};

struct ValidationRecord {
  int epoch = 0;
  Stage stage = Stage::stage1;
  Metrics metrics;
  bool is_best = false;
};

struct TrainLog {
  json header;  // config snapshot + seed record
  std::vector<StepRecord> steps;
  std::vector<ValidationRecord> validations;
  double wall_seconds = 0.0;

  // Line-delimited JSON: one header line, then {step, epoch, stage, nll, kl,
  // alpha, total} per training step.
  void write_jsonl(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write log " + path);
    out << header.dump() << "\n";
    for (const StepRecord& r : steps) {
      json j{{"step", r.step},   {"epoch", r.epoch}, {"stage", stage_name(r.stage)},
             {"nll", r.nll},     {"kl", r.kl},       {"alpha", r.alpha},
             {"total", r.total}};
      out << j.dump() << "\n";
    }
  }
};

class TrainingDivergence : public std::runtime_error {
 public:
  TrainingDivergence(int64_t step, double nll, double kl)
      : std::runtime_error("training diverged at step " + std::to_string(step) +
                           " (nll=" + std::to_string(nll) + ", kl=" + std::to_string(kl) +
                           ")") {}
};

// ---------------------------------------------------------------------------
// AdamW (decoupled weight decay; moments bias-corrected)
// ---------------------------------------------------------------------------

class AdamW {
 public:
  AdamW(size_t n, const AdamWConfig& cfg, std::vector<uint8_t> decay_mask)
      : cfg_(cfg), decay_(std::move(decay_mask)) {
    state_.m.assign(n, 0.0);
    state_.v.assign(n, 0.0);
  }

  static std::vector<uint8_t> decay_mask_for(const TransformerLM& model) {
    std::vector<uint8_t> mask(model.num_params(), 0);
    for (const auto& ti : model.registry()) {
      if (!ti.decay) continue;
      for (size_t k = 0; k < ti.size(); ++k) mask[ti.offset + k] = 1;
    }
    return mask;
  }

  const OptimizerState& state() const { return state_; }
  void restore(const OptimizerState& s) { state_ = s; }

  void step(std::vector<double>& params, const std::vector<double>& grads, double lr) {
    state_.t++;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state_.t));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state_.t));
    for (size_t i = 0; i < params.size(); ++i) {
      double g = grads[i];
      state_.m[i] = b1 * state_.m[i] + (1.0 - b1) * g;
      state_.v[i] = b2 * state_.v[i] + (1.0 - b2) * g * g;
      double mhat = state_.m[i] / bc1;
      double vhat = state_.v[i] / bc2;
      double update = mhat / (std::sqrt(vhat) + cfg_.eps);
      if (decay_[i]) update += cfg_.weight_decay * params[i];
      params[i] -= lr * update;
    }
  }

 private:
  AdamWConfig cfg_;
  std::vector<uint8_t> decay_;
  OptimizerState state_;
};

// ---------------------------------------------------------------------------
// Training data bundle
// ---------------------------------------------------------------------------

struct TrainData {
  std::vector<DialogSession> train;
  std::vector<DialogSession> valid;
  Vocab vocab;
  Database database;
  Ontology ontology;
};

inline TrainData make_train_data(const Corpus& train_corpus,
                                 const std::vector<DialogSession>& valid_sessions,
                                 const Vocab& vocab) {
  TrainData d;
  d.train = train_corpus.sessions;
  d.valid = valid_sessions;
  d.vocab = vocab;
  d.database = train_corpus.database;
  d.ontology = train_corpus.ontology;
  return d;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainHooks {
  std::function<void(int epoch, Stage, const TransformerLM&, const OptimizerState&)>
      on_checkpoint;
  std::function<void(const ValidationRecord&)> on_validation;
};

struct TrainResult {
  TransformerLM model;            // final weights (training endpoint)
  std::vector<double> best_params;  // best validation combined score snapshot
  Metrics best_metrics;
  bool has_best = false;
  OptimizerState optimizer;
  int64_t global_step = 0;
  int next_epoch = 0;
  TrainLog log;

  TransformerLM best_model() const {
    TransformerLM m = model;
    if (has_best) m.params() = best_params;
    return m;
  }
};

namespace detail {

// Whole-turn suffix of a sequence fitting the model window, turns renumbered
// from zero.
inline TaggedSequence window_whole_turns(const TaggedSequence& seq, const Vocab& vocab,
                                         int max_len) {
  if (seq.length() <= max_len) return seq;
  int n_turns = seq.num_turns();
  int first = n_turns;
  int total = 0;
  for (int turn = n_turns - 1; turn >= 0; --turn) {
    const TokenRange a = seq.span(turn, SpanRole::User);
    const TokenRange b = seq.span(turn, SpanRole::Response);
    int len = b.end - a.begin;
    if (total + len > max_len) break;
    total += len;
    first = turn;
  }
  if (first >= n_turns) first = n_turns - 1;  // single oversized turn: keep it
  TaggedSequence out;
  for (int turn = first; turn < n_turns; ++turn) {
    for (int r = 0; r < kNumRoles; ++r) {
      SpanRole role = static_cast<SpanRole>(r);
      out.append_span(turn - first, role, seq.span_body(turn, role), vocab,
                      seq.span_provenance(turn, role));
    }
  }
  return out;
}

struct ItemLoss {
  double nll = 0.0;
  double kl = 0.0;
};

}  // namespace detail

// Shared two-stage trainer. Stage 1 pairs the ground-truth sequence with
// itself (dropout consistency); stage 2 builds a sampled mixed sequence and a
// mask pair around it. Deterministic given (config, data, start counters).
inline TrainResult run_training(TransformerLM model, std::optional<OptimizerState> resume,
                                const TrainData& data, const TrainConfig& config,
                                Stage stage, int n_epochs, int start_epoch,
                                int64_t start_step, const TrainHooks& hooks = {}) {
  config.validate();
  if (data.train.empty()) throw std::invalid_argument("empty training corpus");
  const auto t_begin = std::chrono::steady_clock::now();

  AdamW opt(model.num_params(), config.adamw, AdamW::decay_mask_for(model));
  if (resume) opt.restore(*resume);

  TrainLog log;
  log.header = json{{"config", train_config_to_json(config)},
                    {"stage", stage_name(stage)},
                    {"start_epoch", start_epoch},
                    {"vocab_size", data.vocab.size()},
                    {"n_train_sessions", data.train.size()},
                    {"n_valid_sessions", data.valid.size()}};

  int n_threads = config.threads > 0
                      ? config.threads
                      : static_cast<int>(std::thread::hardware_concurrency());
  if (n_threads < 1) n_threads = 1;
  n_threads = std::min<int>(n_threads, config.batch_size);

  std::vector<std::vector<double>> thread_grads(
      n_threads, std::vector<double>(model.num_params(), 0.0));
  std::vector<double> grads(model.num_params(), 0.0);

  TrainResult result{std::move(model), {}, {}, false, {}, start_step, start_epoch, {}};
  int64_t global_step = start_step;
  double best_combined = -1.0;
  int stale_validations = 0;
  bool stop_early = false;

  for (int e = 0; e < n_epochs && !stop_early; ++e) {
    const int epoch = start_epoch + e;
    std::vector<size_t> order(data.train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng order_rng(derive_seed(config.seed, "order", static_cast<uint64_t>(epoch)));
    order_rng.shuffle(order);

    for (size_t batch_start = 0; batch_start < order.size();
         batch_start += config.batch_size) {
      const int nb = static_cast<int>(
          std::min<size_t>(config.batch_size, order.size() - batch_start));
      std::vector<detail::ItemLoss> items(nb);
      std::vector<std::exception_ptr> errors(n_threads);

      auto work = [&](int tid) {
        try {
          std::vector<double>& gbuf = thread_grads[tid];
          std::fill(gbuf.begin(), gbuf.end(), 0.0);
          for (int b = tid; b < nb; b += n_threads) {
            const DialogSession& session = data.train[order[batch_start + b]];
            TaggedSequence base;
            std::vector<int> tokens_a, tokens_b, targets;
            if (stage == Stage::stage1) {
              base = detail::window_whole_turns(flatten_session(session, data.vocab),
                                                data.vocab, result.model.config().max_len);
              tokens_a = base.tokens;
              tokens_b = base.tokens;
              targets = base.tokens;
            } else {
              Rng srng(derive_seed(config.sampler.seed, "sampler",
                                   hash_str(session.session_id),
                                   static_cast<uint64_t>(epoch)));
              MixedResult mixed =
                  build_mixed_sequence(result.model, session, data.vocab, data.database,
                                       data.ontology, config.sampler, srng);
              base = detail::window_whole_turns(mixed.seq, data.vocab,
                                                result.model.config().max_len);
              Rng mrng(derive_seed(config.mask.seed, "mask", hash_str(session.session_id),
                                   static_cast<uint64_t>(epoch)));
              auto [plan_a, plan_b] = draw_mask_pair(base, config.mask, mrng);
              tokens_a = apply_mask(base, plan_a, Vocab::kMask).seq.tokens;
              tokens_b = apply_mask(base, plan_b, Vocab::kMask).seq.tokens;
              targets = base.tokens;
            }
            const uint64_t seed_a = derive_seed(config.seed, "dropout",
                                                static_cast<uint64_t>(global_step),
                                                static_cast<uint64_t>(2 * b));
            const uint64_t seed_b = derive_seed(config.seed, "dropout",
                                                static_cast<uint64_t>(global_step),
                                                static_cast<uint64_t>(2 * b + 1));
            TransformerLM::ForwardCache cache_a, cache_b;
            Matrix logits_a = result.model.forward_train(tokens_a, seed_a, &cache_a);
            Matrix logits_b = result.model.forward_train(tokens_b, seed_b, &cache_b);
            std::vector<int> shifted(targets.begin() + 1, targets.end());
            PairLossResult pl = pair_loss(logits_a, logits_b, shifted, nullptr,
                                          config.alpha, 1.0 / nb, true);
            result.model.backward(cache_a, pl.dlogits1, gbuf);
            result.model.backward(cache_b, pl.dlogits2, gbuf);
            items[b] = {pl.nll, pl.kl};
          }
        } catch (...) {
          errors[tid] = std::current_exception();
        }
      };
      if (n_threads == 1) {
        work(0);
      } else {
        std::vector<std::thread> pool;
        for (int tid = 0; tid < n_threads; ++tid) pool.emplace_back(work, tid);
        for (auto& t : pool) t.join();
      }
      for (auto& err : errors)
        if (err) std::rethrow_exception(err);

      std::fill(grads.begin(), grads.end(), 0.0);
      for (int tid = 0; tid < n_threads; ++tid) {
        const auto& g = thread_grads[tid];
        for (size_t i = 0; i < grads.size(); ++i) grads[i] += g[i];
      }

      double nll = 0.0, kl = 0.0;
      for (const auto& it : items) {
        nll += it.nll;
        kl += it.kl;
      }
      nll /= nb;
      kl /= nb;
      LossBreakdown lb = LossBreakdown::make(nll, kl, config.alpha, stage);
      if (!std::isfinite(lb.total)) throw TrainingDivergence(global_step, nll, kl);

      if (config.grad_clip > 0.0) {
        double sq = 0.0;
        for (double g : grads) sq += g * g;
        double norm = std::sqrt(sq);
        if (norm > config.grad_clip) {
          double scale = config.grad_clip / norm;
          for (double& g : grads) g *= scale;
        }
      }
      opt.step(result.model.params(), grads, config.lr);
      log.steps.push_back({global_step, epoch, stage, lb.nll, lb.kl, lb.alpha, lb.total});
      global_step++;
    }

    // validation + model selection
    const bool validate_now = config.validation_cadence > 0 && !data.valid.empty() &&
                              ((e + 1) % config.validation_cadence == 0 || e + 1 == n_epochs);
    if (validate_now) {
      std::vector<GeneratedSession> records(data.valid.size());
      std::vector<std::exception_ptr> errors(n_threads);
      auto eval_work = [&](int tid) {
        try {
          for (size_t i = tid; i < data.valid.size(); i += n_threads)
            records[i] = run_end_to_end(result.model, data.valid[i], data.vocab,
                                        data.database, data.ontology,
                                        config.sampler.max_span_tokens);
        } catch (...) {
          errors[tid] = std::current_exception();
        }
      };
      if (n_threads == 1) {
        eval_work(0);
      } else {
        std::vector<std::thread> pool;
        for (int tid = 0; tid < n_threads; ++tid) pool.emplace_back(eval_work, tid);
        for (auto& t : pool) t.join();
      }
      for (auto& err : errors)
        if (err) std::rethrow_exception(err);
      Metrics m = evaluate_corpus(records, data.valid, data.vocab, data.database,
                                  data.ontology);
      ValidationRecord vr{epoch, stage, m, false};
      if (m.combined > best_combined) {
        best_combined = m.combined;
        result.best_params = result.model.params();
        result.best_metrics = m;
        result.has_best = true;
        vr.is_best = true;
        stale_validations = 0;
      } else {
        stale_validations++;
        if (config.patience > 0 && stale_validations >= config.patience)
          stop_early = true;
      }
      log.validations.push_back(vr);
      if (hooks.on_validation) hooks.on_validation(vr);
    }
    if (hooks.on_checkpoint && config.checkpoint_cadence > 0 &&
        (e + 1) % config.checkpoint_cadence == 0)
      hooks.on_checkpoint(epoch, stage, result.model, opt.state());
    result.next_epoch = epoch + 1;
  }

  result.optimizer = opt.state();
  result.global_step = global_step;
  log.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_begin).count();
  result.log = std::move(log);
  return result;
}

// Stage 1: ground-truth sequences with the dropout-consistency pair, KL active
// from the first step.
inline TrainResult train_stage1(const TrainData& data, const TrainConfig& config,
                                const TrainHooks& hooks = {}) {
  LMConfig lm_cfg = config.lm;
  lm_cfg.vocab_size = data.vocab.size();
  TransformerLM model(lm_cfg);
  return run_training(std::move(model), std::nullopt, data, config, Stage::stage1,
                      config.stage1_epochs, 0, 0, hooks);
}

// Stage 2: mixed training with session-level sampling and the mask pair,
// continuing from a stage-1 model (and optionally its optimizer state and
// counters, which keeps degenerate configs bit-identical to continued
// stage-1 training).
inline TrainResult train_stage2(TransformerLM model, std::optional<OptimizerState> resume,
                                int start_epoch, int64_t start_step,
                                const TrainData& data, const TrainConfig& config,
                                const TrainHooks& hooks = {}) {
  return run_training(std::move(model), std::move(resume), data, config, Stage::stage2,
                      config.stage2_epochs, start_epoch, start_step, hooks);
}

}  // namespace todlab
