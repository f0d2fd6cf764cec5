// Acceptance suite: runs every fast criterion end to end and prints one
// PASS/FAIL line each. Exit code 0 iff all pass. The training-trend
// criterion lives in acceptance_trend.cpp.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <vector>

#include "todlab/engine.hpp"
#include "todlab/evaluation.hpp"
#include "todlab/inference.hpp"
#include "todlab/mask.hpp"
#include "todlab/sampler.hpp"

using namespace todlab;

namespace {

struct Check {
  int id;
  std::string name;
  std::function<bool(std::string&)> fn;
};

// ---------------------------------------------------------------------------
// 1. combined-score formula over the published result tables
// ---------------------------------------------------------------------------

struct TableRow {
  const char* model;
  double inform, success, bleu, printed;
  bool printed_consistent;  // whether the printed Comb matches its own inputs
};

// End-to-end and policy-optimization tables, as printed. Two end-to-end rows
// are arithmetically inconsistent as printed (their Comb does not follow from
// their own Inform/Success/BLEU by the benchmark formula under any
// implementation); they are carried here flagged, and the check verifies the
// discrepancy instead of silently skipping them.
const TableRow kRows[] = {
    // end-to-end table
    {"DAMD", 57.9, 47.6, 16.4, 84.8, false},  // formula gives 69.15
    {"AuGPT", 76.6, 60.5, 16.8, 85.4, true},
    {"MinTL", 73.7, 65.4, 19.4, 89.0, true},
    {"SOLOIST", 82.3, 72.4, 13.6, 90.9, true},
    {"UBAR", 83.7, 70.3, 17.6, 94.4, false},  // formula gives 94.60
    {"PPTOD", 83.1, 72.7, 18.2, 96.1, true},
    {"BORT", 85.5, 77.4, 17.9, 99.4, true},
    {"MTTOD", 85.9, 76.5, 19.0, 100.2, true},
    {"GALAXY-e2e", 85.4, 75.7, 19.6, 100.2, true},
    {"UBARv1", 82.1, 69.7, 17.9, 93.8, true},
    {"UBARv1+SS", 83.9, 71.0, 17.6, 95.0, true},
    {"UBARv1+R-Drop", 86.8, 76.8, 18.5, 100.3, true},
    {"UBARv2", 87.5, 77.6, 19.0, 101.6, true},
    // policy-optimization table
    {"UniConv", 66.7, 58.7, 18.1, 80.8, true},
    {"SFN", 93.4, 82.3, 14.1, 101.9, true},
    {"HDSA", 87.9, 79.4, 20.7, 104.4, true},
    {"LAVA", 95.9, 93.5, 10.8, 105.5, true},
    {"HDNO", 93.3, 83.4, 17.8, 106.1, true},
    {"MarCo", 94.5, 87.2, 17.3, 108.1, true},
    {"GALAXY-policy", 92.8, 83.5, 19.9, 108.1, true},
    {"UBARv1-policy", 85.8, 78.3, 19.4, 101.5, true},
    {"UBARv2-policy", 86.4, 79.7, 19.8, 102.9, true},
};

bool check_combined_formula(std::string& detail) {
  int consistent = 0, inconsistent = 0;
  for (const TableRow& r : kRows) {
    double computed = combined_score(r.inform, r.success, r.bleu);
    double diff = std::abs(computed - r.printed);
    if (r.printed_consistent) {
      if (diff > 0.05 + 1e-9) {
        detail = std::string(r.model) + ": computed " + std::to_string(computed) +
                 " vs printed " + std::to_string(r.printed);
        return false;
      }
      consistent++;
    } else {
      // the flagged rows must really be off by more than rounding
      if (diff <= 0.05 + 1e-9) {
        detail = std::string(r.model) + " flagged inconsistent but matches";
        return false;
      }
      inconsistent++;
    }
  }
  std::ostringstream os;
  os << consistent << " self-consistent rows reproduced within 0.05; " << inconsistent
     << " rows are inconsistent as printed and verified so";
  detail = os.str();
  return consistent >= 20;
}

// ---------------------------------------------------------------------------
// 2. loss algebra against independent oracles
// ---------------------------------------------------------------------------

bool check_loss_algebra(std::string& detail) {
  Rng rng(1001);
  // NLL against a plain summation oracle
  for (int it = 0; it < 200; ++it) {
    int n = 1 + static_cast<int>(rng.below(16));
    int v = 2 + static_cast<int>(rng.below(24));
    LMDistribution d;
    d.probs.resize(n, v);
    for (int t = 0; t < n; ++t) {
      double sum = 0;
      for (int i = 0; i < v; ++i) {
        d.probs(t, i) = 0.01 + rng.uniform();
        sum += d.probs(t, i);
      }
      for (int i = 0; i < v; ++i) d.probs(t, i) /= sum;
    }
    std::vector<int> targets(n);
    for (int t = 0; t < n; ++t) targets[t] = static_cast<int>(rng.below(v));
    double oracle = 0;
    for (int t = 0; t < n; ++t)
      oracle -= std::log(std::max(d.probs(t, targets[t]), 1e-12));
    oracle /= n;
    if (std::abs(nll_loss(d, targets) - oracle) > 1e-9) {
      detail = "nll disagrees with the summation oracle";
      return false;
    }
  }

  // bidirectional KL: symmetric, non-negative, zero on identity, closed form
  for (int it = 0; it < 200; ++it) {
    LMDistribution a, b;
    a.probs.resize(1, 3);
    b.probs.resize(1, 3);
    double s1 = 0, s2 = 0;
    for (int i = 0; i < 3; ++i) {
      a.probs(0, i) = 0.05 + rng.uniform();
      b.probs(0, i) = 0.05 + rng.uniform();
      s1 += a.probs(0, i);
      s2 += b.probs(0, i);
    }
    a.probs /= s1;
    b.probs /= s2;
    double kl = bidirectional_kl(a, b);
    double closed = 0;
    for (int i = 0; i < 3; ++i) {
      closed += 0.5 * a.probs(0, i) * std::log(a.probs(0, i) / b.probs(0, i));
      closed += 0.5 * b.probs(0, i) * std::log(b.probs(0, i) / a.probs(0, i));
    }
    if (std::abs(kl - closed) > 1e-9 || kl != bidirectional_kl(b, a) || kl < 0.0 ||
        bidirectional_kl(a, a) != 0.0) {
      detail = "bidirectional KL violates its contract";
      return false;
    }
  }

  // composition, bit-exact in training logs
  SyntheticWorldConfig wc;
  wc.n_sessions = 8;
  Corpus c = generate_synthetic_corpus(wc, 5);
  TrainData data;
  data.train = c.sessions;
  data.vocab = build_vocab(c);
  data.database = c.database;
  data.ontology = c.ontology;
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.stage1_epochs = 3;
  cfg.validation_cadence = 0;
  cfg.threads = 1;
  cfg.lm.d_model = 16;
  cfg.lm.n_layers = 1;
  cfg.lm.n_heads = 2;
  cfg.lm.max_len = 256;
  TrainResult r = train_stage1(data, cfg);
  for (const StepRecord& s : r.log.steps) {
    if (s.total != s.nll + s.alpha * s.kl) {
      detail = "logged total does not recompose bit-exactly";
      return false;
    }
  }
  detail = "nll/KL oracles within 1e-9; " + std::to_string(r.log.steps.size()) +
           " logged steps recompose bit-exactly";
  return true;
}

// ---------------------------------------------------------------------------
// 3. gradient check on the micro model
// ---------------------------------------------------------------------------

bool check_gradients(std::string& detail) {
  LMConfig cfg;
  cfg.vocab_size = 16;
  cfg.d_model = 8;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.dropout = 0.1;
  cfg.max_len = 16;
  cfg.init_seed = 7;
  TransformerLM model(cfg);
  Rng rng(77);
  std::vector<int> tokens(8);
  for (auto& t : tokens) t = static_cast<int>(rng.below(16));
  std::vector<int> masked = tokens;
  masked[3] = Vocab::kMask;
  masked[5] = Vocab::kMask;

  struct Setup {
    const char* tag;
    std::vector<int> a, b;
  };
  const Setup setups[] = {{"stage1", tokens, tokens}, {"stage2", masked, tokens}};
  const double alpha = 0.01;
  double worst = 0.0;
  for (const Setup& s : setups) {
    TransformerLM::ForwardCache ca, cb;
    Matrix la = model.forward_train(s.a, 21, &ca);
    Matrix lb = model.forward_train(s.b, 22, &cb);
    std::vector<int> shifted(tokens.begin() + 1, tokens.end());
    PairLossResult pl = pair_loss(la, lb, shifted, nullptr, alpha, 1.0, true);
    std::vector<double> grad(model.num_params(), 0.0);
    model.backward(ca, pl.dlogits1, grad);
    model.backward(cb, pl.dlogits2, grad);

    for (size_t i = 0; i < model.num_params(); ++i) {
      const double h = 1e-5 * std::max(1.0, std::abs(model.params()[i]));
      double saved = model.params()[i];
      auto value = [&]() {
        return stage_loss(model, s.a, s.b, tokens, alpha, Stage::stage2, 21, 22).total;
      };
      model.params()[i] = saved + h;
      double up = value();
      model.params()[i] = saved - h;
      double dn = value();
      model.params()[i] = saved;
      double fd = (up - dn) / (2 * h);
      double rel =
          std::abs(fd - grad[i]) / std::max(1e-6, std::abs(fd) + std::abs(grad[i]));
      worst = std::max(worst, rel);
    }
  }
  std::ostringstream os;
  os << "max relative error " << worst << " over " << 2 * model.num_params()
     << " parameter probes";
  detail = os.str();
  return worst < 1e-3;
}

// ---------------------------------------------------------------------------
// 4. sampling statistics against the enumeration oracle
// ---------------------------------------------------------------------------

std::map<std::pair<bool, bool>, double> decision_tree(SamplingStrategy s, double eps) {
  std::map<std::pair<bool, bool>, double> p;
  auto add = [&](bool b, bool a, double pr) { p[{b, a}] += pr; };
  switch (s) {
    case SamplingStrategy::BeliefOnly:
      add(true, false, eps);
      add(false, false, 1 - eps);
      break;
    case SamplingStrategy::ActionOnly:
      add(false, true, eps);
      add(false, false, 1 - eps);
      break;
    case SamplingStrategy::AtMostOne:
      add(true, false, eps);
      add(false, true, (1 - eps) * eps);
      add(false, false, (1 - eps) * (1 - eps));
      break;
    case SamplingStrategy::ActionFollowsBelief:
      add(true, true, eps);
      add(false, false, 1 - eps);
      break;
    case SamplingStrategy::RandomIndependent:
      add(true, true, eps * eps);
      add(true, false, eps * (1 - eps));
      add(false, true, (1 - eps) * eps);
      add(false, false, (1 - eps) * (1 - eps));
      break;
  }
  return p;
}

bool check_sampling_statistics(std::string& detail) {
  const int kDraws = 100000;
  double worst = 0.0;
  for (double eps : {0.0, 0.25, 1.0}) {
    for (int s = 0; s < 5; ++s) {
      SamplerConfig cfg;
      cfg.epsilon = eps;
      cfg.strategy = static_cast<SamplingStrategy>(s);
      Rng rng(derive_seed(4242, "acc4", s, static_cast<uint64_t>(eps * 100)));
      std::map<std::pair<bool, bool>, double> freq;
      for (int i = 0; i < kDraws; ++i) {
        TurnDecision d = decide_turn(rng, cfg);
        freq[{d.replace_belief, d.replace_act_resp}] += 1.0 / kDraws;
      }
      for (const auto& [outcome, expect] : decision_tree(cfg.strategy, eps)) {
        double diff = std::abs(freq[outcome] - expect);
        worst = std::max(worst, diff);
        if (diff > 0.01) {
          detail = std::string("strategy ") + strategy_name(cfg.strategy) +
                   " drifts from the enumeration oracle";
          return false;
        }
      }
    }
  }

  // epsilon = 0 must reproduce the ground-truth bytes for every strategy
  SyntheticWorldConfig wc;
  wc.n_sessions = 30;
  Corpus c = generate_synthetic_corpus(wc, 19);
  Vocab vocab = build_vocab(c);
  LMConfig mc;
  mc.vocab_size = vocab.size();
  mc.d_model = 8;
  mc.n_layers = 1;
  mc.n_heads = 2;
  mc.dropout = 0.0;
  mc.max_len = 256;
  TransformerLM model(mc);
  for (const DialogSession& s : c.sessions) {
    TaggedSequence gt = flatten_session(s, vocab);
    for (int st = 0; st < 5; ++st) {
      SamplerConfig cfg;
      cfg.epsilon = 0.0;
      cfg.strategy = static_cast<SamplingStrategy>(st);
      Rng rng(derive_seed(7, "acc4b", hash_str(s.session_id), st));
      MixedResult r =
          build_mixed_sequence(model, s, vocab, c.database, c.ontology, cfg, rng);
      if (r.seq.tokens != gt.tokens) {
        detail = "epsilon 0 altered the sequence for " + s.session_id;
        return false;
      }
    }
  }
  std::ostringstream os;
  os << "worst frequency deviation " << worst << " over 15 strategy/rate pairs; "
     << "epsilon=0 byte-identical on " << c.sessions.size() << " sessions x 5 strategies";
  detail = os.str();
  return true;
}

// ---------------------------------------------------------------------------
// 5. mask-pair statistics and eligibility audit
// ---------------------------------------------------------------------------

bool check_mask_statistics(std::string& detail) {
  Vocab vocab;
  int filler = vocab.add("w");
  TaggedSequence seq;
  for (int t = 0; t < 2500; ++t) {
    seq.append_span(t, SpanRole::User, {}, vocab, Provenance::GroundTruth);
    seq.append_span(t, SpanRole::Belief, {filler, filler, filler, filler}, vocab,
                    Provenance::GroundTruth);
    seq.append_span(t, SpanRole::DbResult, {}, vocab, Provenance::GroundTruth);
    seq.append_span(t, SpanRole::Act, {filler}, vocab, Provenance::GroundTruth);
    seq.append_span(t, SpanRole::Response, {filler}, vocab, Provenance::GroundTruth);
  }
  auto eligible = mask_eligible_positions(seq, MaskTarget::GroundTruthBelief);
  if (eligible.size() != 10000) {
    detail = "expected 10000 eligible positions";
    return false;
  }

  MaskConfig cfg;
  cfg.rate = 0.5;
  cfg.positions = MaskPositions::Diff;
  Rng rng(99);
  auto [a, b] = draw_mask_pair(seq, cfg, rng);
  double pa = a.positions.size() / 10000.0;
  double pb = b.positions.size() / 10000.0;
  std::set<int> sa(a.positions.begin(), a.positions.end());
  int ov = 0;
  for (int p : b.positions) ov += sa.count(p);
  double po = ov / 10000.0;
  if (std::abs(pa - 0.5) > 0.02 || std::abs(pb - 0.5) > 0.02 ||
      std::abs(po - 0.25) > 0.02) {
    detail = "Diff-mode inclusion/overlap outside tolerance";
    return false;
  }

  cfg.positions = MaskPositions::Same;
  Rng rng2(100);
  auto [c1, c2] = draw_mask_pair(seq, cfg, rng2);
  if (c1.positions != c2.positions) {
    detail = "Same-mode plans differ";
    return false;
  }

  // exhaustive audit: no [MASK] outside target belief bodies
  std::set<int> allowed(eligible.begin(), eligible.end());
  MaskedSequence ma = apply_mask(seq, a, Vocab::kMask);
  for (int i = 0; i < ma.seq.length(); ++i) {
    if (ma.seq.tokens[i] == Vocab::kMask && !allowed.count(i)) {
      detail = "[MASK] escaped the target spans at position " + std::to_string(i);
      return false;
    }
  }
  std::ostringstream os;
  os << "inclusion " << pa << "/" << pb << ", overlap " << po
     << "; Same-mode set-equal; audit clean over " << ma.seq.length() << " tokens";
  detail = os.str();
  return true;
}

// ---------------------------------------------------------------------------
// 6. DB-span consistency over 1000 mixed sequences at epsilon 1
// ---------------------------------------------------------------------------

bool check_mixed_consistency(std::string& detail) {
  SyntheticWorldConfig wc;
  wc.n_sessions = 250;
  wc.max_turns = 4;
  Corpus c = generate_synthetic_corpus(wc, 33);
  Vocab vocab = build_vocab(c);
  SlotSchema schema = c.ontology.belief_slots();
  LMConfig mc;
  mc.vocab_size = vocab.size();
  mc.d_model = 16;
  mc.n_layers = 1;
  mc.n_heads = 2;
  mc.dropout = 0.0;
  mc.max_len = 320;
  TransformerLM model(mc);

  SamplerConfig cfg;
  cfg.epsilon = 1.0;
  cfg.strategy = SamplingStrategy::BeliefOnly;
  int sequences = 0, spans = 0;
  for (uint64_t rep = 0; rep < 4; ++rep) {
    for (const DialogSession& s : c.sessions) {
      Rng rng(derive_seed(rep, "acc6", hash_str(s.session_id)));
      MixedResult r =
          build_mixed_sequence(model, s, vocab, c.database, c.ontology, cfg, rng);
      for (int turn = 0; turn < r.seq.num_turns(); ++turn) {
        BeliefParse bp =
            parse_belief_span(r.seq.span_body(turn, SpanRole::Belief), vocab, schema);
        DbResult expect = db_query(bp.state, c.database, c.ontology);
        auto got = parse_db_span(r.seq.span_body(turn, SpanRole::DbResult), vocab);
        if (!got || !(*got == expect)) {
          detail = "DB span inconsistent in " + s.session_id + " turn " +
                   std::to_string(turn);
          return false;
        }
        spans++;
      }
      sequences++;
    }
  }
  std::ostringstream os;
  os << sequences << " mixed sequences, " << spans << " DB spans all equal to "
     << "db_query of their preceding belief";
  detail = os.str();
  return sequences >= 1000;
}

// ---------------------------------------------------------------------------
// 7. metric oracles: dual-implementation verdicts and hand-counted BLEU
// ---------------------------------------------------------------------------

bool acc_oracle_inform(const GeneratedSession& g, const Goal& goal, const Vocab& vocab,
                       const Database& db, const Ontology& ont) {
  for (const auto& [domain, gd] : goal.domains) {
    if (gd.constraints.empty()) continue;
    auto o = ont.domains.find(domain);
    if (o == ont.domains.end()) continue;
    if (!std::count(o->second.requestable.begin(), o->second.requestable.end(), "name"))
      continue;
    bool ok = false;
    for (const GeneratedTurn& t : g.turns) {
      if (t.belief.resolve_active_domain() != domain) continue;
      bool name = false;
      for (int id : t.response_tokens) name |= vocab.decode(id) == "[value_name]";
      if (!name) continue;
      auto ents = query_entities(t.belief, db, ont);
      if (ents.empty()) continue;
      bool all = true;
      for (const Entity* e : ents)
        for (const auto& [slot, v] : gd.constraints)
          all = all && e->count(slot) && e->at(slot) == v;
      ok = ok || all;
    }
    if (!ok) return false;
  }
  return true;
}

bool acc_oracle_success(const GeneratedSession& g, const Goal& goal, const Vocab& vocab,
                        const Database& db, const Ontology& ont) {
  if (!acc_oracle_inform(g, goal, vocab, db, ont)) return false;
  for (const auto& [domain, gd] : goal.domains)
    for (const auto& req : gd.requests) {
      bool found = false;
      for (const GeneratedTurn& t : g.turns) {
        if (t.belief.resolve_active_domain() != domain) continue;
        for (int id : t.response_tokens)
          found = found || vocab.decode(id) == "[value_" + req + "]";
      }
      if (!found) return false;
    }
  return true;
}

bool check_metric_oracles(std::string& detail) {
  SyntheticWorldConfig wc;
  wc.n_sessions = 200;
  wc.n_domains = 2;
  Corpus c = generate_synthetic_corpus(wc, 99);
  Vocab vocab = build_vocab(c);
  Rng rng(1234);
  int informs = 0;
  for (const DialogSession& s : c.sessions) {
    GeneratedSession g;
    g.session_id = s.session_id;
    for (const DialogTurn& t : s.turns) {
      GeneratedTurn r;
      r.belief = t.belief;
      r.db = t.db;
      r.response_tokens = encode_words(t.response, vocab, t.index, "response");
      g.turns.push_back(std::move(r));
    }
    // corruptions so both verdict values occur
    for (GeneratedTurn& t : g.turns) {
      if (rng.bernoulli(0.3) && !t.belief.constraints.empty()) {
        auto& slots = t.belief.constraints.begin()->second;
        if (!slots.empty()) slots.begin()->second = "no_such_value";
      }
      if (rng.bernoulli(0.25)) t.response_tokens.clear();
    }
    bool li = inform_for_session(g, s.goal, vocab, c.database, c.ontology);
    bool ls = success_for_session(g, s.goal, vocab, c.database, c.ontology);
    bool oi = acc_oracle_inform(g, s.goal, vocab, c.database, c.ontology);
    bool os_ = acc_oracle_success(g, s.goal, vocab, c.database, c.ontology);
    if (li != oi || ls != os_) {
      detail = "verdict disagreement on " + s.session_id;
      return false;
    }
    informs += li;
  }
  if (informs == 0 || informs == 200) {
    detail = "corruption fixture degenerate (informs=" + std::to_string(informs) + ")";
    return false;
  }

  // hand-counted BLEU oracle: p1=13/19, p2=7/14, p3=3/9, p4=1/5, BP=1
  std::vector<std::vector<int>> cand{
      {1, 2, 3, 4}, {1, 2, 3, 4, 5}, {7, 7, 7}, {1, 2}, {9, 9, 9, 9, 9}};
  std::vector<std::vector<int>> ref{
      {1, 2, 3, 4}, {1, 2, 3, 9, 5}, {7, 8}, {1, 2, 3, 4, 5, 6}, {9, 9}};
  double oracle = 100.0 * std::pow(13.0 / 570.0, 0.25);
  double got = corpus_bleu(cand, ref);
  if (std::abs(got - oracle) > 1e-6) {
    detail = "BLEU deviates from the hand-counted oracle";
    return false;
  }
  std::ostringstream os;
  os << "200/200 verdict agreement (" << informs << " informs); BLEU fixture within 1e-6";
  detail = os.str();
  return true;
}

// ---------------------------------------------------------------------------
// 9. degenerate stage 2 equals continued stage 1 (loss-stream checksum)
// ---------------------------------------------------------------------------

uint64_t stream_checksum(const std::vector<StepRecord>& steps, size_t from) {
  uint64_t h = 1469598103934665603ull;
  auto mix = [&](double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    for (int i = 0; i < 8; ++i) {
      h ^= (bits >> (8 * i)) & 0xff;
      h *= 1099511628211ull;
    }
  };
  for (size_t i = from; i < steps.size(); ++i) {
    mix(steps[i].nll);
    mix(steps[i].kl);
    mix(steps[i].total);
  }
  return h;
}

bool check_degenerate_equivalence(std::string& detail) {
  SyntheticWorldConfig wc;
  wc.n_sessions = 24;
  Corpus c = generate_synthetic_corpus(wc, 3);
  TrainData data;
  data.train = c.sessions;
  data.vocab = build_vocab(c);
  data.database = c.database;
  data.ontology = c.ontology;

  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.stage1_epochs = 2;
  cfg.stage2_epochs = 2;
  cfg.sampler.epsilon = 0.0;
  cfg.mask.rate = 0.0;
  cfg.validation_cadence = 0;
  cfg.threads = 2;
  cfg.lm.d_model = 16;
  cfg.lm.n_layers = 1;
  cfg.lm.n_heads = 2;
  cfg.lm.max_len = 256;

  TrainResult a1 = train_stage1(data, cfg);
  TrainResult a2 =
      train_stage2(a1.model, a1.optimizer, a1.next_epoch, a1.global_step, data, cfg);

  TrainConfig cfg_b = cfg;
  cfg_b.stage1_epochs = 4;
  TrainResult b = train_stage1(data, cfg_b);

  uint64_t ca = stream_checksum(a2.log.steps, 0);
  uint64_t cb = stream_checksum(b.log.steps, b.log.steps.size() / 2);
  if (ca != cb) {
    detail = "loss-stream checksums differ";
    return false;
  }
  if (a2.model.params() != b.model.params()) {
    detail = "final weights differ";
    return false;
  }
  std::ostringstream os;
  os << "checksum " << std::hex << ca << " identical over " << std::dec
     << a2.log.steps.size() << " degenerate stage-2 steps; final weights equal";
  detail = os.str();
  return true;
}

// ---------------------------------------------------------------------------
// 10. policy optimization insulates belief errors
// ---------------------------------------------------------------------------

bool check_policy_mode(std::string& detail) {
  // world: one domain, entities split across areas
  Corpus c;
  DomainSchema hotel;
  hotel.informable["area"] = {"north", "south"};
  hotel.requestable = {"name", "phone"};
  c.ontology.domains["hotel"] = hotel;
  c.database.tables["hotel"] = {
      {{"name", "rose inn"}, {"area", "north"}, {"phone", "111"}},
      {{"name", "lily lodge"}, {"area", "south"}, {"phone", "222"}},
  };

  // training session: the model memorizes a north-constrained dialog
  DialogSession train_s;
  train_s.session_id = "trainx";
  GoalDomain g;
  g.constraints = {{"area", "north"}};
  g.requests = {"phone"};
  train_s.goal.domains["hotel"] = g;
  DialogTurn t;
  t.index = 0;
  t.user = tokenize("i want a hotel and the phone please");
  t.belief.set("hotel", "area", "north");
  t.db = db_query(t.belief, c.database, c.ontology);
  t.act.triples = {{"hotel", ActType::Recommend, "name"},
                   {"hotel", ActType::Inform, "phone"}};
  t.response = tokenize("how about [value_name] the phone is [value_phone]");
  train_s.turns.push_back(t);
  c.sessions.push_back(train_s);

  // evaluation fixture: same user tokens, but the annotations want south; the
  // overfit model regenerates the memorized north belief, which is exactly
  // the deliberate corruption the criterion calls for
  DialogSession eval_s = train_s;
  eval_s.session_id = "evaly";
  eval_s.goal.domains["hotel"].constraints = {{"area", "south"}};
  eval_s.turns[0].belief = BeliefState{};
  eval_s.turns[0].belief.set("hotel", "area", "south");
  eval_s.turns[0].db = db_query(eval_s.turns[0].belief, c.database, c.ontology);

  Vocab vocab = build_vocab(c);
  TrainData data;
  data.train = {train_s};
  data.vocab = vocab;
  data.database = c.database;
  data.ontology = c.ontology;
  TrainConfig cfg;
  cfg.batch_size = 1;
  cfg.lr = 3e-3;
  cfg.stage1_epochs = 500;
  cfg.validation_cadence = 0;
  cfg.threads = 1;
  cfg.lm.d_model = 16;
  cfg.lm.n_layers = 1;
  cfg.lm.n_heads = 2;
  cfg.lm.dropout = 0.0;
  cfg.lm.max_len = 128;
  TrainResult r = train_stage1(data, cfg);

  GeneratedSession e2e = run_end_to_end(r.model, eval_s, vocab, c.database, c.ontology);
  GeneratedSession pol = run_policy_opt(r.model, eval_s, vocab, c.database, c.ontology);

  // non-vacuity: the end-to-end belief must really be corrupted
  if (e2e.turns[0].belief == eval_s.turns[0].belief) {
    detail = "fixture failed to corrupt the generated belief";
    return false;
  }
  bool inf_e2e = inform_for_session(e2e, eval_s.goal, vocab, c.database, c.ontology);
  bool inf_pol = inform_for_session(pol, eval_s.goal, vocab, c.database, c.ontology);
  if (inf_pol < inf_e2e) {
    detail = "policy-optimization inform fell below end-to-end";
    return false;
  }
  std::ostringstream os;
  os << "inform end-to-end=" << inf_e2e << ", policy=" << inf_pol
     << " (belief corruption verified)";
  detail = os.str();
  return true;
}

}  // namespace

int main() {
  std::vector<Check> checks = {
      {1, "combined-score formula over the published tables", check_combined_formula},
      {2, "loss algebra against independent oracles", check_loss_algebra},
      {3, "gradient correctness on the micro model", check_gradients},
      {4, "sampling statistics and epsilon-0 identity", check_sampling_statistics},
      {5, "mask-pair statistics and eligibility audit", check_mask_statistics},
      {6, "DB-span consistency over 1000 mixed sequences", check_mixed_consistency},
      {7, "metric oracles (dual verdicts, hand-counted BLEU)", check_metric_oracles},
      {9, "degenerate stage 2 equals continued stage 1", check_degenerate_equivalence},
      {10, "policy optimization insulates belief errors", check_policy_mode},
  };
  int failures = 0;
  for (const Check& c : checks) {
    std::string detail;
    bool ok = false;
    try {
      ok = c.fn(detail);
    } catch (const std::exception& e) {
      detail = std::string("exception: ") + e.what();
    }
    std::printf("%s  criterion %2d: %s — %s\n", ok ? "PASS" : "FAIL", c.id,
                c.name.c_str(), detail.c_str());
    std::fflush(stdout);
    if (!ok) failures++;
  }
  if (failures)
    std::printf("%d criterion(s) failed\n", failures);
  else
    std::printf("all %zu criteria passed (trend criterion runs separately)\n",
                checks.size());
  return failures ? 1 : 0;
}
