#include <catch2/catch_amalgamated.hpp>
#include <map>

#include "test_world.hpp"
#include "todlab/sampler.hpp"

using namespace todlab;
using testworld::fixture_corpus;
using testworld::fixture_session;

namespace {

TransformerLM sampler_model(const Vocab& vocab, uint64_t seed = 3) {
  LMConfig cfg;
  cfg.vocab_size = vocab.size();
  cfg.d_model = 8;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.dropout = 0.0;
  cfg.max_len = 256;
  cfg.init_seed = seed;
  return TransformerLM(cfg);
}

// Enumeration of the per-strategy decision tree: outcome -> probability.
// Written from the strategy definitions, independent of decide_turn.
std::map<std::pair<bool, bool>, double> decision_oracle(SamplingStrategy s, double eps,
                                                        bool amo_unconditional) {
  std::map<std::pair<bool, bool>, double> p;
  auto add = [&](bool b, bool a, double prob) { p[{b, a}] += prob; };
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
      if (amo_unconditional) {
        add(false, true, 1 - eps);
      } else {
        add(false, true, (1 - eps) * eps);
        add(false, false, (1 - eps) * (1 - eps));
      }
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

}  // namespace

TEST_CASE("decide_turn: epsilon 0 never replaces anything", "[sampler]") {
  Rng rng(1);
  for (int s = 0; s < 5; ++s) {
    SamplerConfig cfg;
    cfg.epsilon = 0.0;
    cfg.strategy = static_cast<SamplingStrategy>(s);
    for (int it = 0; it < 1000; ++it) {
      TurnDecision d = decide_turn(rng, cfg);
      REQUIRE_FALSE(d.replace_belief);
      REQUIRE_FALSE(d.replace_act_resp);
    }
  }
}

TEST_CASE("decide_turn: epsilon 1 with ActionFollowsBelief replaces both", "[sampler]") {
  Rng rng(2);
  SamplerConfig cfg;
  cfg.epsilon = 1.0;
  cfg.strategy = SamplingStrategy::ActionFollowsBelief;
  for (int it = 0; it < 1000; ++it) {
    TurnDecision d = decide_turn(rng, cfg);
    REQUIRE(d.replace_belief);
    REQUIRE(d.replace_act_resp);
  }
}

TEST_CASE("decide_turn frequencies match the enumeration oracle", "[sampler]") {
  const int kDraws = 100000;
  for (double eps : {0.0, 0.25, 1.0}) {
    for (int s = 0; s < 5; ++s) {
      for (bool unconditional : {false, true}) {
        SamplerConfig cfg;
        cfg.epsilon = eps;
        cfg.strategy = static_cast<SamplingStrategy>(s);
        cfg.at_most_one_unconditional = unconditional;
        Rng rng(derive_seed(42, "freq", s, unconditional));
        std::map<std::pair<bool, bool>, double> observed;
        for (int it = 0; it < kDraws; ++it) {
          TurnDecision d = decide_turn(rng, cfg);
          observed[{d.replace_belief, d.replace_act_resp}] += 1.0 / kDraws;
        }
        auto expected = decision_oracle(cfg.strategy, eps, unconditional);
        for (const auto& [outcome, prob] : expected) {
          INFO("strategy " << strategy_name(cfg.strategy) << " eps " << eps
                           << " unconditional " << unconditional);
          REQUIRE(std::abs(observed[outcome] - prob) < 0.01);
        }
        double total = 0;
        for (auto& [_, v] : observed) total += v;
        REQUIRE(std::abs(total - 1.0) < 1e-9);
      }
    }
  }
}

TEST_CASE("epsilon 0 reproduces the ground-truth flattening for every strategy",
          "[sampler]") {
  Corpus c = fixture_corpus();
  Vocab vocab = build_vocab(c);
  TransformerLM model = sampler_model(vocab);
  TaggedSequence gt = flatten_session(c.sessions[0], vocab);
  for (int s = 0; s < 5; ++s) {
    SamplerConfig cfg;
    cfg.epsilon = 0.0;
    cfg.strategy = static_cast<SamplingStrategy>(s);
    Rng rng(derive_seed(7, "eps0", s));
    MixedResult r = build_mixed_sequence(model, c.sessions[0], vocab, c.database,
                                         c.ontology, cfg, rng);
    REQUIRE(r.seq.tokens == gt.tokens);
    REQUIRE(r.seq.spans == gt.spans);
    for (const auto& [key, prov] : r.seq.provenance)
      REQUIRE(prov == Provenance::GroundTruth);
    REQUIRE(r.replaced_beliefs == 0);
    REQUIRE(r.replaced_act_resps == 0);
  }
}

TEST_CASE("epsilon 1 BeliefOnly: generated beliefs, re-queried DB spans", "[sampler]") {
  Corpus c = fixture_corpus();
  Vocab vocab = build_vocab(c);
  TransformerLM model = sampler_model(vocab);
  SamplerConfig cfg;
  cfg.epsilon = 1.0;
  cfg.strategy = SamplingStrategy::BeliefOnly;
  Rng rng(3);
  MixedResult r = build_mixed_sequence(model, c.sessions[0], vocab, c.database,
                                       c.ontology, cfg, rng);
  r.seq.check_invariants(vocab);
  SlotSchema schema = c.ontology.belief_slots();
  for (int turn = 0; turn < r.seq.num_turns(); ++turn) {
    REQUIRE(r.seq.span_provenance(turn, SpanRole::Belief) == Provenance::Generated);
    REQUIRE(r.seq.span_provenance(turn, SpanRole::DbResult) == Provenance::Generated);
    REQUIRE(r.seq.span_provenance(turn, SpanRole::User) == Provenance::GroundTruth);
    REQUIRE(r.seq.span_provenance(turn, SpanRole::Act) == Provenance::GroundTruth);
    REQUIRE(r.seq.span_provenance(turn, SpanRole::Response) == Provenance::GroundTruth);
    // re-query oracle: the emitted DB span must equal db_query of the parsed
    // belief span that precedes it
    BeliefParse bp =
        parse_belief_span(r.seq.span_body(turn, SpanRole::Belief), vocab, schema);
    DbResult expect = db_query(bp.state, c.database, c.ontology);
    auto got = parse_db_span(r.seq.span_body(turn, SpanRole::DbResult), vocab);
    REQUIRE(got.has_value());
    REQUIRE(*got == expect);
  }
  REQUIRE(r.replaced_beliefs == 2);
}

TEST_CASE("BeliefOnly: mixed and ground-truth current-turn context coincide",
          "[sampler]") {
  // only the ground-truth user utterance precedes the belief in the current
  // turn, so the two current-turn attributes generate identical sequences
  Corpus c = fixture_corpus();
  Vocab vocab = build_vocab(c);
  TransformerLM model = sampler_model(vocab);
  SamplerConfig cfg;
  cfg.epsilon = 1.0;
  cfg.strategy = SamplingStrategy::BeliefOnly;

  cfg.context.current_turn = ContextSource::Mixed;
  Rng rng1(9);
  MixedResult mixed_cur = build_mixed_sequence(model, c.sessions[0], vocab, c.database,
                                               c.ontology, cfg, rng1);
  cfg.context.current_turn = ContextSource::GroundTruth;
  Rng rng2(9);
  MixedResult gt_cur = build_mixed_sequence(model, c.sessions[0], vocab, c.database,
                                            c.ontology, cfg, rng2);
  REQUIRE(mixed_cur.seq.tokens == gt_cur.seq.tokens);
}

TEST_CASE("span structure is preserved under replacement", "[sampler]") {
  Corpus c = fixture_corpus();
  Vocab vocab = build_vocab(c);
  TransformerLM model = sampler_model(vocab);
  for (int s = 0; s < 5; ++s) {
    SamplerConfig cfg;
    cfg.epsilon = 1.0;
    cfg.strategy = static_cast<SamplingStrategy>(s);
    Rng rng(derive_seed(11, "structure", s));
    MixedResult r = build_mixed_sequence(model, c.sessions[0], vocab, c.database,
                                         c.ontology, cfg, rng);
    r.seq.check_invariants(vocab);
    TaggedSequence gt = flatten_session(c.sessions[0], vocab);
    REQUIRE(r.seq.spans.size() == gt.spans.size());
    auto it_r = r.seq.spans.begin();
    auto it_g = gt.spans.begin();
    for (; it_r != r.seq.spans.end(); ++it_r, ++it_g) {
      REQUIRE(it_r->first == it_g->first);  // same (turn, role) keys in order
    }
  }
}

TEST_CASE("DB spans stay consistent with their beliefs at random epsilon", "[sampler]") {
  Corpus c = fixture_corpus();
  Vocab vocab = build_vocab(c);
  TransformerLM model = sampler_model(vocab);
  SlotSchema schema = c.ontology.belief_slots();
  SamplerConfig cfg;
  cfg.epsilon = 0.5;
  cfg.strategy = SamplingStrategy::RandomIndependent;
  for (uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(seed);
    MixedResult r = build_mixed_sequence(model, c.sessions[0], vocab, c.database,
                                         c.ontology, cfg, rng);
    for (int turn = 0; turn < r.seq.num_turns(); ++turn) {
      BeliefParse bp =
          parse_belief_span(r.seq.span_body(turn, SpanRole::Belief), vocab, schema);
      // ground-truth belief spans parse to the annotated belief whose active
      // domain annotation the parser recovers from block order; re-query
      // must reproduce the emitted DB span either way
      DbResult expect = db_query(bp.state, c.database, c.ontology);
      auto got = parse_db_span(r.seq.span_body(turn, SpanRole::DbResult), vocab);
      REQUIRE(got.has_value());
      REQUIRE(*got == expect);
    }
  }
}

TEST_CASE("replacement frequency approaches epsilon for BeliefOnly", "[sampler]") {
  Corpus c = fixture_corpus();
  Vocab vocab = build_vocab(c);
  TransformerLM model = sampler_model(vocab);
  SamplerConfig cfg;
  cfg.epsilon = 0.2;
  cfg.strategy = SamplingStrategy::BeliefOnly;
  int replaced = 0, turns = 0;
  for (uint64_t seed = 0; seed < 400; ++seed) {
    Rng rng(derive_seed(13, "freqlaw", seed));
    MixedResult r = build_mixed_sequence(model, c.sessions[0], vocab, c.database,
                                         c.ontology, cfg, rng);
    replaced += r.replaced_beliefs;
    turns += r.seq.num_turns();
  }
  // binomial: sd = sqrt(eps(1-eps)/n); allow 3 sigma
  double freq = double(replaced) / turns;
  double sigma = std::sqrt(0.2 * 0.8 / turns);
  REQUIRE(std::abs(freq - 0.2) < 3 * sigma + 1e-9);
}
