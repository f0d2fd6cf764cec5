#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "todlab/corpus.hpp"
#include "todlab/dialog.hpp"
#include "todlab/lm.hpp"
#include "todlab/rng.hpp"

namespace todlab {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

// Which modular spans of a turn may be replaced by generated content.
enum class SamplingStrategy {
  BeliefOnly,
  ActionOnly,
  AtMostOne,
  ActionFollowsBelief,
  RandomIndependent
};

inline const char* strategy_name(SamplingStrategy s) {
  switch (s) {
    case SamplingStrategy::BeliefOnly: return "belief_only";
    case SamplingStrategy::ActionOnly: return "action_only";
    case SamplingStrategy::AtMostOne: return "at_most_one";
    case SamplingStrategy::ActionFollowsBelief: return "action_follows_belief";
    case SamplingStrategy::RandomIndependent: return "random_independent";
  }
  return "?";
}

inline std::optional<SamplingStrategy> strategy_from_name(const std::string& s) {
  for (int i = 0; i < 5; ++i) {
    auto v = static_cast<SamplingStrategy>(i);
    if (s == strategy_name(v)) return v;
  }
  return std::nullopt;
}

// Whether generation conditions on the sequence as built (with earlier
// replacements) or on the pure annotated prefix.
enum class ContextSource { Mixed, GroundTruth };

struct ContextAttr {
  ContextSource prev_turns = ContextSource::Mixed;
  ContextSource current_turn = ContextSource::Mixed;
};

struct SamplerConfig {
  double epsilon = 0.01;
  SamplingStrategy strategy = SamplingStrategy::BeliefOnly;
  ContextAttr context;
  uint64_t seed = 1;
  // Open reading of the "at most one" strategy: false = the action draw is a
  // second independent Bernoulli(epsilon), true = the action is always
  // sampled when the belief is not.
  bool at_most_one_unconditional = false;
  int max_span_tokens = 48;  // generation cap per span

  void validate() const {
    if (!(epsilon >= 0.0 && epsilon <= 1.0))
      throw std::invalid_argument("epsilon must be in [0,1]");
    if (max_span_tokens < 1)
      throw std::invalid_argument("max_span_tokens must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Per-turn decision
// ---------------------------------------------------------------------------

struct TurnDecision {
  bool replace_belief = false;
  bool replace_act_resp = false;
};

inline TurnDecision decide_turn(Rng& rng, const SamplerConfig& config) {
  const double eps = config.epsilon;
  TurnDecision d;
  switch (config.strategy) {
    case SamplingStrategy::BeliefOnly:
      d.replace_belief = rng.bernoulli(eps);
      break;
    case SamplingStrategy::ActionOnly:
      d.replace_act_resp = rng.bernoulli(eps);
      break;
    case SamplingStrategy::AtMostOne:
      if (rng.bernoulli(eps)) {
        d.replace_belief = true;
      } else {
        d.replace_act_resp =
            config.at_most_one_unconditional ? true : rng.bernoulli(eps);
      }
      break;
    case SamplingStrategy::ActionFollowsBelief: {
      bool both = rng.bernoulli(eps);
      d.replace_belief = both;
      d.replace_act_resp = both;
      break;
    }
    case SamplingStrategy::RandomIndependent:
      d.replace_belief = rng.bernoulli(eps);
      d.replace_act_resp = rng.bernoulli(eps);
      break;
  }
  return d;
}

// ---------------------------------------------------------------------------
// Mixed-sequence construction
// ---------------------------------------------------------------------------

struct MixedResult {
  TaggedSequence seq;
  int replaced_beliefs = 0;
  int replaced_act_resps = 0;
  int truncated_spans = 0;
  std::vector<std::string> diagnostics;
};

namespace detail {

// Keeps the generation context inside the model window by dropping the
// oldest whole turns; as a last resort trims the current turn from the front.
inline std::vector<int> windowed_context(const std::vector<std::vector<int>>& prev_turns,
                                         const std::vector<int>& current, int budget,
                                         std::vector<std::string>* diagnostics) {
  int total = static_cast<int>(current.size());
  size_t first = prev_turns.size();
  for (size_t i = prev_turns.size(); i-- > 0;) {
    int len = static_cast<int>(prev_turns[i].size());
    if (total + len > budget) break;
    total += len;
    first = i;
  }
  std::vector<int> ctx;
  for (size_t i = first; i < prev_turns.size(); ++i)
    ctx.insert(ctx.end(), prev_turns[i].begin(), prev_turns[i].end());
  ctx.insert(ctx.end(), current.begin(), current.end());
  if (static_cast<int>(ctx.size()) > budget) {
    if (diagnostics)
      diagnostics->push_back("context trimmed mid-turn to fit the model window");
    ctx.erase(ctx.begin(), ctx.end() - budget);
  }
  return ctx;
}

}  // namespace detail

// Builds the session-level training sequence with ground-truth and generated
// modular spans mixed per the configured strategy. Replaced belief spans are
// generated from the running context, their DB spans are re-queried from the
// parsed generated belief, and replaced act/response spans are generated
// analogously. Generation is forward-only (no gradients are involved).
inline MixedResult build_mixed_sequence(const TransformerLM& model,
                                        const DialogSession& session,
                                        const Vocab& vocab, const Database& db,
                                        const Ontology& ont,
                                        const SamplerConfig& config, Rng& rng) {
  config.validate();
  MixedResult out;
  const TaggedSequence gt = flatten_session(session, vocab);
  const SlotSchema schema = ont.belief_slots();
  const int n_turns = static_cast<int>(session.turns.size());

  // Per-turn token chunks of both context sources, grown as we go.
  std::vector<std::vector<int>> prev_mixed, prev_gt;
  const int budget = std::max(1, model.config().max_len - config.max_span_tokens - 2);

  auto gt_span_tokens = [&](int turn, SpanRole role) {
    const TokenRange& r = gt.span(turn, role);
    return std::vector<int>(gt.tokens.begin() + r.begin, gt.tokens.begin() + r.end);
  };

  auto generate_span = [&](const std::vector<int>& current_ctx, SpanRole role,
                           int turn) -> std::vector<int> {
    const auto& prev = config.context.prev_turns == ContextSource::Mixed ? prev_mixed
                                                                         : prev_gt;
    std::vector<int> ctx = detail::windowed_context(prev, current_ctx, budget,
                                                    &out.diagnostics);
    ctx.push_back(vocab.start_marker(role));
    std::vector<int> gen =
        model.generate(ctx, vocab.end_marker(role), config.max_span_tokens);
    if (gen.empty() || gen.back() != vocab.end_marker(role)) {
      gen.push_back(vocab.end_marker(role));
      out.truncated_spans++;
      out.diagnostics.push_back("turn " + std::to_string(turn) + " " +
                                role_name(role) + " span truncated at limit");
    }
    gen.pop_back();  // body without the end marker
    return gen;
  };

  for (int turn = 0; turn < n_turns; ++turn) {
    TurnDecision decision = decide_turn(rng, config);
    std::vector<int> cur_mixed, cur_gt;  // current-turn prefixes, span-complete

    auto push_span = [&](SpanRole role, const std::vector<int>& body, Provenance prov) {
      out.seq.append_span(turn, role, body, vocab, prov);
      const TokenRange& r = out.seq.span(turn, role);
      cur_mixed.insert(cur_mixed.end(), out.seq.tokens.begin() + r.begin,
                       out.seq.tokens.begin() + r.end);
      auto g = gt_span_tokens(turn, role);
      cur_gt.insert(cur_gt.end(), g.begin(), g.end());
    };
    auto current_ctx = [&]() -> const std::vector<int>& {
      return config.context.current_turn == ContextSource::Mixed ? cur_mixed : cur_gt;
    };

    push_span(SpanRole::User, gt.span_body(turn, SpanRole::User),
              Provenance::GroundTruth);

    if (decision.replace_belief) {
      std::vector<int> body = generate_span(current_ctx(), SpanRole::Belief, turn);
      push_span(SpanRole::Belief, body, Provenance::Generated);
      out.replaced_beliefs++;
      BeliefParse parsed = parse_belief_span(body, vocab, schema);
      DbResult dbr = db_query(parsed.state, db, ont);
      push_span(SpanRole::DbResult, db_body_tokens(dbr, vocab), Provenance::Generated);
    } else {
      push_span(SpanRole::Belief, gt.span_body(turn, SpanRole::Belief),
                Provenance::GroundTruth);
      push_span(SpanRole::DbResult, gt.span_body(turn, SpanRole::DbResult),
                Provenance::GroundTruth);
    }

    if (decision.replace_act_resp) {
      std::vector<int> act_body = generate_span(current_ctx(), SpanRole::Act, turn);
      push_span(SpanRole::Act, act_body, Provenance::Generated);
      std::vector<int> resp_body =
          generate_span(current_ctx(), SpanRole::Response, turn);
      push_span(SpanRole::Response, resp_body, Provenance::Generated);
      out.replaced_act_resps++;
    } else {
      push_span(SpanRole::Act, gt.span_body(turn, SpanRole::Act),
                Provenance::GroundTruth);
      push_span(SpanRole::Response, gt.span_body(turn, SpanRole::Response),
                Provenance::GroundTruth);
    }

    prev_mixed.push_back(std::move(cur_mixed));
    prev_gt.push_back(std::move(cur_gt));
  }
  return out;
}

}  // namespace todlab
