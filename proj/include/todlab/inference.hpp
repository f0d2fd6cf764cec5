#pragma once

#include <string>
#include <vector>

#include "todlab/corpus.hpp"
#include "todlab/dialog.hpp"
#include "todlab/lm.hpp"

namespace todlab {

// ---------------------------------------------------------------------------
// Generated session records
// ---------------------------------------------------------------------------

struct GeneratedTurn {
  BeliefState belief;  // parsed from the generated span, or annotated in
                       // policy-optimization mode
  Provenance belief_provenance = Provenance::Generated;
  DbResult db;
  std::vector<int> act_tokens;       // span body, no markers
  std::vector<int> response_tokens;  // span body, no markers
  std::vector<std::string> diagnostics;
};

struct GeneratedSession {
  std::string session_id;
  TaggedSequence seq;  // the full generated sequence with span index
  std::vector<GeneratedTurn> turns;
};

// ---------------------------------------------------------------------------
// Session runner
// ---------------------------------------------------------------------------

namespace detail {

// Incremental session decoder. Keeps a KV cache over the generated sequence;
// when the model window fills up it rebuilds the cache from the newest whole
// turns of the running sequence.
class SessionDecoder {
 public:
  SessionDecoder(const TransformerLM& model, const Vocab& vocab, int max_span_tokens)
      : model_(model),
        vocab_(vocab),
        cap_(max_span_tokens),
        state_(model.make_decode_state()) {}

  // Appends already-known tokens (annotated spans) to the running sequence.
  void push_known(TaggedSequence& seq, int turn, SpanRole role,
                  const std::vector<int>& body, Provenance prov) {
    seq.append_span(turn, role, body, vocab_, prov);
    const TokenRange& r = seq.span(turn, role);
    pending_.insert(pending_.end(), seq.tokens.begin() + r.begin,
                    seq.tokens.begin() + r.end);
  }

  // Generates one span greedily; returns the body without markers.
  std::vector<int> generate_span(TaggedSequence& seq, int turn, SpanRole role,
                                 std::vector<std::string>* diagnostics) {
    ensure_window(seq, turn);
    pending_.push_back(vocab_.start_marker(role));
    std::vector<int> gen =
        model_.generate_continue(state_, pending_, vocab_.end_marker(role), cap_);
    pending_.clear();
    if (gen.empty() || gen.back() != vocab_.end_marker(role)) {
      gen.push_back(vocab_.end_marker(role));
      if (diagnostics)
        diagnostics->push_back(std::string(role_name(role)) +
                               " span truncated at generation limit");
    } else {
      // the stop token was emitted but never fed through the model
    }
    // Everything generated except the final (stop) token is already inside
    // the KV cache; the stop token goes back to the pending queue.
    std::vector<int> body(gen.begin(), gen.end() - 1);
    pending_.push_back(gen.back());
    seq.append_span(turn, role, body, vocab_, Provenance::Generated);
    return body;
  }

 private:
  void ensure_window(const TaggedSequence& seq, int current_turn) {
    int needed = state_.len + static_cast<int>(pending_.size()) + 2 + cap_;
    if (needed < model_.config().max_len) return;
    // Rebuild the cache from the newest whole turns that fit, always keeping
    // the current turn's tokens (held in pending_).
    const int limit = model_.config().max_len - cap_ - 2;
    if (static_cast<int>(pending_.size()) > limit)
      pending_.erase(pending_.begin(), pending_.end() - std::max(1, limit));
    int budget = limit - static_cast<int>(pending_.size());
    std::vector<int> kept;
    for (int turn = current_turn - 1; turn >= 0 && budget > 0; --turn) {
      const TokenRange first = seq.span(turn, SpanRole::User);
      const TokenRange last = seq.span(turn, SpanRole::Response);
      int len = last.end - first.begin;
      if (len > budget) break;
      kept.insert(kept.begin(), seq.tokens.begin() + first.begin,
                  seq.tokens.begin() + last.end);
      budget -= len;
    }
    state_ = model_.make_decode_state();
    if (!kept.empty()) model_.prefill(state_, kept);
  }

  const TransformerLM& model_;
  const Vocab& vocab_;
  int cap_;
  TransformerLM::DecodeState state_;
  std::vector<int> pending_;  // emitted but not yet fed through the model
};

}  // namespace detail

// End-to-end inference: per turn the model consumes the ground-truth user
// utterance, generates the belief state, the database is queried with the
// parsed belief, then act and response are generated. The dialog context is
// the generated sequence itself.
inline GeneratedSession run_end_to_end(const TransformerLM& model,
                                       const DialogSession& session,
                                       const Vocab& vocab, const Database& db,
                                       const Ontology& ont, int max_span_tokens = 48) {
  GeneratedSession out;
  out.session_id = session.session_id;
  const SlotSchema schema = ont.belief_slots();
  detail::SessionDecoder dec(model, vocab, max_span_tokens);

  for (const DialogTurn& t : session.turns) {
    GeneratedTurn rec;
    dec.push_known(out.seq, t.index, SpanRole::User,
                   encode_words(t.user, vocab, t.index, "user"),
                   Provenance::GroundTruth);
    std::vector<int> belief_body =
        dec.generate_span(out.seq, t.index, SpanRole::Belief, &rec.diagnostics);
    BeliefParse parsed = parse_belief_span(belief_body, vocab, schema);
    for (const auto& d : parsed.dropped)
      rec.diagnostics.push_back("belief parse: " + d);
    rec.belief = parsed.state;
    rec.belief_provenance = Provenance::Generated;
    rec.db = db_query(rec.belief, db, ont);
    dec.push_known(out.seq, t.index, SpanRole::DbResult,
                   db_body_tokens(rec.db, vocab), Provenance::Generated);
    rec.act_tokens = dec.generate_span(out.seq, t.index, SpanRole::Act, &rec.diagnostics);
    rec.response_tokens =
        dec.generate_span(out.seq, t.index, SpanRole::Response, &rec.diagnostics);
    out.turns.push_back(std::move(rec));
  }
  return out;
}

// Policy-optimization inference: belief states and DB results come from the
// annotations; only act and response are generated.
inline GeneratedSession run_policy_opt(const TransformerLM& model,
                                       const DialogSession& session,
                                       const Vocab& vocab, const Database& db,
                                       const Ontology& ont, int max_span_tokens = 48) {
  (void)db;
  GeneratedSession out;
  out.session_id = session.session_id;
  detail::SessionDecoder dec(model, vocab, max_span_tokens);

  for (const DialogTurn& t : session.turns) {
    GeneratedTurn rec;
    dec.push_known(out.seq, t.index, SpanRole::User,
                   encode_words(t.user, vocab, t.index, "user"),
                   Provenance::GroundTruth);
    dec.push_known(out.seq, t.index, SpanRole::Belief,
                   encode_words(belief_to_words(t.belief), vocab, t.index, "belief"),
                   Provenance::GroundTruth);
    rec.belief = t.belief;
    rec.belief_provenance = Provenance::GroundTruth;
    rec.db = t.db;
    dec.push_known(out.seq, t.index, SpanRole::DbResult, db_body_tokens(t.db, vocab),
                   Provenance::GroundTruth);
    rec.act_tokens = dec.generate_span(out.seq, t.index, SpanRole::Act, &rec.diagnostics);
    rec.response_tokens =
        dec.generate_span(out.seq, t.index, SpanRole::Response, &rec.diagnostics);
    out.turns.push_back(std::move(rec));
  }
  return out;
}

}  // namespace todlab
