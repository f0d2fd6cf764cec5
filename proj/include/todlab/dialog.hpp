#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace todlab {

// ---------------------------------------------------------------------------
// Roles and provenance
// ---------------------------------------------------------------------------

// The five modular spans of one dialog turn, in sequence order.
enum class SpanRole { User, Belief, DbResult, Act, Response };

inline constexpr int kNumRoles = 5;

inline int role_rank(SpanRole r) { return static_cast<int>(r); }

inline const char* role_name(SpanRole r) {
  switch (r) {
    case SpanRole::User: return "user";
    case SpanRole::Belief: return "belief";
    case SpanRole::DbResult: return "db";
    case SpanRole::Act: return "act";
    case SpanRole::Response: return "response";
  }
  return "?";
}

enum class Provenance { GroundTruth, Generated, Masked };

// ---------------------------------------------------------------------------
// Belief state
// ---------------------------------------------------------------------------

// Accumulated domain -> slot -> value constraints. The constraint map is kept
// in canonical (alphabetical) order so equal states serialize identically.
// The active domain (the one most recently constrained) is carried out of
// band: it is not part of equality and never serialized, but database queries
// need it. Whoever builds the state records it: the corpus loader by diffing
// consecutive turns, the span parser from block order, the generator directly.
struct BeliefState {
  std::map<std::string, std::map<std::string, std::string>> constraints;
  std::string active_domain;

  void set(const std::string& domain, const std::string& slot, const std::string& value) {
    if (value.empty()) throw std::invalid_argument("belief value must be non-empty");
    constraints[domain][slot] = value;
    active_domain = domain;
  }

  bool empty() const { return constraints.empty(); }

  // If no explicit active domain was recorded, fall back to the last
  // constrained domain in canonical order.
  std::string resolve_active_domain() const {
    if (!active_domain.empty()) return active_domain;
    if (!constraints.empty()) return constraints.rbegin()->first;
    return {};
  }

  friend bool operator==(const BeliefState& a, const BeliefState& b) {
    return a.constraints == b.constraints;
  }
};

// ---------------------------------------------------------------------------
// Database result
// ---------------------------------------------------------------------------

enum class MatchBucket { zero, one, two, three, more_than_three };

inline MatchBucket bucket_from_count(size_t n) {
  if (n >= 4) return MatchBucket::more_than_three;
  return static_cast<MatchBucket>(n);
}

inline const char* bucket_label(MatchBucket b) {
  switch (b) {
    case MatchBucket::zero: return "0";
    case MatchBucket::one: return "1";
    case MatchBucket::two: return "2";
    case MatchBucket::three: return "3";
    case MatchBucket::more_than_three: return ">3";
  }
  return "?";
}

inline std::optional<MatchBucket> bucket_from_label(const std::string& s) {
  if (s == "0") return MatchBucket::zero;
  if (s == "1") return MatchBucket::one;
  if (s == "2") return MatchBucket::two;
  if (s == "3") return MatchBucket::three;
  if (s == ">3") return MatchBucket::more_than_three;
  return std::nullopt;
}

struct DbResult {
  MatchBucket bucket = MatchBucket::zero;
  bool booking_ok = false;

  friend bool operator==(const DbResult& a, const DbResult& b) {
    return a.bucket == b.bucket && a.booking_ok == b.booking_ok;
  }
};

// ---------------------------------------------------------------------------
// System act
// ---------------------------------------------------------------------------

enum class ActType { Inform, Request, Recommend, Book, Select, General };

inline const char* act_name(ActType a) {
  switch (a) {
    case ActType::Inform: return "inform";
    case ActType::Request: return "request";
    case ActType::Recommend: return "recommend";
    case ActType::Book: return "book";
    case ActType::Select: return "select";
    case ActType::General: return "general";
  }
  return "?";
}

inline std::optional<ActType> act_from_name(const std::string& s) {
  static const std::map<std::string, ActType> table = {
      {"inform", ActType::Inform},   {"request", ActType::Request},
      {"recommend", ActType::Recommend}, {"book", ActType::Book},
      {"select", ActType::Select},   {"general", ActType::General}};
  auto it = table.find(s);
  if (it == table.end()) return std::nullopt;
  return it->second;
}

struct ActTriple {
  std::string domain;
  ActType act = ActType::General;
  std::string slot;  // "none" when the act carries no slot

  friend bool operator==(const ActTriple& a, const ActTriple& b) {
    return a.domain == b.domain && a.act == b.act && a.slot == b.slot;
  }
};

struct SystemAct {
  std::vector<ActTriple> triples;

  friend bool operator==(const SystemAct& a, const SystemAct& b) {
    return a.triples == b.triples;
  }
};

// ---------------------------------------------------------------------------
// Turns, goals, sessions
// ---------------------------------------------------------------------------

struct DialogTurn {
  int index = 0;
  std::vector<std::string> user;
  BeliefState belief;
  DbResult db;
  SystemAct act;
  std::vector<std::string> response;  // delexicalized tokens
};

struct GoalDomain {
  std::map<std::string, std::string> constraints;
  std::vector<std::string> requests;
};

struct Goal {
  std::map<std::string, GoalDomain> domains;
};

struct DialogSession {
  std::string session_id;
  Goal goal;
  std::vector<DialogTurn> turns;
};

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

class VocabError : public std::runtime_error {
 public:
  explicit VocabError(const std::string& what) : std::runtime_error(what) {}
};

// Bijective token <-> id map with a fixed reserved block at the front.
// Reserved ids are bracketed/marker strings that whitespace tokenization can
// never produce from corpus text, so they cannot collide with corpus tokens.
class Vocab {
 public:
  // Reserved layout (stable across corpora):
  //   0 <pad>  1 <eos>  2 [MASK]
  //   3..12 role start/end markers (U,B,D,A,R)
  //   13..17 db match buckets    18..19 booking flags
  //   20..25 act types
  static constexpr int kPad = 0;
  static constexpr int kEos = 1;
  static constexpr int kMask = 2;

  Vocab() {
    add("<pad>");
    add("<eos>");
    add("[MASK]");
    static const char* marker_names[kNumRoles][2] = {{"<sos_u>", "<eos_u>"},
                                                     {"<sos_b>", "<eos_b>"},
                                                     {"<sos_d>", "<eos_d>"},
                                                     {"<sos_a>", "<eos_a>"},
                                                     {"<sos_r>", "<eos_r>"}};
    for (int r = 0; r < kNumRoles; ++r) {
      marker_start_[r] = add(marker_names[r][0]);
      marker_end_[r] = add(marker_names[r][1]);
    }
    for (int b = 0; b < 5; ++b) {
      bucket_ids_[b] = add(std::string("[db_") +
                           bucket_label(static_cast<MatchBucket>(b)) + "]");
    }
    book_ok_id_ = add("[book_ok]");
    book_fail_id_ = add("[book_fail]");
    for (int a = 0; a < 6; ++a) {
      act_ids_[a] = add(std::string("[") + act_name(static_cast<ActType>(a)) + "]");
    }
    reserved_count_ = static_cast<int>(id_to_tok_.size());
  }

  // Appends a token if new; returns its id either way.
  int add(const std::string& tok) {
    auto it = tok_to_id_.find(tok);
    if (it != tok_to_id_.end()) return it->second;
    int id = static_cast<int>(id_to_tok_.size());
    id_to_tok_.push_back(tok);
    tok_to_id_.emplace(tok, id);
    return id;
  }

  int encode(const std::string& tok) const {
    auto it = tok_to_id_.find(tok);
    if (it == tok_to_id_.end())
      throw VocabError("unknown token '" + tok + "'");
    return it->second;
  }

  int try_encode(const std::string& tok) const {
    auto it = tok_to_id_.find(tok);
    return it == tok_to_id_.end() ? -1 : it->second;
  }

  const std::string& decode(int id) const {
    if (id < 0 || id >= static_cast<int>(id_to_tok_.size()))
      throw VocabError("token id " + std::to_string(id) + " out of range");
    return id_to_tok_[id];
  }

  int size() const { return static_cast<int>(id_to_tok_.size()); }
  int reserved_count() const { return reserved_count_; }

  int start_marker(SpanRole r) const { return marker_start_[role_rank(r)]; }
  int end_marker(SpanRole r) const { return marker_end_[role_rank(r)]; }
  int bucket_id(MatchBucket b) const { return bucket_ids_[static_cast<int>(b)]; }
  int booking_id(bool ok) const { return ok ? book_ok_id_ : book_fail_id_; }
  int act_id(ActType a) const { return act_ids_[static_cast<int>(a)]; }

  static std::string domain_token(const std::string& domain) { return "[" + domain + "]"; }
  static std::string value_placeholder(const std::string& slot) {
    return "[value_" + slot + "]";
  }

  const std::vector<std::string>& tokens() const { return id_to_tok_; }

  friend bool operator==(const Vocab& a, const Vocab& b) {
    return a.id_to_tok_ == b.id_to_tok_;
  }

 private:
  std::vector<std::string> id_to_tok_;
  std::unordered_map<std::string, int> tok_to_id_;
  int marker_start_[kNumRoles] = {};
  int marker_end_[kNumRoles] = {};
  int bucket_ids_[5] = {};
  int book_ok_id_ = 0;
  int book_fail_id_ = 0;
  int act_ids_[6] = {};
  int reserved_count_ = 0;
};

// ---------------------------------------------------------------------------
// Canonical span serialization
// ---------------------------------------------------------------------------

// Belief: per domain (alphabetical) a [domain] token, then per slot
// (alphabetical) the slot name followed by the whitespace-split value words.
inline std::vector<std::string> belief_to_words(const BeliefState& b) {
  std::vector<std::string> out;
  for (const auto& [domain, slots] : b.constraints) {
    out.push_back(Vocab::domain_token(domain));
    for (const auto& [slot, value] : slots) {
      out.push_back(slot);
      size_t i = 0;
      while (i < value.size()) {
        size_t j = value.find(' ', i);
        if (j == std::string::npos) j = value.size();
        if (j > i) out.push_back(value.substr(i, j - i));
        i = j + 1;
      }
    }
  }
  return out;
}

inline std::vector<std::string> act_to_words(const SystemAct& a) {
  std::vector<std::string> out;
  for (const auto& t : a.triples) {
    out.push_back(Vocab::domain_token(t.domain));
    out.push_back(std::string("[") + act_name(t.act) + "]");
    out.push_back(t.slot.empty() ? "none" : t.slot);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tagged sequence
// ---------------------------------------------------------------------------

struct SpanKey {
  int turn = 0;
  SpanRole role = SpanRole::User;

  friend bool operator==(const SpanKey& a, const SpanKey& b) {
    return a.turn == b.turn && a.role == b.role;
  }
  friend bool operator<(const SpanKey& a, const SpanKey& b) {
    if (a.turn != b.turn) return a.turn < b.turn;
    return role_rank(a.role) < role_rank(b.role);
  }
};

struct TokenRange {
  int begin = 0;
  int end = 0;  // half-open

  int length() const { return end - begin; }
  friend bool operator==(const TokenRange& a, const TokenRange& b) {
    return a.begin == b.begin && a.end == b.end;
  }
};

// A session flattened to one token sequence, with a (turn, role) -> range
// index and per-span provenance. Map iteration order equals position order
// because spans are laid out U,B,D,A,R per turn and by turn index.
struct TaggedSequence {
  std::vector<int> tokens;
  std::map<SpanKey, TokenRange> spans;
  std::map<SpanKey, Provenance> provenance;

  int length() const { return static_cast<int>(tokens.size()); }

  int num_turns() const {
    return spans.empty() ? 0 : spans.rbegin()->first.turn + 1;
  }

  bool has_span(int turn, SpanRole role) const {
    return spans.count(SpanKey{turn, role}) > 0;
  }

  const TokenRange& span(int turn, SpanRole role) const {
    auto it = spans.find(SpanKey{turn, role});
    if (it == spans.end())
      throw std::out_of_range("no span (turn " + std::to_string(turn) + ", " +
                              role_name(role) + ")");
    return it->second;
  }

  Provenance span_provenance(int turn, SpanRole role) const {
    auto it = provenance.find(SpanKey{turn, role});
    if (it == provenance.end())
      throw std::out_of_range("no provenance for (turn " + std::to_string(turn) +
                              ", " + role_name(role) + ")");
    return it->second;
  }

  // Tokens of a span excluding its start/end markers.
  std::vector<int> span_body(int turn, SpanRole role) const {
    const TokenRange& r = span(turn, role);
    if (r.length() < 2) return {};
    return std::vector<int>(tokens.begin() + r.begin + 1, tokens.begin() + r.end - 1);
  }

  void append_span(int turn, SpanRole role, const std::vector<int>& body,
                   const Vocab& vocab, Provenance prov) {
    TokenRange r;
    r.begin = length();
    tokens.push_back(vocab.start_marker(role));
    tokens.insert(tokens.end(), body.begin(), body.end());
    tokens.push_back(vocab.end_marker(role));
    r.end = length();
    SpanKey key{turn, role};
    spans[key] = r;
    provenance[key] = prov;
  }

  // Structural invariants: spans contiguous, ordered, covering, and bracketed
  // by the right markers. Throws on violation.
  void check_invariants(const Vocab& vocab) const {
    int cursor = 0;
    int expect_turn = 0;
    int expect_role = 0;
    for (const auto& [key, range] : spans) {
      if (key.turn != expect_turn || role_rank(key.role) != expect_role)
        throw std::logic_error("span order violated at turn " +
                               std::to_string(key.turn));
      if (range.begin != cursor)
        throw std::logic_error("span gap/overlap at turn " + std::to_string(key.turn));
      if (range.length() < 2)
        throw std::logic_error("span too short for markers");
      if (tokens[range.begin] != vocab.start_marker(key.role) ||
          tokens[range.end - 1] != vocab.end_marker(key.role))
        throw std::logic_error("span markers wrong at turn " + std::to_string(key.turn));
      cursor = range.end;
      expect_role++;
      if (expect_role == kNumRoles) {
        expect_role = 0;
        expect_turn++;
      }
    }
    if (cursor != length()) throw std::logic_error("spans do not cover all tokens");
    if (expect_role != 0) throw std::logic_error("incomplete final turn");
  }
};

// ---------------------------------------------------------------------------
// Flattening and context construction
// ---------------------------------------------------------------------------

inline std::vector<int> encode_words(const std::vector<std::string>& words,
                                     const Vocab& vocab, int turn,
                                     const char* role) {
  std::vector<int> ids;
  ids.reserve(words.size());
  for (const auto& w : words) {
    int id = vocab.try_encode(w);
    if (id < 0)
      throw VocabError("unknown token '" + w + "' in " + role + " span of turn " +
                       std::to_string(turn));
    ids.push_back(id);
  }
  return ids;
}

inline std::vector<int> db_body_tokens(const DbResult& db, const Vocab& vocab) {
  return {vocab.bucket_id(db.bucket), vocab.booking_id(db.booking_ok)};
}

// Flattens a session to {U,B,D,A,R per turn} with the span index. Default
// provenance is GroundTruth everywhere; an override map can re-tag spans.
inline TaggedSequence flatten_session(
    const DialogSession& session, const Vocab& vocab,
    const std::map<SpanKey, Provenance>* provenance_override = nullptr) {
  if (session.turns.empty())
    throw std::invalid_argument("session " + session.session_id + " has no turns");
  TaggedSequence seq;
  for (const DialogTurn& t : session.turns) {
    seq.append_span(t.index, SpanRole::User,
                    encode_words(t.user, vocab, t.index, "user"), vocab,
                    Provenance::GroundTruth);
    seq.append_span(t.index, SpanRole::Belief,
                    encode_words(belief_to_words(t.belief), vocab, t.index, "belief"),
                    vocab, Provenance::GroundTruth);
    seq.append_span(t.index, SpanRole::DbResult, db_body_tokens(t.db, vocab), vocab,
                    Provenance::GroundTruth);
    seq.append_span(t.index, SpanRole::Act,
                    encode_words(act_to_words(t.act), vocab, t.index, "act"), vocab,
                    Provenance::GroundTruth);
    seq.append_span(t.index, SpanRole::Response,
                    encode_words(t.response, vocab, t.index, "response"), vocab,
                    Provenance::GroundTruth);
  }
  if (provenance_override) {
    for (const auto& [key, prov] : *provenance_override) {
      auto it = seq.provenance.find(key);
      if (it == seq.provenance.end())
        throw std::out_of_range("provenance override for missing span");
      it->second = prov;
    }
  }
  return seq;
}

// All tokens strictly before the span (turn, upto_role): the exact
// conditioning prefix for generating that span.
inline std::vector<int> build_context(const TaggedSequence& seq, int turn,
                                      SpanRole upto_role) {
  const TokenRange& r = seq.span(turn, upto_role);
  return std::vector<int>(seq.tokens.begin(), seq.tokens.begin() + r.begin);
}

// ---------------------------------------------------------------------------
// Belief span parsing
// ---------------------------------------------------------------------------

// Domain -> allowed slot names, the part of the ontology the parser needs.
using SlotSchema = std::map<std::string, std::set<std::string>>;

struct BeliefParse {
  BeliefState state;
  std::vector<std::string> dropped;  // diagnostics for unparseable fragments
};

// Best-effort total parse of a belief span (no role markers). Well-formed
// structure is [domain] (slot value-words+)* per block; recovery keeps the
// longest well-formed prefix of each domain block and drops the remainder of
// the block. Bracketed tokens are never value words. The active domain is
// the last domain token in the span.
inline BeliefParse parse_belief_span(const std::vector<int>& body, const Vocab& vocab,
                                     const SlotSchema& schema) {
  BeliefParse out;
  const size_t n = body.size();
  size_t i = 0;
  auto word = [&](size_t k) -> const std::string& { return vocab.decode(body[k]); };
  auto domain_of = [&](const std::string& w) -> const std::string* {
    if (w.size() < 3 || w.front() != '[' || w.back() != ']') return nullptr;
    auto it = schema.find(w.substr(1, w.size() - 2));
    return it == schema.end() ? nullptr : &it->first;
  };
  auto bracketed = [](const std::string& w) {
    return !w.empty() && (w.front() == '[' || w.front() == '<');
  };
  // skip to the next domain token, recording what was dropped
  auto skip_block_rest = [&](const char* why) {
    while (i < n && !domain_of(word(i))) {
      out.dropped.push_back(std::string(why) + ": '" + word(i) + "'");
      ++i;
    }
  };

  skip_block_rest("before any domain");
  while (i < n) {
    const std::string* dname = domain_of(word(i));
    // loop invariant: word(i) is a domain token here
    out.state.active_domain = *dname;
    const std::set<std::string>& slots = schema.at(*dname);
    ++i;
    while (i < n && !domain_of(word(i))) {
      const std::string& w = word(i);
      if (!slots.count(w)) {
        skip_block_rest("malformed block tail");
        break;
      }
      const std::string slot = w;
      ++i;
      std::string value;
      while (i < n && !domain_of(word(i)) && !slots.count(word(i)) &&
             !bracketed(word(i))) {
        if (!value.empty()) value += ' ';
        value += word(i);
        ++i;
      }
      if (value.empty()) {
        out.dropped.push_back("slot '" + slot + "' without value");
        skip_block_rest("malformed block tail");
        break;
      }
      out.state.constraints[*dname][slot] = value;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Re-splitting helpers (inverse of flatten, used by tests and the engine)
// ---------------------------------------------------------------------------

inline std::vector<std::string> decode_words(const std::vector<int>& ids,
                                             const Vocab& vocab) {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(vocab.decode(id));
  return out;
}

struct ActParse {
  SystemAct act;
  std::vector<std::string> dropped;
};

// Total best-effort parse of an act span body: [domain] [acttype] slot triples.
inline ActParse parse_act_span(const std::vector<int>& body, const Vocab& vocab) {
  ActParse out;
  size_t i = 0;
  auto bracket_inner = [](const std::string& w) -> std::optional<std::string> {
    if (w.size() < 3 || w.front() != '[' || w.back() != ']') return std::nullopt;
    return w.substr(1, w.size() - 2);
  };
  while (i < body.size()) {
    const std::string& dw = vocab.decode(body[i]);
    auto dname = bracket_inner(dw);
    if (!dname || act_from_name(*dname)) {
      out.dropped.push_back("expected domain token, got '" + dw + "'");
      ++i;
      continue;
    }
    if (i + 1 >= body.size()) {
      out.dropped.push_back("truncated act triple at '" + dw + "'");
      break;
    }
    const std::string& aw = vocab.decode(body[i + 1]);
    auto aname = bracket_inner(aw);
    std::optional<ActType> at = aname ? act_from_name(*aname) : std::nullopt;
    if (!at) {
      out.dropped.push_back("expected act token after '" + dw + "'");
      ++i;
      continue;
    }
    if (i + 2 >= body.size()) {
      out.dropped.push_back("act triple missing slot after '" + aw + "'");
      break;
    }
    ActTriple t;
    t.domain = *dname;
    t.act = *at;
    t.slot = vocab.decode(body[i + 2]);
    out.act.triples.push_back(std::move(t));
    i += 3;
  }
  return out;
}

inline std::optional<DbResult> parse_db_span(const std::vector<int>& body,
                                             const Vocab& vocab) {
  if (body.size() != 2) return std::nullopt;
  DbResult db;
  bool found = false;
  for (int b = 0; b < 5; ++b) {
    if (body[0] == vocab.bucket_id(static_cast<MatchBucket>(b))) {
      db.bucket = static_cast<MatchBucket>(b);
      found = true;
    }
  }
  if (!found) return std::nullopt;
  if (body[1] == vocab.booking_id(true)) db.booking_ok = true;
  else if (body[1] == vocab.booking_id(false)) db.booking_ok = false;
  else return std::nullopt;
  return db;
}

}  // namespace todlab
