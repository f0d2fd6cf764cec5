#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "todlab/corpus.hpp"
#include "todlab/inference.hpp"
#include "todlab/jsonio.hpp"

namespace todlab {

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct Metrics {
  double inform = 0.0;    // percentage
  double success = 0.0;   // percentage
  double bleu = 0.0;      // BLEU-4, 0..100
  double combined = 0.0;  // (inform + success) * 0.5 + bleu
  int n_sessions = 0;
};

inline double combined_score(double inform, double success, double bleu) {
  return (inform + success) * 0.5 + bleu;
}

inline Metrics make_metrics(double inform, double success, double bleu, int n_sessions) {
  Metrics m;
  m.inform = inform;
  m.success = success;
  m.bleu = bleu;
  m.combined = combined_score(inform, success, bleu);
  m.n_sessions = n_sessions;
  return m;
}

inline json metrics_to_json(const Metrics& m) {
  return json{{"inform", m.inform},
              {"success", m.success},
              {"bleu", m.bleu},
              {"combined", m.combined},
              {"n_sessions", m.n_sessions}};
}

inline Metrics metrics_from_json(const json& j, const std::string& where) {
  require_keys(j, where, {"inform", "success", "bleu", "combined", "n_sessions"});
  Metrics m;
  m.inform = get_number(j, "inform", where);
  m.success = get_number(j, "success", where);
  m.bleu = get_number(j, "bleu", where);
  m.combined = get_number(j, "combined", where);
  m.n_sessions = get_int(j, "n_sessions", where);
  return m;
}

// ---------------------------------------------------------------------------
// Inform / Success
// ---------------------------------------------------------------------------

namespace detail {

inline bool entity_satisfies(const Entity& e,
                             const std::map<std::string, std::string>& constraints) {
  for (const auto& [slot, value] : constraints) {
    auto it = e.find(slot);
    if (it == e.end() || it->second != value) return false;
  }
  return true;
}

inline bool response_has_placeholder(const std::vector<int>& response,
                                     const Vocab& vocab, const std::string& slot) {
  int id = vocab.try_encode(Vocab::value_placeholder(slot));
  if (id < 0) return false;
  return std::find(response.begin(), response.end(), id) != response.end();
}

inline bool domain_offers_entities(const Ontology& ont, const std::string& domain) {
  auto it = ont.domains.find(domain);
  if (it == ont.domains.end()) return false;
  const auto& req = it->second.requestable;
  return std::find(req.begin(), req.end(), "name") != req.end();
}

}  // namespace detail

// A goal domain with constraints counts as informed when some turn attributed
// to it (by the belief's active domain) offers a name placeholder while the
// belief-queried entity set is non-empty and every queried entity satisfies
// the goal constraints. Domains without a name-class requestable need no
// entity offer.
inline bool inform_for_session(const GeneratedSession& gen, const Goal& goal,
                               const Vocab& vocab, const Database& db,
                               const Ontology& ont) {
  for (const auto& [domain, gd] : goal.domains) {
    if (gd.constraints.empty()) continue;
    if (!detail::domain_offers_entities(ont, domain)) continue;
    bool ok = false;
    for (const GeneratedTurn& t : gen.turns) {
      if (t.belief.resolve_active_domain() != domain) continue;
      if (!detail::response_has_placeholder(t.response_tokens, vocab, "name")) continue;
      auto entities = query_entities(t.belief, db, ont);
      if (entities.empty()) continue;
      bool all_ok = true;
      for (const Entity* e : entities) {
        if (!detail::entity_satisfies(*e, gd.constraints)) {
          all_ok = false;
          break;
        }
      }
      if (all_ok) {
        ok = true;
        break;
      }
    }
    if (!ok) return false;
  }
  return true;
}

// Inform, plus every requested slot answered by a [value_<slot>] placeholder
// in some response of the domain's turns.
inline bool success_for_session(const GeneratedSession& gen, const Goal& goal,
                                const Vocab& vocab, const Database& db,
                                const Ontology& ont) {
  if (!inform_for_session(gen, goal, vocab, db, ont)) return false;
  for (const auto& [domain, gd] : goal.domains) {
    for (const std::string& slot : gd.requests) {
      bool found = false;
      for (const GeneratedTurn& t : gen.turns) {
        if (t.belief.resolve_active_domain() != domain) continue;
        if (detail::response_has_placeholder(t.response_tokens, vocab, slot)) {
          found = true;
          break;
        }
      }
      if (!found) return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Corpus BLEU-4
// ---------------------------------------------------------------------------

// Geometric mean of modified 1..4-gram precisions with brevity penalty,
// corpus level, 0..100 scale. Zero clipped-match counts are smoothed to 1e-9
// on the precision numerator.
inline double corpus_bleu(const std::vector<std::vector<int>>& candidates,
                          const std::vector<std::vector<int>>& references) {
  if (candidates.empty()) throw std::invalid_argument("corpus_bleu: no candidates");
  if (candidates.size() != references.size())
    throw std::invalid_argument("corpus_bleu: candidate/reference count mismatch");
  constexpr double kEps = 1e-9;

  auto ngram_counts = [](const std::vector<int>& toks, int n) {
    std::map<std::vector<int>, int> counts;
    if (static_cast<int>(toks.size()) >= n) {
      for (size_t i = 0; i + n <= toks.size(); ++i) {
        counts[std::vector<int>(toks.begin() + i, toks.begin() + i + n)]++;
      }
    }
    return counts;
  };

  double log_p_sum = 0.0;
  for (int n = 1; n <= 4; ++n) {
    double matched = 0.0;
    double total = 0.0;
    for (size_t i = 0; i < candidates.size(); ++i) {
      auto cand = ngram_counts(candidates[i], n);
      auto ref = ngram_counts(references[i], n);
      for (const auto& [gram, count] : cand) {
        auto it = ref.find(gram);
        int clip = it == ref.end() ? 0 : it->second;
        matched += std::min(count, clip);
        total += count;
      }
    }
    double num = matched > 0.0 ? matched : kEps;
    double den = total > 0.0 ? total : 1.0;
    log_p_sum += std::log(num / den);
  }

  double cand_len = 0.0, ref_len = 0.0;
  for (size_t i = 0; i < candidates.size(); ++i) {
    cand_len += static_cast<double>(candidates[i].size());
    ref_len += static_cast<double>(references[i].size());
  }
  if (cand_len == 0.0) return 0.0;
  double bp = cand_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
  return 100.0 * bp * std::exp(0.25 * log_p_sum);
}

// ---------------------------------------------------------------------------
// Corpus-level aggregation
// ---------------------------------------------------------------------------

struct SessionVerdict {
  std::string session_id;
  bool inform = false;
  bool success = false;
};

inline Metrics evaluate_corpus(const std::vector<GeneratedSession>& records,
                               const std::vector<DialogSession>& sessions,
                               const Vocab& vocab, const Database& db,
                               const Ontology& ont,
                               std::vector<SessionVerdict>* verdicts = nullptr) {
  if (records.size() != sessions.size())
    throw std::invalid_argument("evaluate_corpus: " + std::to_string(records.size()) +
                                " records for " + std::to_string(sessions.size()) +
                                " sessions");
  if (records.empty()) throw std::invalid_argument("evaluate_corpus: empty corpus");

  int inform_count = 0, success_count = 0;
  std::vector<std::vector<int>> candidates, references;
  for (size_t i = 0; i < records.size(); ++i) {
    const GeneratedSession& gen = records[i];
    const DialogSession& ref = sessions[i];
    bool inf = inform_for_session(gen, ref.goal, vocab, db, ont);
    bool suc = success_for_session(gen, ref.goal, vocab, db, ont);
    inform_count += inf;
    success_count += suc;
    if (verdicts) verdicts->push_back({ref.session_id, inf, suc});
    size_t turns = std::min(gen.turns.size(), ref.turns.size());
    for (size_t t = 0; t < turns; ++t) {
      candidates.push_back(gen.turns[t].response_tokens);
      references.push_back(encode_words(ref.turns[t].response, vocab,
                                        static_cast<int>(t), "response"));
    }
  }
  const double n = static_cast<double>(records.size());
  return make_metrics(100.0 * inform_count / n, 100.0 * success_count / n,
                      corpus_bleu(candidates, references),
                      static_cast<int>(records.size()));
}

}  // namespace todlab
