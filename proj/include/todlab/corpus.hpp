#pragma once

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "todlab/dialog.hpp"
#include "todlab/jsonio.hpp"
#include "todlab/rng.hpp"

namespace todlab {

// ---------------------------------------------------------------------------
// Ontology and database
// ---------------------------------------------------------------------------

struct DomainSchema {
  std::map<std::string, std::vector<std::string>> informable;  // slot -> values
  std::vector<std::string> requestable;
};

struct Ontology {
  std::map<std::string, DomainSchema> domains;

  bool has_domain(const std::string& d) const { return domains.count(d) > 0; }

  SlotSchema belief_slots() const {
    SlotSchema s;
    for (const auto& [d, schema] : domains) {
      auto& slots = s[d];
      for (const auto& [slot, _] : schema.informable) slots.insert(slot);
    }
    return s;
  }
};

using Entity = std::map<std::string, std::string>;  // slot -> value, has "name"

struct Database {
  std::map<std::string, std::vector<Entity>> tables;
};

struct Corpus {
  std::vector<DialogSession> sessions;
  Ontology ontology;
  Database database;
};

// ---------------------------------------------------------------------------
// Tokenization
// ---------------------------------------------------------------------------

inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream ss(text);
  std::string w;
  while (ss >> w) out.push_back(w);
  return out;
}

inline std::string join_tokens(const std::vector<std::string>& toks) {
  std::string out;
  for (size_t i = 0; i < toks.size(); ++i) {
    if (i) out += ' ';
    out += toks[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary construction
// ---------------------------------------------------------------------------

// Deterministic: reserved block first, then every corpus-reachable string in
// alphabetical order. Built over ontology + database + all provided session
// lists so train/valid/test share one id space.
inline Vocab build_vocab(const Ontology& ont, const Database& db,
                         const std::vector<const std::vector<DialogSession>*>& splits) {
  std::set<std::string> words;
  words.insert("none");
  for (const auto& [domain, schema] : ont.domains) {
    words.insert(Vocab::domain_token(domain));
    for (const auto& [slot, values] : schema.informable) {
      words.insert(slot);
      words.insert(Vocab::value_placeholder(slot));
      for (const auto& v : values)
        for (const auto& w : tokenize(v)) words.insert(w);
    }
    for (const auto& slot : schema.requestable) {
      words.insert(slot);
      words.insert(Vocab::value_placeholder(slot));
    }
  }
  for (const auto& [domain, entities] : db.tables) {
    for (const Entity& e : entities)
      for (const auto& [slot, value] : e) {
        words.insert(slot);
        words.insert(Vocab::value_placeholder(slot));
        for (const auto& w : tokenize(value)) words.insert(w);
      }
  }
  for (const auto* sessions : splits) {
    for (const DialogSession& s : *sessions) {
      for (const DialogTurn& t : s.turns) {
        for (const auto& w : t.user) words.insert(w);
        for (const auto& w : t.response) words.insert(w);
        for (const auto& w : belief_to_words(t.belief)) words.insert(w);
        for (const auto& w : act_to_words(t.act)) words.insert(w);
      }
    }
  }
  Vocab vocab;
  for (const auto& w : words) vocab.add(w);
  return vocab;
}

inline Vocab build_vocab(const Corpus& c) {
  return build_vocab(c.ontology, c.database, {&c.sessions});
}

// ---------------------------------------------------------------------------
// Database queries
// ---------------------------------------------------------------------------

// Entities of the belief's active domain satisfying every constraint by exact
// string match. Constraint slots outside the ontology's informable set for
// the domain are ignored and reported.
inline std::vector<const Entity*> query_entities(
    const BeliefState& belief, const Database& db, const Ontology& ont,
    std::vector<std::string>* diagnostics = nullptr) {
  std::string domain = belief.resolve_active_domain();
  if (domain.empty() && !db.tables.empty()) domain = db.tables.begin()->first;
  auto table_it = db.tables.find(domain);
  if (table_it == db.tables.end()) return {};

  std::map<std::string, std::string> constraints;
  auto c_it = belief.constraints.find(domain);
  if (c_it != belief.constraints.end()) {
    const std::set<std::string>* known = nullptr;
    auto o_it = ont.domains.find(domain);
    std::set<std::string> known_set;
    if (o_it != ont.domains.end()) {
      for (const auto& [slot, _] : o_it->second.informable) known_set.insert(slot);
      known = &known_set;
    }
    for (const auto& [slot, value] : c_it->second) {
      if (known && !known->count(slot)) {
        if (diagnostics)
          diagnostics->push_back("ignored unknown slot '" + slot + "' in domain '" +
                                 domain + "'");
        continue;
      }
      constraints[slot] = value;
    }
  }

  std::vector<const Entity*> out;
  for (const Entity& e : table_it->second) {
    bool ok = true;
    for (const auto& [slot, value] : constraints) {
      auto s_it = e.find(slot);
      if (s_it == e.end() || s_it->second != value) {
        ok = false;
        break;
      }
    }
    if (ok) out.push_back(&e);
  }
  return out;
}

inline DbResult db_query(const BeliefState& belief, const Database& db,
                         const Ontology& ont,
                         std::vector<std::string>* diagnostics = nullptr) {
  size_t n = query_entities(belief, db, ont, diagnostics).size();
  DbResult r;
  r.bucket = bucket_from_count(n);
  r.booking_ok = n >= 1;
  return r;
}

// ---------------------------------------------------------------------------
// Delexicalization
// ---------------------------------------------------------------------------

// Replaces every maximal token run equal to an entity slot value or a belief
// value with [value_<slot>], longest match first, left to right. Unmatched
// text passes through; placeholders are never values, so the map is
// idempotent.
inline std::vector<std::string> delexicalize(const std::string& raw_response,
                                             const Entity& matched_entity,
                                             const BeliefState& belief,
                                             const Ontology& ont) {
  (void)ont;
  struct Candidate {
    std::vector<std::string> words;
    std::string slot;
    int priority;  // entity values first, then belief values
  };
  std::vector<Candidate> cands;
  for (const auto& [slot, value] : matched_entity) {
    auto w = tokenize(value);
    if (!w.empty()) cands.push_back({std::move(w), slot, 0});
  }
  for (const auto& [domain, slots] : belief.constraints) {
    for (const auto& [slot, value] : slots) {
      auto w = tokenize(value);
      if (!w.empty()) cands.push_back({std::move(w), slot, 1});
    }
  }
  std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    if (a.words.size() != b.words.size()) return a.words.size() > b.words.size();
    if (a.priority != b.priority) return a.priority < b.priority;
    return a.slot < b.slot;
  });

  std::vector<std::string> toks = tokenize(raw_response);
  std::vector<std::string> out;
  size_t i = 0;
  while (i < toks.size()) {
    const Candidate* hit = nullptr;
    for (const Candidate& c : cands) {
      if (i + c.words.size() > toks.size()) continue;
      bool match = true;
      for (size_t k = 0; k < c.words.size(); ++k) {
        if (toks[i + k] != c.words[k]) {
          match = false;
          break;
        }
      }
      if (match) {
        hit = &c;
        break;
      }
    }
    if (hit) {
      out.push_back(Vocab::value_placeholder(hit->slot));
      i += hit->words.size();
    } else {
      out.push_back(toks[i]);
      ++i;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus JSON I/O
// ---------------------------------------------------------------------------
//
// Schema (UTF-8, strict, extra fields rejected):
// {
//   "ontology": { domain: {"informable": {slot: [value,...]},
//                          "requestable": [slot,...]} },
//   "database": { domain: [ {slot: value, ...}, ... ] },
//   "sessions": [ {"session_id": str,
//                  "goal": {domain: {"constraints": {slot: value},
//                                    "requests": [slot,...]}},
//                  "turns": [ {"user": str,
//                              "belief": {domain: {slot: value}},
//                              "db": {"bucket": "0"|"1"|"2"|"3"|">3",
//                                     "booking_ok": bool},
//                              "act": [[domain, act, slot], ...],
//                              "response": str}, ... ]}, ... ]
// }

namespace detail {

inline Ontology parse_ontology(const json& j, const std::string& where) {
  require_object(j, where);
  Ontology ont;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string dwhere = where + "/" + it.key();
    require_keys(*it, dwhere, {"informable", "requestable"});
    DomainSchema schema;
    const json& inf = get_field(*it, "informable", dwhere);
    require_object(inf, dwhere + "/informable");
    for (auto s = inf.begin(); s != inf.end(); ++s) {
      if (!s->is_array() || s->empty())
        throw SchemaError(dwhere + "/informable/" + s.key(),
                          "expected a non-empty value array");
      std::vector<std::string> values;
      for (const auto& v : *s) {
        if (!v.is_string())
          throw SchemaError(dwhere + "/informable/" + s.key(), "values must be strings");
        values.push_back(v.get<std::string>());
      }
      if (schema.informable.count(s.key()))
        throw SchemaError(dwhere, "duplicate slot '" + s.key() + "'");
      schema.informable[s.key()] = std::move(values);
    }
    const json& req = get_field(*it, "requestable", dwhere);
    if (!req.is_array()) throw SchemaError(dwhere + "/requestable", "expected an array");
    for (const auto& r : req) {
      if (!r.is_string()) throw SchemaError(dwhere + "/requestable", "slots must be strings");
      schema.requestable.push_back(r.get<std::string>());
    }
    ont.domains[it.key()] = std::move(schema);
  }
  return ont;
}

inline Database parse_database(const json& j, const Ontology& ont,
                               const std::string& where) {
  require_object(j, where);
  Database db;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string dwhere = where + "/" + it.key();
    if (!ont.has_domain(it.key()))
      throw SchemaError(dwhere, "database domain not in ontology");
    if (!it->is_array()) throw SchemaError(dwhere, "expected an entity array");
    const DomainSchema& schema = ont.domains.at(it.key());
    std::vector<Entity> entities;
    for (size_t i = 0; i < it->size(); ++i) {
      const json& je = (*it)[i];
      const std::string ewhere = dwhere + "/" + std::to_string(i);
      require_object(je, ewhere);
      Entity e;
      for (auto f = je.begin(); f != je.end(); ++f) {
        if (!f->is_string()) throw SchemaError(ewhere + "/" + f.key(), "expected a string");
        e[f.key()] = f->get<std::string>();
      }
      if (!e.count("name")) throw SchemaError(ewhere, "entity missing 'name' slot");
      for (const auto& [slot, value] : e) {
        auto s_it = schema.informable.find(slot);
        if (s_it == schema.informable.end()) continue;  // attribute slot
        const auto& values = s_it->second;
        if (std::find(values.begin(), values.end(), value) == values.end())
          throw SchemaError(ewhere + "/" + slot,
                            "value '" + value + "' not in ontology value set");
      }
      entities.push_back(std::move(e));
    }
    db.tables[it.key()] = std::move(entities);
  }
  return db;
}

inline BeliefState parse_belief_json(const json& j, const Ontology& ont,
                                     const std::string& where) {
  require_object(j, where);
  BeliefState b;
  for (auto d = j.begin(); d != j.end(); ++d) {
    auto o_it = ont.domains.find(d.key());
    if (o_it == ont.domains.end())
      throw SchemaError(where + "/" + d.key(), "unknown belief domain");
    require_object(*d, where + "/" + d.key());
    for (auto s = d->begin(); s != d->end(); ++s) {
      if (!o_it->second.informable.count(s.key()))
        throw SchemaError(where + "/" + d.key() + "/" + s.key(),
                          "unknown belief slot");
      if (!s->is_string() || s->get<std::string>().empty())
        throw SchemaError(where + "/" + d.key() + "/" + s.key(),
                          "expected a non-empty string value");
      b.constraints[d.key()][s.key()] = s->get<std::string>();
    }
  }
  return b;
}

// Active domain annotation: the last domain (in canonical order) whose
// constraints differ from the previous turn's; carried forward when nothing
// changed.
inline void annotate_active_domains(DialogSession& s) {
  const BeliefState* prev = nullptr;
  std::string active;
  for (DialogTurn& t : s.turns) {
    std::string changed;
    for (const auto& [domain, slots] : t.belief.constraints) {
      bool differs = true;
      if (prev) {
        auto p = prev->constraints.find(domain);
        differs = (p == prev->constraints.end()) || (p->second != slots);
      }
      if (differs) changed = domain;
    }
    if (!changed.empty()) active = changed;
    t.belief.active_domain = active;
    prev = &t.belief;
  }
}

inline DialogSession parse_session(const json& j, const Ontology& ont,
                                   const std::string& where) {
  require_keys(j, where, {"session_id", "goal", "turns"});
  DialogSession s;
  s.session_id = get_string(j, "session_id", where);
  const std::string swhere = where + "(" + s.session_id + ")";

  const json& goal = get_field(j, "goal", swhere);
  require_object(goal, swhere + "/goal");
  for (auto d = goal.begin(); d != goal.end(); ++d) {
    if (!ont.has_domain(d.key()))
      throw SchemaError(swhere + "/goal/" + d.key(), "unknown goal domain");
    require_keys(*d, swhere + "/goal/" + d.key(), {"constraints", "requests"});
    GoalDomain gd;
    const json& cons = get_field(*d, "constraints", swhere);
    require_object(cons, swhere + "/goal/" + d.key() + "/constraints");
    for (auto c = cons.begin(); c != cons.end(); ++c) {
      if (!ont.domains.at(d.key()).informable.count(c.key()))
        throw SchemaError(swhere + "/goal/" + d.key() + "/constraints/" + c.key(),
                          "unknown goal slot");
      if (!c->is_string())
        throw SchemaError(swhere + "/goal/" + d.key() + "/constraints/" + c.key(),
                          "expected a string");
      gd.constraints[c.key()] = c->get<std::string>();
    }
    const json& reqs = get_field(*d, "requests", swhere);
    if (!reqs.is_array())
      throw SchemaError(swhere + "/goal/" + d.key() + "/requests", "expected an array");
    for (const auto& r : reqs) {
      if (!r.is_string())
        throw SchemaError(swhere + "/goal/" + d.key() + "/requests",
                          "slots must be strings");
      gd.requests.push_back(r.get<std::string>());
    }
    s.goal.domains[d.key()] = std::move(gd);
  }

  const json& turns = get_field(j, "turns", swhere);
  if (!turns.is_array() || turns.empty())
    throw SchemaError(swhere + "/turns", "expected a non-empty turn array");
  for (size_t i = 0; i < turns.size(); ++i) {
    const std::string twhere = swhere + "/turns/" + std::to_string(i);
    const json& jt = turns[i];
    require_keys(jt, twhere, {"user", "belief", "db", "act", "response"});
    DialogTurn t;
    t.index = static_cast<int>(i);
    t.user = tokenize(get_string(jt, "user", twhere));
    t.belief = parse_belief_json(get_field(jt, "belief", twhere), ont, twhere + "/belief");
    const json& jdb = get_field(jt, "db", twhere);
    require_keys(jdb, twhere + "/db", {"bucket", "booking_ok"});
    auto bucket = bucket_from_label(get_string(jdb, "bucket", twhere + "/db"));
    if (!bucket)
      throw SchemaError(twhere + "/db/bucket", "expected one of 0,1,2,3,>3");
    t.db.bucket = *bucket;
    t.db.booking_ok = get_bool(jdb, "booking_ok", twhere + "/db");
    const json& jact = get_field(jt, "act", twhere);
    if (!jact.is_array()) throw SchemaError(twhere + "/act", "expected an array");
    for (const auto& triple : jact) {
      if (!triple.is_array() || triple.size() != 3)
        throw SchemaError(twhere + "/act", "each act must be [domain, act, slot]");
      ActTriple at;
      at.domain = triple[0].get<std::string>();
      if (!ont.has_domain(at.domain))
        throw SchemaError(twhere + "/act", "unknown act domain '" + at.domain + "'");
      auto a = act_from_name(triple[1].get<std::string>());
      if (!a)
        throw SchemaError(twhere + "/act",
                          "unknown act type '" + triple[1].get<std::string>() + "'");
      at.act = *a;
      at.slot = triple[2].get<std::string>();
      t.act.triples.push_back(std::move(at));
    }
    t.response = tokenize(get_string(jt, "response", twhere));
    for (const auto& w : t.response) {
      if (w.front() == '[' && w.rfind("[value_", 0) != 0)
        throw SchemaError(twhere + "/response",
                          "bracketed token '" + w + "' is not a [value_*] placeholder");
    }
    s.turns.push_back(std::move(t));
  }
  annotate_active_domains(s);
  return s;
}

}  // namespace detail

inline Corpus corpus_from_json(const json& j, const std::string& where) {
  require_keys(j, where, {"ontology", "database", "sessions"});
  Corpus c;
  c.ontology = detail::parse_ontology(get_field(j, "ontology", where), where + "/ontology");
  c.database =
      detail::parse_database(get_field(j, "database", where), c.ontology, where + "/database");
  const json& sessions = get_field(j, "sessions", where);
  if (!sessions.is_array()) throw SchemaError(where + "/sessions", "expected an array");
  for (size_t i = 0; i < sessions.size(); ++i) {
    c.sessions.push_back(detail::parse_session(
        sessions[i], c.ontology, where + "/sessions/" + std::to_string(i)));
  }
  return c;
}

inline Corpus load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError(path, "cannot open file");
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw SchemaError(path, std::string("invalid JSON: ") + e.what());
  }
  return corpus_from_json(j, path);
}

inline json corpus_to_json(const Corpus& c) {
  json j;
  json ont = json::object();
  for (const auto& [domain, schema] : c.ontology.domains) {
    json inf = json::object();
    for (const auto& [slot, values] : schema.informable) inf[slot] = values;
    ont[domain] = {{"informable", inf}, {"requestable", schema.requestable}};
  }
  j["ontology"] = ont;
  json db = json::object();
  for (const auto& [domain, entities] : c.database.tables) {
    json arr = json::array();
    for (const Entity& e : entities) {
      json je = json::object();
      for (const auto& [slot, value] : e) je[slot] = value;
      arr.push_back(je);
    }
    db[domain] = arr;
  }
  j["database"] = db;
  json sessions = json::array();
  for (const DialogSession& s : c.sessions) {
    json js;
    js["session_id"] = s.session_id;
    json goal = json::object();
    for (const auto& [domain, gd] : s.goal.domains) {
      json cons = json::object();
      for (const auto& [slot, value] : gd.constraints) cons[slot] = value;
      goal[domain] = {{"constraints", cons}, {"requests", gd.requests}};
    }
    js["goal"] = goal;
    json turns = json::array();
    for (const DialogTurn& t : s.turns) {
      json jt;
      jt["user"] = join_tokens(t.user);
      json belief = json::object();
      for (const auto& [domain, slots] : t.belief.constraints) {
        json jd = json::object();
        for (const auto& [slot, value] : slots) jd[slot] = value;
        belief[domain] = jd;
      }
      jt["belief"] = belief;
      jt["db"] = {{"bucket", bucket_label(t.db.bucket)}, {"booking_ok", t.db.booking_ok}};
      json acts = json::array();
      for (const ActTriple& a : t.act.triples)
        acts.push_back({a.domain, act_name(a.act), a.slot});
      jt["act"] = acts;
      jt["response"] = join_tokens(t.response);
      turns.push_back(jt);
    }
    js["turns"] = turns;
    sessions.push_back(js);
  }
  j["sessions"] = sessions;
  return j;
}

inline void save_corpus(const Corpus& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << corpus_to_json(c).dump(1) << "\n";
}

// ---------------------------------------------------------------------------
// Synthetic mini-world
// ---------------------------------------------------------------------------

struct SyntheticWorldConfig {
  int n_domains = 2;
  int slots_per_domain = 3;
  int entities_per_domain = 8;
  int values_per_slot = 4;
  int n_sessions = 500;
  int min_turns = 1;
  int max_turns = 4;
  uint64_t grammar_seed = 7;

  void validate() const {
    if (n_domains < 1 || slots_per_domain < 1 || entities_per_domain < 1 ||
        values_per_slot < 1 || n_sessions < 1 || min_turns < 1 ||
        max_turns < min_turns)
      throw std::invalid_argument("invalid synthetic world config");
  }
};

namespace detail {

inline const std::vector<std::string>& domain_pool() {
  static const std::vector<std::string> pool = {
      "arcade", "bakery", "cinema", "diner",  "florist", "garage",
      "hostel", "library", "market", "parlor", "salon",  "tavern"};
  return pool;
}

struct SlotPool {
  std::string name;
  std::vector<std::string> values;
};

inline const std::vector<SlotPool>& slot_pools() {
  static const std::vector<SlotPool> pools = {
      {"area", {"north", "south", "east", "west", "centre", "riverside", "uptown", "downtown"}},
      {"price", {"cheap", "moderate", "expensive", "premium", "budget", "lavish"}},
      {"kind", {"classic", "modern", "rustic", "retro", "artisan", "standard"}},
      {"size", {"small", "medium", "large", "grand", "cozy", "vast"}},
      {"rating", {"bronze", "silver", "gold", "platinum", "basic", "stellar"}},
      {"color", {"red", "blue", "green", "amber", "ivory", "slate"}}};
  return pools;
}

inline std::string synth_domain_name(int i) {
  const auto& pool = domain_pool();
  if (i < static_cast<int>(pool.size())) return pool[i];
  return "domain" + std::to_string(i);
}

inline SlotPool synth_slot(int domain_idx, int slot_idx, int values_per_slot) {
  const auto& pools = slot_pools();
  int p = (domain_idx + slot_idx) % static_cast<int>(pools.size());
  SlotPool out;
  if (slot_idx < static_cast<int>(pools.size())) {
    out.name = pools[p].name;
    for (int v = 0; v < values_per_slot; ++v) {
      if (v < static_cast<int>(pools[p].values.size()))
        out.values.push_back(pools[p].values[v]);
      else
        out.values.push_back(pools[p].name + "opt" + std::to_string(v));
    }
  } else {
    out.name = "feat" + std::to_string(slot_idx);
    for (int v = 0; v < values_per_slot; ++v)
      out.values.push_back(out.name + "v" + std::to_string(v));
  }
  return out;
}

inline std::string synth_entity_name(int i) {
  static const std::vector<std::string> adj = {"amber", "pine", "mill", "iron", "dove",
                                               "fern",  "clay", "wren", "blue", "oak"};
  static const std::vector<std::string> noun = {"fox",    "house",  "garden", "corner",
                                                "lodge",  "works",  "anchor", "bridge",
                                                "lantern", "yard"};
  std::string name = adj[i % 10] + " " + noun[(i / 10) % 10];
  if (i >= 100) name += " " + std::to_string(i / 100);
  return name;
}

}  // namespace detail

// Internally consistent synthetic corpus: beliefs accumulate user constraints
// monotonically, every annotated DB result equals db_query of the annotated
// belief, acts/responses come from a fixed template grammar, goals are
// recorded for evaluation. Pure function of (config, seed).
inline Corpus generate_synthetic_corpus(const SyntheticWorldConfig& cfg, uint64_t seed) {
  cfg.validate();
  Corpus c;
  Rng world_rng(derive_seed(seed ^ cfg.grammar_seed, "world"));

  // ontology + database
  for (int d = 0; d < cfg.n_domains; ++d) {
    std::string dname = detail::synth_domain_name(d);
    DomainSchema schema;
    std::vector<detail::SlotPool> slots;
    for (int s = 0; s < cfg.slots_per_domain; ++s) {
      auto sp = detail::synth_slot(d, s, cfg.values_per_slot);
      schema.informable[sp.name] = sp.values;
      slots.push_back(std::move(sp));
    }
    schema.requestable = {"name", "phone", "post"};
    c.ontology.domains[dname] = schema;

    std::vector<Entity> entities;
    for (int e = 0; e < cfg.entities_per_domain; ++e) {
      Entity ent;
      ent["name"] = detail::synth_entity_name(e);
      for (const auto& [slot, values] : c.ontology.domains[dname].informable)
        ent[slot] = values[world_rng.below(values.size())];
      ent["phone"] = "0" + std::to_string(100000 + static_cast<int>(world_rng.below(900000)));
      ent["post"] = "cb" + std::to_string(10 + static_cast<int>(world_rng.below(90))) +
                    std::string(1, static_cast<char>('a' + world_rng.below(26)));
      entities.push_back(std::move(ent));
    }
    c.database.tables[dname] = std::move(entities);
  }

  // template grammar
  auto pick = [](Rng& r, const std::vector<std::string>& v) {
    return v[r.below(v.size())];
  };
  const std::vector<std::string> user_open = {
      "i am looking for a DOMAIN", "i need a DOMAIN please", "can you find me a DOMAIN",
      "hello i want a DOMAIN"};
  const std::vector<std::string> user_constraint = {
      "it should be VALUE", "i would like something VALUE", "make it VALUE",
      "VALUE would be best"};
  const std::vector<std::string> user_request = {
      "can i get the REQS", "what is the REQS", "please give me the REQS",
      "i need the REQS"};
  const std::vector<std::string> sys_ask = {
      "what SLOT do you prefer", "do you have a SLOT in mind",
      "which SLOT would you like", "any preference on SLOT"};
  const std::vector<std::string> sys_offer = {
      "i recommend [value_name]", "how about [value_name]",
      "[value_name] is a great choice", "you could try [value_name]"};

  Rng session_rng(derive_seed(seed, "sessions"));
  for (int si = 0; si < cfg.n_sessions; ++si) {
    Rng rng(derive_seed(seed, "session", static_cast<uint64_t>(si)));
    DialogSession s;
    {
      std::ostringstream id;
      id << "syn" << std::setw(5) << std::setfill('0') << si;
      s.session_id = id.str();
    }
    int n_goal_domains = (cfg.n_domains >= 2 && rng.uniform() < 0.25) ? 2 : 1;
    std::vector<int> domain_ids;
    {
      std::vector<int> all(cfg.n_domains);
      for (int i = 0; i < cfg.n_domains; ++i) all[i] = i;
      rng.shuffle(all);
      for (int i = 0; i < n_goal_domains; ++i) domain_ids.push_back(all[i]);
    }

    BeliefState belief;  // accumulates across the whole session
    int turn_index = 0;
    for (int gd = 0; gd < n_goal_domains; ++gd) {
      std::string dname = detail::synth_domain_name(domain_ids[gd]);
      const DomainSchema& schema = c.ontology.domains[dname];
      const auto& table = c.database.tables[dname];
      const Entity& target = table[rng.below(table.size())];

      // goal: 1..2 constraints drawn from the target entity, 1..2 requests
      std::vector<std::string> slot_names;
      for (const auto& [slot, _] : schema.informable) slot_names.push_back(slot);
      rng.shuffle(slot_names);
      int n_cons = 1 + static_cast<int>(rng.below(
                           std::min<size_t>(2, slot_names.size())));
      GoalDomain goal;
      std::vector<std::pair<std::string, std::string>> cons;
      for (int i = 0; i < n_cons; ++i) {
        const std::string& slot = slot_names[i];
        goal.constraints[slot] = target.at(slot);
        cons.push_back({slot, target.at(slot)});
      }
      std::vector<std::string> reqs = {"phone", "post"};
      rng.shuffle(reqs);
      int n_reqs = 1 + static_cast<int>(rng.below(2));
      reqs.resize(n_reqs);
      std::sort(reqs.begin(), reqs.end());
      goal.requests = reqs;
      s.goal.domains[dname] = goal;

      // turn plan: constraint turns then the offer/answer, within the
      // per-domain share of the configured turn budget
      int budget = std::max(1, cfg.max_turns / n_goal_domains);
      int want = std::max(1, (cfg.min_turns + n_goal_domains - 1) / n_goal_domains);
      int cons_turns = 1 + static_cast<int>(rng.below(
                               std::min<uint64_t>(n_cons, std::max(1, budget - 1)) ));
      bool separate_offer = budget > cons_turns && (want > cons_turns || rng.bernoulli(0.5));
      std::vector<std::vector<std::pair<std::string, std::string>>> batches(cons_turns);
      for (size_t i = 0; i < cons.size(); ++i) batches[i % cons_turns].push_back(cons[i]);

      auto make_request_utterance = [&](Rng& r) {
        std::string ru = pick(r, user_request);
        std::string reqlist;
        for (size_t i = 0; i < reqs.size(); ++i) {
          if (i) reqlist += " and ";
          reqlist += reqs[i];
        }
        ru.replace(ru.find("REQS"), 4, reqlist);
        return ru;
      };
      auto fill_offer = [&](DialogTurn& t, Rng& r) {
        t.act.triples.push_back({dname, ActType::Recommend, "name"});
        std::string resp = pick(r, sys_offer);
        for (const auto& rq : reqs) {
          t.act.triples.push_back({dname, ActType::Inform, rq});
          resp += " the " + rq + " is " + Vocab::value_placeholder(rq);
        }
        t.response = tokenize(resp);
      };

      for (int ct = 0; ct < cons_turns; ++ct) {
        DialogTurn t;
        t.index = turn_index++;
        std::string utter;
        if (ct == 0) {
          utter = pick(rng, user_open);
          utter.replace(utter.find("DOMAIN"), 6, dname);
        }
        for (const auto& [slot, value] : batches[ct]) {
          std::string part = pick(rng, user_constraint);
          part.replace(part.find("VALUE"), 5, value);
          if (!utter.empty()) utter += " ";
          utter += part;
          belief.set(dname, slot, value);
        }
        bool last_cons = (ct + 1 == cons_turns);
        if (last_cons && !separate_offer) {
          utter += " " + make_request_utterance(rng);
        }
        t.user = tokenize(utter);
        t.belief = belief;
        t.db = db_query(t.belief, c.database, c.ontology);
        if (!last_cons) {
          const std::string& next_slot = batches[ct + 1].front().first;
          t.act.triples.push_back({dname, ActType::Request, next_slot});
          std::string resp = pick(rng, sys_ask);
          resp.replace(resp.find("SLOT"), 4, next_slot);
          t.response = tokenize(resp);
        } else if (separate_offer) {
          // acknowledge; the offer arrives in its own turn
          const std::string& slot0 = batches[ct].empty()
                                         ? slot_names.front()
                                         : batches[ct].front().first;
          t.act.triples.push_back({dname, ActType::Select, slot0});
          t.response = tokenize("sure i can look that up for you");
        } else {
          fill_offer(t, rng);
        }
        s.turns.push_back(std::move(t));
      }
      if (separate_offer) {
        DialogTurn t;
        t.index = turn_index++;
        t.user = tokenize(make_request_utterance(rng));
        t.belief = belief;
        t.db = db_query(t.belief, c.database, c.ontology);
        fill_offer(t, rng);
        s.turns.push_back(std::move(t));
      }
    }
    detail::annotate_active_domains(s);
    c.sessions.push_back(std::move(s));
  }
  (void)session_rng;
  return c;
}

// ---------------------------------------------------------------------------
// Domain splits
// ---------------------------------------------------------------------------

struct DomainSplits {
  std::vector<DialogSession> train;
  std::vector<DialogSession> fewshot;
  std::vector<DialogSession> eval_in;
  std::vector<DialogSession> eval_new;
};

// Partitions sessions for domain-transfer experiments. Sessions touching the
// excluded domain: the first k_shot become the few-shot split, the rest the
// new-domain eval split. Sessions not touching it: the trailing
// eval_in_fraction become the in-domain eval split, the rest train.
inline DomainSplits split_by_domain(const std::vector<DialogSession>& sessions,
                                    const std::string& excluded_domain, int k_shot,
                                    double eval_in_fraction = 0.1) {
  if (k_shot < 0) throw std::invalid_argument("k_shot must be >= 0");
  DomainSplits out;
  std::vector<DialogSession> touching, rest;
  for (const auto& s : sessions) {
    if (s.goal.domains.count(excluded_domain)) touching.push_back(s);
    else rest.push_back(s);
  }
  if (static_cast<int>(touching.size()) < k_shot)
    throw std::runtime_error("only " + std::to_string(touching.size()) +
                             " sessions touch domain '" + excluded_domain +
                             "', need k_shot=" + std::to_string(k_shot));
  out.fewshot.assign(touching.begin(), touching.begin() + k_shot);
  out.eval_new.assign(touching.begin() + k_shot, touching.end());
  size_t n_eval_in = 0;
  if (eval_in_fraction > 0.0 && !rest.empty()) {
    n_eval_in = std::min(rest.size(),
                         std::max<size_t>(1, static_cast<size_t>(
                                                 rest.size() * eval_in_fraction + 0.5)));
  }
  out.train.assign(rest.begin(), rest.end() - n_eval_in);
  out.eval_in.assign(rest.end() - n_eval_in, rest.end());
  return out;
}

}  // namespace todlab
