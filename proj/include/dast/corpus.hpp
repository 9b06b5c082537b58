// Dialog data model and the corpus-level utilities around it: belief-span and
// act serialization, delexicalization, database search, vocabulary, canonical
// JSON storage and deterministic splits.
#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dast/rng.hpp"

namespace dast::corpus {

using Tokens = std::vector<std::string>;
using Entity = std::map<std::string, std::string>;  // slot -> value, "name" holds the surface name

inline const std::string kNameSlot = "name";

class CorpusError : public std::runtime_error {
 public:
  CorpusError(std::string pointer, const std::string& message)
      : std::runtime_error(pointer.empty() ? message : pointer + ": " + message),
        pointer_(std::move(pointer)) {}
  const std::string& pointer() const noexcept { return pointer_; }

 private:
  std::string pointer_;
};

// ---------------------------------------------------------------------------
// Tokens

inline Tokens tokenize(const std::string& text) {
  Tokens out;
  std::istringstream is(text);
  std::string tok;
  while (is >> tok) {
    std::transform(tok.begin(), tok.end(), tok.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    out.push_back(std::move(tok));
  }
  return out;
}

inline std::string join(const Tokens& tokens, const std::string& sep = " ") {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += sep;
    out += tokens[i];
  }
  return out;
}

inline std::string placeholder(const std::string& slot) { return "[value_" + slot + "]"; }
inline bool is_placeholder(const std::string& tok) {
  return tok.rfind("[value_", 0) == 0 && tok.back() == ']';
}
inline std::string placeholder_slot(const std::string& tok) {
  return tok.substr(7, tok.size() - 8);
}
inline std::string marker(const std::string& name) { return "[" + name + "]"; }
inline bool is_marker(const std::string& tok) {
  return tok.size() > 2 && tok.front() == '[' && tok.back() == ']' && !is_placeholder(tok);
}
inline std::string unmark(const std::string& tok) { return tok.substr(1, tok.size() - 2); }

// ---------------------------------------------------------------------------
// Schema

struct DomainSchema {
  std::string name;
  // Informable slots in declaration order, each with its finite value set.
  std::vector<std::pair<std::string, std::vector<std::string>>> informable;
  std::vector<std::string> requestable;
  std::vector<Entity> db;
  // Domains whose task has a fixed entity (no search needed) skip the inform check.
  bool default_entity{false};

  bool is_informable(const std::string& slot) const {
    return std::any_of(informable.begin(), informable.end(),
                       [&](const auto& s) { return s.first == slot; });
  }
  const std::vector<std::string>& values_of(const std::string& slot) const {
    for (const auto& s : informable)
      if (s.first == slot) return s.second;
    throw std::out_of_range("domain '" + name + "' has no informable slot '" + slot + "'");
  }
  std::vector<std::string> informable_names() const {
    std::vector<std::string> out;
    for (const auto& s : informable) out.push_back(s.first);
    return out;
  }
  std::vector<std::string> all_slots() const {
    auto out = informable_names();
    out.insert(out.end(), requestable.begin(), requestable.end());
    return out;
  }
};

// ---------------------------------------------------------------------------
// Belief state and belief spans

struct BeliefState {
  std::string domain;
  std::map<std::string, std::string> slots;

  friend bool operator==(const BeliefState&, const BeliefState&) = default;
};

// "[domain] slot1 value1 slot2 value2 ..." with slots in schema order.
inline Tokens serialize_belief_span(const BeliefState& b, const DomainSchema& schema) {
  if (b.domain != schema.name) {
    throw std::invalid_argument("belief domain '" + b.domain + "' does not match schema '" +
                                schema.name + "'");
  }
  for (const auto& [slot, value] : b.slots) {
    if (!schema.is_informable(slot)) {
      throw std::invalid_argument("unknown slot '" + slot + "' for domain '" + schema.name + "'");
    }
  }
  Tokens out{marker(schema.name)};
  for (const auto& [slot, values] : schema.informable) {
    auto it = b.slots.find(slot);
    if (it == b.slots.end()) continue;
    out.push_back(slot);
    const Tokens v = tokenize(it->second);
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

struct ParsedBelief {
  BeliefState state;
  Tokens rejects;                  // tokens that belong to no known slot
  std::vector<std::string> malformed;  // slots with an empty value
};

class BeliefParseError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Inverse of serialize_belief_span. Tokens up to the next slot name form the value.
inline ParsedBelief parse_belief_span(const Tokens& tokens,
                                      const std::vector<DomainSchema>& schemas) {
  if (tokens.empty() || !is_marker(tokens.front())) {
    throw BeliefParseError("belief span must start with a domain marker");
  }
  const std::string domain = unmark(tokens.front());
  const DomainSchema* schema = nullptr;
  for (const auto& s : schemas)
    if (s.name == domain) schema = &s;
  if (!schema) throw BeliefParseError("unknown domain marker '" + tokens.front() + "'");

  ParsedBelief out;
  out.state.domain = domain;
  std::string slot;
  Tokens value;
  auto flush = [&]() {
    if (slot.empty()) return;
    if (value.empty()) {
      out.malformed.push_back(slot);
    } else {
      out.state.slots[slot] = join(value);
    }
    slot.clear();
    value.clear();
  };
  for (std::size_t i = 1; i < tokens.size(); ++i) {
    const auto& tok = tokens[i];
    if (schema->is_informable(tok)) {
      flush();
      slot = tok;
    } else if (slot.empty()) {
      out.rejects.push_back(tok);
    } else {
      value.push_back(tok);
    }
  }
  flush();
  return out;
}

// ---------------------------------------------------------------------------
// Dialog acts

struct ActTriple {
  std::string domain;
  std::string type;
  std::string slot;  // "none" when the act carries no slot

  friend auto operator<=>(const ActTriple&, const ActTriple&) = default;
};
using DialogAct = std::vector<ActTriple>;

inline const std::string kNoSlot = "none";

// "[domain] [type] slot [type] slot ..."; the domain marker is repeated only
// when it changes.
inline Tokens serialize_act(const DialogAct& act) {
  Tokens out;
  std::string current;
  for (const auto& a : act) {
    if (a.domain != current) {
      out.push_back(marker(a.domain));
      current = a.domain;
    }
    out.push_back(marker(a.type));
    if (!a.slot.empty() && a.slot != kNoSlot) out.push_back(a.slot);
  }
  return out;
}

inline DialogAct parse_act(const Tokens& tokens, const std::set<std::string>& domain_names) {
  DialogAct out;
  std::string domain;
  for (const auto& tok : tokens) {
    if (is_marker(tok)) {
      const std::string name = unmark(tok);
      if (domain_names.count(name)) {
        domain = name;
      } else if (!domain.empty()) {
        out.push_back({domain, name, kNoSlot});
      }
    } else if (!out.empty() && out.back().slot == kNoSlot && !is_placeholder(tok)) {
      out.back().slot = tok;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Turns, dialogs, corpus

struct Turn {
  Tokens user;
  std::map<std::string, std::string> belief;  // cumulative constraints after this turn
  DialogAct act;
  Tokens response_delex;
  std::vector<std::string> requested;

  friend bool operator==(const Turn&, const Turn&) = default;
};

struct Dialog {
  std::string domain;
  std::vector<Turn> turns;

  friend bool operator==(const Dialog&, const Dialog&) = default;
};

struct Corpus {
  std::vector<DomainSchema> domains;
  std::vector<Dialog> dialogs;

  const DomainSchema& schema(const std::string& name) const {
    for (const auto& d : domains)
      if (d.name == name) return d;
    throw std::out_of_range("unknown domain '" + name + "'");
  }
  bool has_domain(const std::string& name) const {
    return std::any_of(domains.begin(), domains.end(), [&](const auto& d) { return d.name == name; });
  }
  std::vector<std::size_t> dialogs_in(const std::string& name) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < dialogs.size(); ++i)
      if (dialogs[i].domain == name) out.push_back(i);
    return out;
  }
  std::set<std::string> domain_names() const {
    std::set<std::string> out;
    for (const auto& d : domains) out.insert(d.name);
    return out;
  }
};

inline bool operator==(const DomainSchema& a, const DomainSchema& b) {
  return a.name == b.name && a.informable == b.informable && a.requestable == b.requestable &&
         a.db == b.db && a.default_entity == b.default_entity;
}
inline bool operator==(const Corpus& a, const Corpus& b) {
  return a.domains == b.domains && a.dialogs == b.dialogs;
}

// ---------------------------------------------------------------------------
// Database search

struct DbMatchVector {
  std::size_t bucket{0};
  std::vector<double> one_hot;
};

// Buckets are delimited by lower edges; the default {0,1,2,3,4} yields
// {0, 1, 2, 3, >=4}.
inline DbMatchVector match_vector(std::size_t count,
                                  const std::vector<std::size_t>& edges = {0, 1, 2, 3, 4}) {
  DbMatchVector m;
  m.one_hot.assign(edges.size(), 0.0);
  for (std::size_t i = 0; i < edges.size(); ++i)
    if (count >= edges[i]) m.bucket = i;
  m.one_hot[m.bucket] = 1.0;
  return m;
}

struct DbResult {
  std::vector<const Entity*> entities;
  DbMatchVector match;
};

inline bool entity_satisfies(const Entity& e, const std::map<std::string, std::string>& constraints) {
  for (const auto& [slot, value] : constraints) {
    auto it = e.find(slot);
    if (it == e.end() || it->second != value) return false;
  }
  return true;
}

inline DbResult db_query(const std::map<std::string, std::string>& constraints,
                         const DomainSchema& schema,
                         const std::vector<std::size_t>& edges = {0, 1, 2, 3, 4}) {
  DbResult r;
  for (const auto& e : schema.db)
    if (entity_satisfies(e, constraints)) r.entities.push_back(&e);
  r.match = match_vector(r.entities.size(), edges);
  return r;
}

inline DbResult db_query(const BeliefState& b, const DomainSchema& schema,
                         const std::vector<std::size_t>& edges = {0, 1, 2, 3, 4}) {
  return db_query(b.slots, schema, edges);
}

// ---------------------------------------------------------------------------
// Delexicalization

// Longest-match replacement of entity names and slot values by placeholders.
// The entity's own fields take precedence over schema value sets.
inline Tokens delexicalize(const Tokens& utterance, const DomainSchema& schema,
                           const Entity& entity) {
  std::map<Tokens, std::string> phrases;
  for (const auto& [slot, values] : schema.informable)
    for (const auto& v : values) phrases.emplace(tokenize(v), placeholder(slot));
  for (const auto& [slot, value] : entity) phrases[tokenize(value)] = placeholder(slot);
  phrases.erase(Tokens{});

  std::size_t longest = 0;
  for (const auto& [p, _] : phrases) longest = std::max(longest, p.size());

  Tokens out;
  for (std::size_t i = 0; i < utterance.size();) {
    bool replaced = false;
    for (std::size_t len = std::min(longest, utterance.size() - i); len > 0; --len) {
      Tokens window(utterance.begin() + static_cast<std::ptrdiff_t>(i),
                    utterance.begin() + static_cast<std::ptrdiff_t>(i + len));
      auto it = phrases.find(window);
      if (it != phrases.end()) {
        out.push_back(it->second);
        i += len;
        replaced = true;
        break;
      }
    }
    if (!replaced) out.push_back(utterance[i++]);
  }
  return out;
}

inline Tokens lexicalize(const Tokens& delex, const Entity& entity) {
  Tokens out;
  for (const auto& tok : delex) {
    if (is_placeholder(tok)) {
      auto it = entity.find(placeholder_slot(tok));
      if (it != entity.end()) {
        const Tokens v = tokenize(it->second);
        out.insert(out.end(), v.begin(), v.end());
        continue;
      }
    }
    out.push_back(tok);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

inline const std::string kPad = "<pad>";
inline const std::string kGo = "<go>";
inline const std::string kEos = "<eos>";
inline const std::string kUnk = "<unk>";
inline const std::string kSep = "<sep>";

class Vocab {
 public:
  static constexpr std::size_t pad = 0, go = 1, eos = 2, unk = 3, sep = 4;

  Vocab() {
    for (const auto& t : {kPad, kGo, kEos, kUnk, kSep}) add(t);
  }
  explicit Vocab(const std::vector<std::string>& tokens) {
    if (tokens.size() < 5 || tokens[0] != kPad || tokens[1] != kGo || tokens[2] != kEos ||
        tokens[3] != kUnk || tokens[4] != kSep) {
      throw std::invalid_argument("vocabulary must start with the reserved tokens");
    }
    for (const auto& t : tokens) add(t);
  }

  std::size_t add(const std::string& tok) {
    auto [it, inserted] = index_.try_emplace(tok, tokens_.size());
    if (inserted) tokens_.push_back(tok);
    return it->second;
  }
  std::size_t id(const std::string& tok) const {
    auto it = index_.find(tok);
    return it == index_.end() ? unk : it->second;
  }
  bool contains(const std::string& tok) const { return index_.count(tok) != 0; }
  const std::string& token(std::size_t id) const { return tokens_.at(id); }
  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  std::vector<std::size_t> ids(const Tokens& toks) const {
    std::vector<std::size_t> out;
    out.reserve(toks.size());
    for (const auto& t : toks) out.push_back(id(t));
    return out;
  }
  Tokens words(const std::vector<std::size_t>& ids) const {
    Tokens out;
    for (auto i : ids) out.push_back(token(i));
    return out;
  }
  // FNV-1a over the token list; identifies the vocabulary in checkpoints.
  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& t : tokens_) {
      for (unsigned char c : t) h = (h ^ c) * 1099511628211ULL;
      h = (h ^ 0xff) * 1099511628211ULL;
    }
    return h;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Act types always known to the vocabulary.
inline const std::vector<std::string> kActTypes = {"inform", "request", "recommend", "select",
                                                   "nooffer", "reqmore", "greet", "bye"};

inline Tokens context_tokens(const Dialog& d, std::size_t turn);

inline Vocab build_vocab(const Corpus& corpus, std::size_t min_count = 1) {
  Vocab v;
  v.add(placeholder(kNameSlot));
  for (const auto& d : corpus.domains) {
    for (const auto& s : d.all_slots()) v.add(placeholder(s));
  }
  for (const auto& d : corpus.domains) v.add(marker(d.name));
  for (const auto& t : kActTypes) v.add(marker(t));

  std::map<std::string, std::size_t> counts;
  auto count = [&](const Tokens& toks) {
    for (const auto& t : toks) ++counts[t];
  };
  for (const auto& d : corpus.domains) {
    for (const auto& s : d.all_slots()) ++counts[s];
  }
  for (const auto& dialog : corpus.dialogs) {
    for (const auto& t : dialog.turns) {
      count(t.user);
      count(t.response_delex);
      for (const auto& [slot, value] : t.belief) {
        ++counts[slot];
        count(tokenize(value));
      }
      for (const auto& a : t.act) {
        ++counts[marker(a.type)];
        if (a.slot != kNoSlot) ++counts[a.slot];
      }
    }
  }
  std::vector<std::pair<std::string, std::size_t>> ordered(counts.begin(), counts.end());
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  for (const auto& [tok, n] : ordered)
    if (n >= min_count) v.add(tok);
  return v;
}

// ---------------------------------------------------------------------------
// Context windows

// C_t = R_{t-1} + U_t (delexicalized previous system response, then the user turn).
inline Tokens context_tokens(const Dialog& d, std::size_t turn) {
  Tokens out;
  if (turn > 0) out = d.turns[turn - 1].response_delex;
  out.insert(out.end(), d.turns[turn].user.begin(), d.turns[turn].user.end());
  return out;
}

// Full-history variant: every previous user/system turn followed by U_t.
inline Tokens history_tokens(const Dialog& d, std::size_t turn) {
  Tokens out;
  for (std::size_t i = 0; i < turn; ++i) {
    out.insert(out.end(), d.turns[i].user.begin(), d.turns[i].user.end());
    out.insert(out.end(), d.turns[i].response_delex.begin(), d.turns[i].response_delex.end());
  }
  out.insert(out.end(), d.turns[turn].user.begin(), d.turns[turn].user.end());
  return out;
}

// ---------------------------------------------------------------------------
// Canonical JSON

using ordered_json = nlohmann::ordered_json;

inline ordered_json to_json(const Corpus& c) {
  ordered_json j;
  j["domains"] = ordered_json::array();
  for (const auto& d : c.domains) {
    ordered_json jd;
    jd["name"] = d.name;
    jd["informable"] = ordered_json::object();
    for (const auto& [slot, values] : d.informable) jd["informable"][slot] = values;
    jd["requestable"] = d.requestable;
    jd["db"] = ordered_json::array();
    for (const auto& e : d.db) {
      ordered_json je = ordered_json::object();
      for (const auto& [k, v] : e) je[k] = v;
      jd["db"].push_back(je);
    }
    if (d.default_entity) jd["default_entity"] = true;
    j["domains"].push_back(jd);
  }
  j["dialogs"] = ordered_json::array();
  for (const auto& dialog : c.dialogs) {
    ordered_json jd;
    jd["domain"] = dialog.domain;
    jd["turns"] = ordered_json::array();
    for (const auto& t : dialog.turns) {
      ordered_json jt;
      jt["user"] = t.user;
      jt["belief"] = ordered_json::object();
      for (const auto& [k, v] : t.belief) jt["belief"][k] = v;
      jt["act"] = ordered_json::array();
      for (const auto& a : t.act) jt["act"].push_back({a.domain, a.type, a.slot});
      jt["response_delex"] = t.response_delex;
      jt["requested"] = t.requested;
      jd["turns"].push_back(jt);
    }
    j["dialogs"].push_back(jd);
  }
  return j;
}

namespace detail {

struct Reader {
  std::vector<std::string>* warnings;

  const ordered_json& field(const ordered_json& obj, const std::string& ptr,
                            const std::string& key) const {
    if (!obj.is_object()) throw CorpusError(ptr, "expected an object");
    auto it = obj.find(key);
    if (it == obj.end()) throw CorpusError(ptr + "/" + key, "missing required field");
    return *it;
  }
  void extras(const ordered_json& obj, const std::string& ptr,
              std::initializer_list<const char*> known) const {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
      bool ok = false;
      for (const char* k : known) ok = ok || it.key() == k;
      if (!ok && warnings) warnings->push_back(ptr + "/" + it.key() + ": unknown field ignored");
    }
  }
  std::string string(const ordered_json& v, const std::string& ptr) const {
    if (!v.is_string()) throw CorpusError(ptr, "expected a string");
    return v.get<std::string>();
  }
  std::vector<std::string> strings(const ordered_json& v, const std::string& ptr) const {
    if (!v.is_array()) throw CorpusError(ptr, "expected an array of strings");
    std::vector<std::string> out;
    for (std::size_t i = 0; i < v.size(); ++i) out.push_back(string(v[i], ptr + "/" + std::to_string(i)));
    return out;
  }
};

}  // namespace detail

// Parses the canonical layout. Unknown fields are reported in `warnings`.
inline Corpus from_json(const ordered_json& j, std::vector<std::string>* warnings = nullptr) {
  detail::Reader rd{warnings};
  Corpus c;
  if (!j.is_object()) throw CorpusError("", "corpus root must be an object");
  rd.extras(j, "", {"domains", "dialogs"});
  const auto& domains = rd.field(j, "", "domains");
  if (!domains.is_array()) throw CorpusError("/domains", "expected an array");
  for (std::size_t i = 0; i < domains.size(); ++i) {
    const std::string p = "/domains/" + std::to_string(i);
    const auto& jd = domains[i];
    DomainSchema d;
    d.name = rd.string(rd.field(jd, p, "name"), p + "/name");
    const auto& inf = rd.field(jd, p, "informable");
    if (!inf.is_object()) throw CorpusError(p + "/informable", "expected an object");
    for (auto it = inf.begin(); it != inf.end(); ++it) {
      auto values = rd.strings(it.value(), p + "/informable/" + it.key());
      if (values.empty()) throw CorpusError(p + "/informable/" + it.key(), "empty value set");
      d.informable.emplace_back(it.key(), std::move(values));
    }
    d.requestable = rd.strings(rd.field(jd, p, "requestable"), p + "/requestable");
    const auto& db = rd.field(jd, p, "db");
    if (!db.is_array()) throw CorpusError(p + "/db", "expected an array");
    for (std::size_t k = 0; k < db.size(); ++k) {
      const std::string pe = p + "/db/" + std::to_string(k);
      if (!db[k].is_object()) throw CorpusError(pe, "expected an object");
      Entity e;
      for (auto it = db[k].begin(); it != db[k].end(); ++it)
        e[it.key()] = rd.string(it.value(), pe + "/" + it.key());
      for (const auto& [slot, _] : d.informable)
        if (!e.count(slot)) throw CorpusError(pe + "/" + slot, "entity misses informable slot");
      d.db.push_back(std::move(e));
    }
    if (jd.contains("default_entity")) {
      if (!jd["default_entity"].is_boolean()) throw CorpusError(p + "/default_entity", "expected a boolean");
      d.default_entity = jd["default_entity"].get<bool>();
    }
    rd.extras(jd, p, {"name", "informable", "requestable", "db", "default_entity"});
    c.domains.push_back(std::move(d));
  }
  const auto& dialogs = rd.field(j, "", "dialogs");
  if (!dialogs.is_array()) throw CorpusError("/dialogs", "expected an array");
  for (std::size_t i = 0; i < dialogs.size(); ++i) {
    const std::string p = "/dialogs/" + std::to_string(i);
    const auto& jd = dialogs[i];
    Dialog dialog;
    dialog.domain = rd.string(rd.field(jd, p, "domain"), p + "/domain");
    if (!c.has_domain(dialog.domain)) throw CorpusError(p + "/domain", "unknown domain '" + dialog.domain + "'");
    const auto& turns = rd.field(jd, p, "turns");
    if (!turns.is_array()) throw CorpusError(p + "/turns", "expected an array");
    for (std::size_t t = 0; t < turns.size(); ++t) {
      const std::string pt = p + "/turns/" + std::to_string(t);
      const auto& jt = turns[t];
      Turn turn;
      turn.user = rd.strings(rd.field(jt, pt, "user"), pt + "/user");
      const auto& belief = rd.field(jt, pt, "belief");
      if (!belief.is_object()) throw CorpusError(pt + "/belief", "expected an object");
      for (auto it = belief.begin(); it != belief.end(); ++it)
        turn.belief[it.key()] = rd.string(it.value(), pt + "/belief/" + it.key());
      const auto& act = rd.field(jt, pt, "act");
      if (!act.is_array()) throw CorpusError(pt + "/act", "expected an array");
      for (std::size_t a = 0; a < act.size(); ++a) {
        const auto triple = rd.strings(act[a], pt + "/act/" + std::to_string(a));
        if (triple.size() != 3) throw CorpusError(pt + "/act/" + std::to_string(a), "expected [domain, type, slot]");
        turn.act.push_back({triple[0], triple[1], triple[2]});
      }
      turn.response_delex = rd.strings(rd.field(jt, pt, "response_delex"), pt + "/response_delex");
      turn.requested = rd.strings(rd.field(jt, pt, "requested"), pt + "/requested");
      rd.extras(jt, pt, {"user", "belief", "act", "response_delex", "requested"});
      dialog.turns.push_back(std::move(turn));
    }
    rd.extras(jd, p, {"domain", "turns"});
    c.dialogs.push_back(std::move(dialog));
  }
  return c;
}

inline void save_corpus(const Corpus& c, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CorpusError("", "cannot open '" + path.string() + "' for writing");
  os << to_json(c).dump(1) << '\n';
}

inline Corpus load_corpus(const std::filesystem::path& path,
                          std::vector<std::string>* warnings = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CorpusError("", "cannot open '" + path.string() + "'");
  ordered_json j;
  try {
    j = ordered_json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw CorpusError("", std::string("malformed JSON: ") + e.what());
  }
  return from_json(j, warnings);
}

// ---------------------------------------------------------------------------
// Splits

struct SplitCounts {
  std::size_t adapt{0};
  std::size_t val{0};
  // Dialogs left after adapt/val go to test when `rest_to_test`, else to train.
  bool rest_to_test{false};
};

struct Split {
  std::vector<std::size_t> train, val, test, adapt;
};

// Deterministic in (seed, run); `run` selects one of several independent draws
// (e.g. repeated adaptation samples). Returned indices refer to `items`.
inline Split split_corpus(const std::vector<std::size_t>& items, const SplitCounts& counts,
                          std::uint64_t seed, std::uint64_t run = 0) {
  if (counts.adapt + counts.val > items.size()) {
    throw std::invalid_argument("split needs " + std::to_string(counts.adapt + counts.val) +
                                " dialogs but only " + std::to_string(items.size()) + " exist");
  }
  std::vector<std::size_t> order = items;
  Rng rng(seed, Stream::split, run);
  rng.shuffle(order);
  Split s;
  auto take = [&](std::size_t n, std::vector<std::size_t>& dst, std::size_t& pos) {
    dst.assign(order.begin() + static_cast<std::ptrdiff_t>(pos),
               order.begin() + static_cast<std::ptrdiff_t>(pos + n));
    std::sort(dst.begin(), dst.end());
    pos += n;
  };
  std::size_t pos = 0;
  take(counts.adapt, s.adapt, pos);
  take(counts.val, s.val, pos);
  take(order.size() - pos, counts.rest_to_test ? s.test : s.train, pos);
  return s;
}

}  // namespace dast::corpus
