// Template-generated multi-domain dialog corpora.
//
// Domains share function words and dialog flow but own their slot names,
// values and placeholders; `overlap` controls the fraction of slots drawn
// from a pool common to every domain. Output is fully determined by the seed.
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "dast/corpus.hpp"
#include "dast/rng.hpp"

namespace dast::corpus {

struct SynthOptions {
  std::uint64_t seed{0};
  std::size_t domains{4};
  std::size_t dialogs_per_domain{100};
  double overlap{0.0};
  std::size_t informable_per_domain{3};
  std::size_t requestable_per_domain{2};
  std::size_t values_per_slot{4};
  std::size_t entities_per_domain{12};
};

namespace synth_detail {

inline const std::vector<std::string> kDomainNames = {
    "restaurant", "hotel", "attraction", "train", "taxi", "hospital", "museum", "cinema",
    "library", "gym", "pharmacy", "garage"};

inline const std::vector<std::string> kInformablePool = {
    "food",    "area",   "pricerange", "stars",   "parking", "internet", "day",     "people",
    "destination", "departure", "leaveat", "arriveby", "cuisine", "genre", "rating", "floor",
    "size",    "color",  "style",      "season",  "theme",   "language", "grade",   "zone"};

inline const std::vector<std::string> kRequestablePool = {
    "phone", "address", "postcode", "reference", "fee",      "openhours", "trainid", "duration",
    "email", "website", "manager",  "capacity",  "entrance", "schedule",  "license", "contact"};

// Pseudo-words that never collide with each other or with template words.
class WordMaker {
 public:
  explicit WordMaker(Rng& rng) : rng_(rng) {}
  std::string make() {
    static const std::vector<std::string> onset = {"b", "d", "f", "g", "k", "l", "m", "n",
                                                   "p", "r", "s", "t", "v", "z", "br", "kr",
                                                   "st", "tr", "gl", "pl"};
    static const std::vector<std::string> vowel = {"a", "e", "i", "o", "u", "ai", "ou"};
    for (;;) {
      std::string w;
      const std::size_t syllables = 2 + rng_.index(2);
      for (std::size_t i = 0; i < syllables; ++i) w += rng_.pick(onset) + rng_.pick(vowel);
      if (used_.insert(w).second) return w;
    }
  }

 private:
  Rng& rng_;
  std::set<std::string> used_;
};

inline std::string constraint_phrase(const std::string& slot, const std::string& value, Rng& rng) {
  switch (rng.index(4)) {
    case 0: return slot + " " + value;
    case 1: return value + " " + slot;
    case 2: return "the " + slot + " should be " + value;
    default: return value;
  }
}

}  // namespace synth_detail

inline Corpus synth_corpus(const SynthOptions& opt) {
  using namespace synth_detail;
  if (opt.domains < 2) throw std::invalid_argument("need >=2 domains");
  if (opt.informable_per_domain == 0 || opt.values_per_slot == 0 || opt.entities_per_domain == 0) {
    throw std::invalid_argument("slot, value and entity counts must be positive");
  }
  Rng rng(opt.seed, Stream::corpus);
  WordMaker words(rng);

  const std::size_t K = opt.domains;
  const auto shared_count = [&](std::size_t per_domain) {
    return static_cast<std::size_t>(std::llround(opt.overlap * static_cast<double>(per_domain)));
  };
  const std::size_t shared_inf = shared_count(opt.informable_per_domain);
  const std::size_t shared_req = shared_count(opt.requestable_per_domain);

  std::size_t inf_cursor = 0, req_cursor = 0;
  auto next_slot = [&](const std::vector<std::string>& pool, std::size_t& cursor,
                       const std::string& fallback) {
    const std::string s = cursor < pool.size() ? pool[cursor] : fallback + std::to_string(cursor);
    ++cursor;
    return s;
  };

  // Shared slots and their value sets.
  std::vector<std::pair<std::string, std::vector<std::string>>> shared_informable;
  for (std::size_t i = 0; i < shared_inf; ++i) {
    std::vector<std::string> values;
    for (std::size_t v = 0; v < opt.values_per_slot; ++v) values.push_back(words.make());
    shared_informable.emplace_back(next_slot(kInformablePool, inf_cursor, "slot"), values);
  }
  std::vector<std::string> shared_requestable;
  for (std::size_t i = 0; i < shared_req; ++i)
    shared_requestable.push_back(next_slot(kRequestablePool, req_cursor, "info"));

  Corpus c;
  for (std::size_t k = 0; k < K; ++k) {
    DomainSchema d;
    d.name = k < kDomainNames.size() ? kDomainNames[k] : "domain" + std::to_string(k);
    d.informable = shared_informable;
    for (std::size_t i = shared_inf; i < opt.informable_per_domain; ++i) {
      std::vector<std::string> values;
      for (std::size_t v = 0; v < opt.values_per_slot; ++v) values.push_back(words.make());
      d.informable.emplace_back(next_slot(kInformablePool, inf_cursor, "slot"), values);
    }
    d.requestable = shared_requestable;
    for (std::size_t i = shared_req; i < opt.requestable_per_domain; ++i)
      d.requestable.push_back(next_slot(kRequestablePool, req_cursor, "info"));
    for (std::size_t e = 0; e < opt.entities_per_domain; ++e) {
      Entity ent;
      ent[kNameSlot] = words.make() + " " + words.make();
      for (const auto& [slot, values] : d.informable) ent[slot] = rng.pick(values);
      for (const auto& slot : d.requestable) ent[slot] = words.make();
      d.db.push_back(std::move(ent));
    }
    c.domains.push_back(std::move(d));
  }

  static const std::vector<std::string> openers = {"i am looking for a", "i need a",
                                                   "can you find me a", "i want a"};
  static const std::vector<std::string> asks = {"what {s} would you like ?",
                                                "do you have a {s} preference ?",
                                                "which {s} do you want ?"};
  static const std::vector<std::string> answers = {"", "i would like ", "i prefer "};
  static const std::vector<std::string> offers = {"[value_name] is a {d} with {s} {p} .",
                                                  "i recommend [value_name] , it has {s} {p} .",
                                                  "how about [value_name] ? the {s} is {p} ."};
  static const std::vector<std::string> requests = {"what is the {r} ?", "can i get the {r} ?",
                                                    "could you tell me the {r} please ?"};
  static const std::vector<std::string> replies = {"the {r} is {p} .", "its {r} is {p} ."};
  static const std::vector<std::string> closings_user = {"thank you , goodbye", "thanks that is all"};
  static const std::vector<std::string> closings_sys = {"you are welcome , goodbye .",
                                                        "have a nice day ."};
  auto fill = [](std::string t, const std::string& key, const std::string& value) {
    for (std::size_t pos; (pos = t.find(key)) != std::string::npos;) t.replace(pos, key.size(), value);
    return t;
  };

  for (const auto& d : c.domains) {
    for (std::size_t n = 0; n < opt.dialogs_per_domain; ++n) {
      Dialog dialog;
      dialog.domain = d.name;
      const Entity& target = rng.pick(d.db);

      std::vector<std::string> slots = d.informable_names();
      rng.shuffle(slots);
      const std::size_t n_constraints = 1 + rng.index(std::min<std::size_t>(3, slots.size()));
      slots.resize(n_constraints);
      std::vector<std::string> req = d.requestable;
      rng.shuffle(req);
      req.resize(std::min<std::size_t>(req.size(), 1 + rng.index(2)));

      std::map<std::string, std::string> belief;
      std::size_t given = 0;

      // Opening turn states one or two constraints.
      {
        Turn t;
        const std::size_t first = std::min<std::size_t>(slots.size(), 1 + rng.index(2));
        std::string utt = rng.pick(openers) + " " + d.name;
        for (std::size_t i = 0; i < first; ++i) {
          utt += (i == 0 ? " with " : " and ") +
                 constraint_phrase(slots[i], target.at(slots[i]), rng);
          belief[slots[i]] = target.at(slots[i]);
        }
        given = first;
        t.user = tokenize(utt);
        t.belief = belief;
        dialog.turns.push_back(std::move(t));
      }
      // System asks for missing constraints while several entities match.
      for (;;) {
        Turn& last = dialog.turns.back();
        const auto found = db_query(belief, d);
        if (given < slots.size() && found.entities.size() > 1) {
          last.act = {{d.name, "request", slots[given]}};
          last.response_delex = tokenize(fill(rng.pick(asks), "{s}", slots[given]));
          Turn t;
          t.user = tokenize(rng.pick(answers) +
                            constraint_phrase(slots[given], target.at(slots[given]), rng));
          belief[slots[given]] = target.at(slots[given]);
          ++given;
          t.belief = belief;
          dialog.turns.push_back(std::move(t));
          continue;
        }
        const std::string& shown = slots[rng.index(given)];
        last.act = {{d.name, "inform", kNameSlot}, {d.name, "inform", shown}};
        std::string r = fill(rng.pick(offers), "{d}", d.name);
        r = fill(fill(r, "{s}", shown), "{p}", placeholder(shown));
        last.response_delex = tokenize(r);
        break;
      }
      // Requests for additional information.
      for (std::size_t i = 0; i < req.size();) {
        Turn t;
        const bool both = i + 1 < req.size() && rng.index(2) == 0;
        if (both) {
          t.user = tokenize("what is the " + req[i] + " and the " + req[i + 1] + " ?");
          t.requested = {req[i], req[i + 1]};
          t.act = {{d.name, "inform", req[i]}, {d.name, "inform", req[i + 1]}};
          t.response_delex = tokenize("the " + req[i] + " is " + placeholder(req[i]) + " and the " +
                                      req[i + 1] + " is " + placeholder(req[i + 1]) + " .");
        } else {
          t.user = tokenize(fill(rng.pick(requests), "{r}", req[i]));
          t.requested = {req[i]};
          t.act = {{d.name, "inform", req[i]}};
          t.response_delex =
              tokenize(fill(fill(rng.pick(replies), "{r}", req[i]), "{p}", placeholder(req[i])));
        }
        t.belief = belief;
        dialog.turns.push_back(std::move(t));
        i += both ? 2 : 1;
      }
      {
        Turn t;
        t.user = tokenize(rng.pick(closings_user));
        t.belief = belief;
        t.act = {{d.name, "bye", kNoSlot}};
        t.response_delex = tokenize(rng.pick(closings_sys));
        dialog.turns.push_back(std::move(t));
      }
      c.dialogs.push_back(std::move(dialog));
    }
  }
  return c;
}

}  // namespace dast::corpus
