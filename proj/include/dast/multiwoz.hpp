// Converter from a single-domain MultiWOZ export to the canonical corpus.
//
// Input layout (JSON):
//   {"domains": [<canonical domain schema>, ...],          optional
//    "dialogs": [{"id": "...", "domains": ["restaurant"],
//                 "turns": [{"user": "text", "system": "text",
//                            "system_delex": "text",       optional
//                            "belief": {"slot": "value"},
//                            "act": [["restaurant", "inform", "area"]],
//                            "requested": ["phone"]}]}]}
//
// Dialogs touching more than one domain are skipped and counted. When no
// schema is given for a domain it is inferred from the observed beliefs and
// requests (with an empty database).
#pragma once

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dast/corpus.hpp"

namespace dast::corpus {

struct ConversionReport {
  std::size_t converted{0};
  std::size_t skipped_multi_domain{0};
};

namespace multiwoz_detail {

inline std::vector<std::string> dialog_domains(const ordered_json& d) {
  std::vector<std::string> out;
  auto note = [&](const std::string& name) {
    if (std::find(out.begin(), out.end(), name) == out.end()) out.push_back(name);
  };
  if (d.contains("domains"))
    for (const auto& n : d["domains"]) note(n.get<std::string>());
  if (d.contains("turns"))
    for (const auto& t : d["turns"])
      if (t.contains("act"))
        for (const auto& a : t["act"])
          if (a.is_array() && !a.empty()) note(a[0].get<std::string>());
  return out;
}

inline const Entity* mentioned_entity(const Tokens& response, const DomainSchema& schema) {
  const std::string text = " " + join(response) + " ";
  for (const auto& e : schema.db) {
    auto it = e.find(kNameSlot);
    if (it != e.end() && text.find(" " + join(tokenize(it->second)) + " ") != std::string::npos)
      return &e;
  }
  return nullptr;
}

}  // namespace multiwoz_detail

inline Corpus multiwoz_adapt(const ordered_json& raw, ConversionReport* report = nullptr) {
  using namespace multiwoz_detail;
  ConversionReport rep;
  Corpus out;
  if (raw.is_object() && raw.contains("domains")) {
    Corpus schemas_only = from_json(ordered_json{{"domains", raw["domains"]}, {"dialogs", ordered_json::array()}});
    out.domains = std::move(schemas_only.domains);
  }
  const ordered_json dialogs =
      raw.is_array() ? raw : (raw.contains("dialogs") ? raw["dialogs"] : ordered_json::array());

  auto schema_for = [&](const std::string& name) -> DomainSchema& {
    for (auto& d : out.domains)
      if (d.name == name) return d;
    out.domains.push_back(DomainSchema{name, {}, {}, {}, false});
    return out.domains.back();
  };
  const std::size_t declared = out.domains.size();
  auto inferred = [&](const std::string& name) {
    for (std::size_t i = 0; i < declared; ++i)
      if (out.domains[i].name == name) return false;
    return true;
  };

  for (std::size_t i = 0; i < dialogs.size(); ++i) {
    const auto& d = dialogs[i];
    const std::vector<std::string> domains = dialog_domains(d);
    if (domains.size() != 1) {
      ++rep.skipped_multi_domain;
      continue;
    }
    const std::string& name = domains.front();
    DomainSchema& schema = schema_for(name);
    const bool infer = inferred(name);
    Dialog dialog;
    dialog.domain = name;
    for (const auto& t : d.at("turns")) {
      Turn turn;
      turn.user = tokenize(t.value("user", ""));
      if (t.contains("belief")) {
        for (auto it = t["belief"].begin(); it != t["belief"].end(); ++it) {
          const std::string value = join(tokenize(it.value().get<std::string>()));
          turn.belief[it.key()] = value;
          if (!infer) continue;
          auto slot = std::find_if(schema.informable.begin(), schema.informable.end(),
                                   [&](const auto& s) { return s.first == it.key(); });
          if (slot == schema.informable.end()) {
            schema.informable.emplace_back(it.key(), std::vector<std::string>{value});
          } else if (std::find(slot->second.begin(), slot->second.end(), value) == slot->second.end()) {
            slot->second.push_back(value);
          }
        }
      }
      if (t.contains("act"))
        for (const auto& a : t["act"])
          turn.act.push_back({a.at(0).get<std::string>(), a.at(1).get<std::string>(),
                              a.size() > 2 ? a.at(2).get<std::string>() : kNoSlot});
      if (t.contains("requested")) {
        for (const auto& r : t["requested"]) {
          turn.requested.push_back(r.get<std::string>());
          if (infer && std::find(schema.requestable.begin(), schema.requestable.end(),
                                 turn.requested.back()) == schema.requestable.end())
            schema.requestable.push_back(turn.requested.back());
        }
      }
      if (t.contains("system_delex")) {
        turn.response_delex = tokenize(t["system_delex"].get<std::string>());
      } else {
        const Tokens system = tokenize(t.value("system", ""));
        const Entity* e = mentioned_entity(system, schema);
        turn.response_delex = delexicalize(system, schema, e ? *e : Entity{});
      }
      dialog.turns.push_back(std::move(turn));
    }
    out.dialogs.push_back(std::move(dialog));
    ++rep.converted;
  }
  if (report) *report = rep;
  return out;
}

inline Corpus multiwoz_adapt(const std::filesystem::path& path, ConversionReport* report = nullptr) {
  std::ifstream is(path);
  if (!is) throw CorpusError("", "cannot open '" + path.string() + "'");
  ordered_json raw;
  try {
    raw = ordered_json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw CorpusError("", std::string("malformed JSON: ") + e.what());
  }
  return multiwoz_adapt(raw, report);
}

}  // namespace dast::corpus
