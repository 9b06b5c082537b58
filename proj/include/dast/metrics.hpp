// Dialog evaluation: Inform and Success rates, corpus BLEU-4, Slot F1 and
// Act F1, plus multi-run aggregation and report writers.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "dast/corpus.hpp"
#include "dast/student.hpp"

namespace dast::metrics {

using corpus::Tokens;

// ---------------------------------------------------------------- BLEU

namespace detail {
inline std::map<Tokens, std::size_t> ngram_counts(const Tokens& t, std::size_t n) {
  std::map<Tokens, std::size_t> out;
  for (std::size_t i = 0; i + n <= t.size(); ++i) ++out[Tokens(t.begin() + i, t.begin() + i + n)];
  return out;
}
}  // namespace detail

// Corpus BLEU-4 with one reference per candidate. Unigram precision is
// unsmoothed; higher orders use (matches + 1) / (total + 1).
inline double bleu(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references) {
  if (candidates.size() != references.size())
    throw std::invalid_argument("bleu: candidate and reference counts differ");
  constexpr std::size_t N = 4;
  double matches[N] = {}, totals[N] = {};
  double cand_len = 0, ref_len = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    cand_len += static_cast<double>(candidates[i].size());
    ref_len += static_cast<double>(references[i].size());
    for (std::size_t n = 1; n <= N; ++n) {
      const auto c = detail::ngram_counts(candidates[i], n);
      const auto r = detail::ngram_counts(references[i], n);
      for (const auto& [g, k] : c) {
        totals[n - 1] += static_cast<double>(k);
        auto it = r.find(g);
        if (it != r.end()) matches[n - 1] += static_cast<double>(std::min(k, it->second));
      }
    }
  }
  if (cand_len == 0 || matches[0] == 0) return 0.0;
  double log_p = std::log(matches[0] / totals[0]);
  for (std::size_t n = 1; n < N; ++n) log_p += std::log((matches[n] + 1.0) / (totals[n] + 1.0));
  const double bp = cand_len >= ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
  return bp * std::exp(log_p / static_cast<double>(N));
}

// ---------------------------------------------------------------- F1

struct Counts {
  double tp{0}, fp{0}, fn{0};
  Counts& operator+=(const Counts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  double precision() const { return tp + fp == 0 ? 1.0 : tp / (tp + fp); }
  double recall() const { return tp + fn == 0 ? 1.0 : tp / (tp + fn); }
  // Empty against empty is a perfect match.
  double f1() const { return tp + fp + fn == 0 ? 1.0 : 2.0 * tp / (2.0 * tp + fp + fn); }
};

template <class T>
Counts set_counts(const std::set<T>& pred, const std::set<T>& gold) {
  Counts c;
  for (const auto& x : pred) (gold.count(x) ? c.tp : c.fp) += 1;
  for (const auto& x : gold)
    if (!pred.count(x)) c.fn += 1;
  return c;
}

using SlotTriple = std::tuple<std::string, std::string, std::string>;

inline std::set<SlotTriple> slot_triples(const corpus::BeliefState& b) {
  std::set<SlotTriple> out;
  for (const auto& [slot, value] : b.slots) out.insert({b.domain, slot, value});
  return out;
}

// Counts for one generated belief span. Tokens outside any slot and slots
// without a value are false positives; an unparsable span counts as one.
inline Counts belief_counts(const Tokens& generated, const corpus::BeliefState& gold,
                            const std::vector<corpus::DomainSchema>& schemas) {
  const auto g = slot_triples(gold);
  if (generated.empty()) return set_counts<SlotTriple>({}, g);
  try {
    const auto parsed = corpus::parse_belief_span(generated, schemas);
    Counts c = set_counts(slot_triples(parsed.state), g);
    c.fp += static_cast<double>(parsed.rejects.size() + parsed.malformed.size());
    return c;
  } catch (const corpus::BeliefParseError&) {
    Counts c = set_counts<SlotTriple>({}, g);
    c.fp += 1;
    return c;
  }
}

inline double slot_f1(const std::vector<corpus::BeliefState>& pred,
                      const std::vector<corpus::BeliefState>& gold) {
  if (pred.size() != gold.size()) throw std::invalid_argument("slot_f1: turn counts differ");
  Counts c;
  for (std::size_t i = 0; i < pred.size(); ++i) c += set_counts(slot_triples(pred[i]), slot_triples(gold[i]));
  return c.f1();
}

inline Counts act_counts(const corpus::DialogAct& pred, const corpus::DialogAct& gold) {
  return set_counts(std::set<corpus::ActTriple>(pred.begin(), pred.end()),
                    std::set<corpus::ActTriple>(gold.begin(), gold.end()));
}

inline double act_f1(const std::vector<corpus::DialogAct>& pred,
                     const std::vector<corpus::DialogAct>& gold) {
  if (pred.size() != gold.size()) throw std::invalid_argument("act_f1: turn counts differ");
  Counts c;
  for (std::size_t i = 0; i < pred.size(); ++i) c += act_counts(pred[i], gold[i]);
  return c.f1();
}

// ---------------------------------------------------------------- inform / success

// Generated output for one turn, in token form.
struct PredictedTurn {
  Tokens belief;  // belief span
  Tokens act;
  Tokens response;  // delexicalized
};

struct DialogOutcome {
  bool inform{false};
  bool success{false};
};

inline bool offers_entity(const std::vector<PredictedTurn>& turns) {
  const std::string name_ph = corpus::placeholder(corpus::kNameSlot);
  return std::any_of(turns.begin(), turns.end(), [&](const PredictedTurn& t) {
    return std::find(t.response.begin(), t.response.end(), name_ph) != t.response.end();
  });
}

// Inform: the dialog offers an entity placeholder and the database entities
// matching the final predicted belief include one that satisfies the final
// gold constraints. Domains with a default entity are always informed.
// Success: informed and every requested slot's placeholder is emitted.
inline DialogOutcome inform_success(const corpus::Dialog& gold, const std::vector<PredictedTurn>& pred,
                                    const corpus::DomainSchema& schema) {
  if (pred.size() != gold.turns.size()) throw std::invalid_argument("inform_success: turn counts differ");
  DialogOutcome out;
  if (schema.default_entity) {
    out.inform = true;
  } else if (!pred.empty() && offers_entity(pred)) {
    try {
      const auto parsed = corpus::parse_belief_span(pred.back().belief, {schema});
      const auto gold_final = gold.turns.back().belief;
      for (const corpus::Entity* e : corpus::db_query(parsed.state, schema).entities)
        if (corpus::entity_satisfies(*e, gold_final)) {
          out.inform = true;
          break;
        }
    } catch (const corpus::BeliefParseError&) {
    }
  }
  if (!out.inform) return out;
  std::set<std::string> emitted;
  for (const auto& t : pred) emitted.insert(t.response.begin(), t.response.end());
  out.success = true;
  for (const auto& turn : gold.turns)
    for (const auto& slot : turn.requested)
      if (!emitted.count(corpus::placeholder(slot))) out.success = false;
  return out;
}

// ---------------------------------------------------------------- runs

struct Scores {
  double inform{0}, success{0}, bleu{0}, slot_f1{0}, act_f1{0};
};

// Produces every turn of one dialog, feeding its own beliefs forward.
using DialogPredictor = std::function<std::vector<PredictedTurn>(const corpus::Dialog&)>;

inline DialogPredictor oracle_predictor(const corpus::Corpus& c) {
  return [&c](const corpus::Dialog& d) {
    const auto& schema = c.schema(d.domain);
    std::vector<PredictedTurn> out;
    for (const auto& t : d.turns)
      out.push_back({corpus::serialize_belief_span({d.domain, t.belief}, schema),
                     corpus::serialize_act(t.act), t.response_delex});
    return out;
  };
}

// Greedy decoding with the generated previous belief carried across turns.
inline DialogPredictor student_predictor(const corpus::Corpus& c, const corpus::Vocab& vocab,
                                         const ad::ParamSet& params, const ModelConfig& cfg) {
  return [&c, &vocab, &params, cfg](const corpus::Dialog& d) {
    const auto& schema = c.schema(d.domain);
    const auto s = student::StudentRef::bind(params);
    std::vector<PredictedTurn> out;
    Ids prev = vocab.ids({corpus::marker(d.domain)});
    for (std::size_t t = 0; t < d.turns.size(); ++t) {
      Ids context = vocab.ids(cfg.full_history ? corpus::history_tokens(d, t)
                                               : corpus::context_tokens(d, t));
      if (context.empty()) context = {corpus::Vocab::pad};
      const auto g = student::predict_turn(prev, context, schema, vocab, s, cfg);
      out.push_back({vocab.words(g.belief), vocab.words(g.act), vocab.words(g.response)});
      prev = g.belief;
    }
    return out;
  };
}

struct DialogPrediction {
  std::size_t dialog{0};
  std::vector<PredictedTurn> turns;
  DialogOutcome outcome;
};

struct RunEvaluation {
  Scores scores;
  std::vector<DialogPrediction> dialogs;
};

inline RunEvaluation evaluate_run(const corpus::Corpus& c, const std::vector<std::size_t>& dialogs,
                                  const DialogPredictor& predict) {
  RunEvaluation out;
  std::vector<Tokens> cands, refs;
  Counts slots, acts;
  double inform = 0, success = 0;
  for (std::size_t i : dialogs) {
    const auto& d = c.dialogs.at(i);
    const auto& schema = c.schema(d.domain);
    DialogPrediction p{i, predict(d), {}};
    if (p.turns.size() != d.turns.size()) throw std::logic_error("predictor returned wrong turn count");
    for (std::size_t t = 0; t < d.turns.size(); ++t) {
      cands.push_back(p.turns[t].response);
      refs.push_back(d.turns[t].response_delex);
      slots += belief_counts(p.turns[t].belief, {d.domain, d.turns[t].belief}, c.domains);
      acts += act_counts(corpus::parse_act(p.turns[t].act, c.domain_names()), d.turns[t].act);
    }
    p.outcome = inform_success(d, p.turns, schema);
    inform += p.outcome.inform;
    success += p.outcome.success;
    out.dialogs.push_back(std::move(p));
  }
  const double n = dialogs.empty() ? 1.0 : static_cast<double>(dialogs.size());
  out.scores = {inform / n, success / n, bleu(cands, refs), slots.f1(), acts.f1()};
  return out;
}

// ---------------------------------------------------------------- reports

struct RunRow {
  std::string domain;
  std::size_t run{0};
  Scores scores;
};

struct Report {
  std::vector<RunRow> runs;
  Scores mean, stddev;
};

inline Report aggregate(std::vector<RunRow> runs) {
  Report r;
  r.runs = std::move(runs);
  const double n = static_cast<double>(std::max<std::size_t>(1, r.runs.size()));
  auto field = [](Scores& s, int k) -> double& {
    switch (k) {
      case 0: return s.inform;
      case 1: return s.success;
      case 2: return s.bleu;
      case 3: return s.slot_f1;
      default: return s.act_f1;
    }
  };
  for (int k = 0; k < 5; ++k) {
    double sum = 0;
    for (auto& row : r.runs) sum += field(row.scores, k);
    const double mean = sum / n;
    double var = 0;
    for (auto& row : r.runs) var += (field(row.scores, k) - mean) * (field(row.scores, k) - mean);
    field(r.mean, k) = mean;
    field(r.stddev, k) = std::sqrt(var / n);
  }
  return r;
}

inline corpus::ordered_json scores_json(const Scores& s) {
  return {{"inform", 100 * s.inform},
          {"success", 100 * s.success},
          {"bleu", 100 * s.bleu},
          {"slot_f1", 100 * s.slot_f1},
          {"act_f1", 100 * s.act_f1}};
}

inline corpus::ordered_json report_json(const Report& r) {
  corpus::ordered_json runs = corpus::ordered_json::array();
  for (const auto& row : r.runs) {
    auto j = scores_json(row.scores);
    j["domain"] = row.domain;
    j["run"] = row.run;
    runs.push_back(j);
  }
  return {{"runs", runs},
          {"run_count", r.runs.size()},
          {"mean", scores_json(r.mean)},
          {"std", scores_json(r.stddev)}};
}

// One row per run plus an "average" row; rates are percentages.
inline std::string report_csv(const Report& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "domain,run,inform,success,bleu,slot_f1,act_f1\n";
  auto row = [&](const std::string& domain, const std::string& run, const Scores& s) {
    os << domain << ',' << run << ',' << 100 * s.inform << ',' << 100 * s.success << ','
       << 100 * s.bleu << ',' << 100 * s.slot_f1 << ',' << 100 * s.act_f1 << '\n';
  };
  for (const auto& x : r.runs) row(x.domain, std::to_string(x.run), x.scores);
  row(r.runs.empty() ? "" : r.runs.front().domain, "average", r.mean);
  return os.str();
}

}  // namespace dast::metrics
