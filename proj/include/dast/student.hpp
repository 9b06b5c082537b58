// End-to-end dialog model: belief and context encoders, belief/act/response
// decoders with attention and copy, database hook and per-token losses.
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "dast/autodiff.hpp"
#include "dast/corpus.hpp"
#include "dast/layers.hpp"
#include "dast/rng.hpp"

namespace dast {

using Ids = std::vector<std::size_t>;

struct ModelConfig {
  std::size_t embed{50};
  std::size_t hidden{100};
  std::size_t heads{5};
  std::size_t teacher_layers{2};
  std::size_t max_belief{30};
  std::size_t max_act{30};
  std::size_t max_response{60};
  bool pre_softmax_norm{false};
  bool full_history{false};
  std::vector<std::size_t> bucket_edges{0, 1, 2, 3, 4};
};

// One turn in id form, everything the student and teacher consume.
struct TurnExample {
  Ids prev_belief;  // B_{t-1} span
  Ids context;      // C_t
  Ids belief;       // B_t span
  Ids act;          // A_t tokens
  Ids response;     // R_t delexicalized
  std::vector<double> match;  // m_t from the gold belief
};

inline Ids with_eos(const Ids& ids) {
  Ids out = ids;
  out.push_back(corpus::Vocab::eos);
  return out;
}

// Encoders need at least one position; empty generated spans become <eos>.
inline Ids nonempty(const Ids& ids) { return ids.empty() ? Ids{corpus::Vocab::eos} : ids; }

inline std::vector<TurnExample> make_examples(const corpus::Dialog& dialog,
                                              const corpus::DomainSchema& schema,
                                              const corpus::Vocab& vocab, const ModelConfig& cfg) {
  std::vector<TurnExample> out;
  corpus::Tokens prev{corpus::marker(schema.name)};
  for (std::size_t t = 0; t < dialog.turns.size(); ++t) {
    const auto& turn = dialog.turns[t];
    TurnExample ex;
    ex.prev_belief = vocab.ids(prev);
    ex.context = vocab.ids(cfg.full_history ? corpus::history_tokens(dialog, t)
                                            : corpus::context_tokens(dialog, t));
    if (ex.context.empty()) ex.context = {corpus::Vocab::pad};
    const corpus::BeliefState b{schema.name, turn.belief};
    const corpus::Tokens span = corpus::serialize_belief_span(b, schema);
    ex.belief = vocab.ids(span);
    ex.act = vocab.ids(corpus::serialize_act(turn.act));
    ex.response = vocab.ids(turn.response_delex);
    ex.match = corpus::db_query(b, schema, cfg.bucket_edges).match.one_hot;
    out.push_back(std::move(ex));
    prev = span;
  }
  return out;
}

namespace student {

using ad::ParamSet;
using ad::Tensor;
using ad::Var;
using layers::BiGruRef;
using layers::DecoderRef;
using layers::EncoderOutput;

inline void init_student(ParamSet& p, const ModelConfig& cfg, std::size_t vocab_size, Rng& rng) {
  const std::size_t E = cfg.embed, H = cfg.hidden, buckets = cfg.bucket_edges.size();
  p.add("emb", layers::uniform_init(vocab_size, E, 0.1, rng));
  layers::init_bigru(p, "enc_b", E, H, rng);
  layers::init_bigru(p, "enc_c", E, H, rng);
  layers::init_linear(p, "match", buckets, E, rng, false);
  layers::DecoderDims d{E, H, vocab_size, 2 * H, cfg.pre_softmax_norm};
  layers::init_decoder(p, "dec_b", d, rng);
  d.init_features = 2 * H + E;
  layers::init_decoder(p, "dec_a", d, rng);
  d.init_features = 3 * H + E;
  layers::init_decoder(p, "dec_r", d, rng);
}

struct StudentRef {
  Var embedding;
  BiGruRef enc_b;
  BiGruRef enc_c;
  layers::LinearRef match;
  DecoderRef dec_b, dec_a, dec_r;

  static StudentRef bind(const ParamSet& p) {
    return {p["emb"],
            BiGruRef::bind(p, "enc_b"),
            BiGruRef::bind(p, "enc_c"),
            layers::LinearRef::bind(p, "match"),
            DecoderRef::bind(p, "dec_b"),
            DecoderRef::bind(p, "dec_a"),
            DecoderRef::bind(p, "dec_r")};
  }
};

struct EncodedInputs {
  EncoderOutput belief;   // h_B
  EncoderOutput context;  // h_C
};

inline EncodedInputs encode_inputs(const Ids& prev_belief, const Ids& context, const StudentRef& s) {
  if (context.empty()) throw std::invalid_argument("encode_inputs: empty context");
  return {layers::bigru_encode(nonempty(prev_belief), s.embedding, s.enc_b),
          layers::bigru_encode(context, s.embedding, s.enc_c)};
}

inline Ids concat_ids(std::initializer_list<const Ids*> parts) {
  Ids out;
  for (const Ids* p : parts) out.insert(out.end(), p->begin(), p->end());
  return out;
}

inline layers::DecoderInputs belief_decoder_inputs(const EncodedInputs& enc, const Ids& prev_belief,
                                                   const Ids& context) {
  return {ad::concat_rows({enc.belief.states, enc.context.states}),
          concat_ids({&prev_belief, &context}),
          ad::concat_cols({enc.belief.final, enc.context.final})};
}

inline Var match_embedding(const std::vector<double>& match, const StudentRef& s) {
  return s.match(Var::constant(Tensor::row(match)));
}

inline layers::DecoderInputs act_decoder_inputs(const EncoderOutput& belief, const Ids& belief_ids,
                                                const Var& match, const EncoderOutput& context,
                                                const Ids& context_ids) {
  return {ad::concat_rows({belief.states, context.states}),
          concat_ids({&belief_ids, &context_ids}),
          ad::concat_cols({belief.final, context.final, match})};
}

inline layers::DecoderInputs response_decoder_inputs(const EncoderOutput& belief,
                                                     const Ids& belief_ids,
                                                     const EncoderOutput& act, const Ids& act_ids,
                                                     const Var& match,
                                                     const EncoderOutput& context,
                                                     const Ids& context_ids) {
  return {ad::concat_rows({belief.states, act.states, context.states}),
          concat_ids({&belief_ids, &act_ids, &context_ids}),
          ad::concat_cols({belief.final, act.final, context.final, match})};
}

// Per-token losses for one decoder under teacher forcing; `gold` excludes eos.
inline layers::TokenLosses forced_losses(const Ids& gold, const Var& embedding,
                                         const layers::DecoderInputs& in, const DecoderRef& d) {
  const Ids targets = with_eos(gold);
  const auto tf = layers::teacher_forced_decode(targets, corpus::Vocab::go, embedding, in, d);
  return layers::cross_entropy_from_gold(tf.probabilities);
}

struct TurnPrediction {
  Var loss_belief;    // 1 x (|B_t| + 1)
  Var loss_act;       // 1 x (|A_t| + 1)
  Var loss_response;  // 1 x (|R_t| + 1)
  Var total;          // mean(L_B) + mean(L_A) + dot(L_R, w)
  std::size_t clamped{0};
};

inline Var uniform_weights(std::size_t n) {
  return Var::constant(Tensor(1, n, 1.0 / static_cast<double>(n)));
}

class WeightLengthError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Teacher-forced multi-task loss. `weights` covers the response target
// (tokens plus eos); an undefined Var means uniform weights.
inline TurnPrediction student_turn_loss(const TurnExample& ex, const StudentRef& s,
                                        const Var& weights = {}) {
  const std::size_t response_len = ex.response.size() + 1;
  if (weights.defined() && weights.size() != response_len) {
    throw WeightLengthError("weight vector has " + std::to_string(weights.size()) +
                            " entries for a response target of " + std::to_string(response_len));
  }
  const EncodedInputs enc = encode_inputs(ex.prev_belief, ex.context, s);
  TurnPrediction out;

  const auto lb = forced_losses(ex.belief, s.embedding,
                                belief_decoder_inputs(enc, ex.prev_belief, ex.context), s.dec_b);
  const Ids belief_ids = nonempty(ex.belief);
  const Ids act_ids = nonempty(ex.act);
  const EncoderOutput belief_enc = layers::bigru_encode(belief_ids, s.embedding, s.enc_b);
  const Var match = match_embedding(ex.match, s);
  const auto la = forced_losses(
      ex.act, s.embedding, act_decoder_inputs(belief_enc, belief_ids, match, enc.context, ex.context),
      s.dec_a);
  const EncoderOutput act_enc = layers::bigru_encode(act_ids, s.embedding, s.enc_b);
  const auto lr = forced_losses(ex.response, s.embedding,
                                response_decoder_inputs(belief_enc, belief_ids, act_enc, act_ids,
                                                        match, enc.context, ex.context),
                                s.dec_r);
  out.loss_belief = lb.losses;
  out.loss_act = la.losses;
  out.loss_response = lr.losses;
  out.clamped = lb.clamped + la.clamped + lr.clamped;
  Var w = weights.defined() ? weights : uniform_weights(response_len);
  if (w.rows() != 1) w = ad::transpose(w);
  out.total = ad::add(ad::add(ad::mean(lb.losses), ad::mean(la.losses)), ad::dot(lr.losses, w));
  return out;
}

struct GeneratedTurn {
  Ids belief;
  Ids act;
  Ids response;
  corpus::BeliefState state;
};

// Parses generated belief ids into a state of `schema`'s domain; anything
// unparsable yields an empty constraint set.
inline corpus::BeliefState parse_generated_belief(const Ids& ids, const corpus::Vocab& vocab,
                                                  const corpus::DomainSchema& schema) {
  try {
    auto parsed = corpus::parse_belief_span(vocab.words(ids), {schema});
    return parsed.state;
  } catch (const corpus::BeliefParseError&) {
    return {schema.name, {}};
  }
}

// Free-running greedy prediction of one turn. The generated belief drives the
// database lookup.
inline GeneratedTurn predict_turn(const Ids& prev_belief, const Ids& context,
                                  const corpus::DomainSchema& schema, const corpus::Vocab& vocab,
                                  const StudentRef& s, const ModelConfig& cfg) {
  ad::NoGradGuard no_grad;
  GeneratedTurn out;
  const EncodedInputs enc = encode_inputs(prev_belief, context, s);
  out.belief = layers::greedy_decode(corpus::Vocab::go, corpus::Vocab::eos, cfg.max_belief,
                                     s.embedding, belief_decoder_inputs(enc, prev_belief, context),
                                     s.dec_b);
  out.state = parse_generated_belief(out.belief, vocab, schema);
  const auto match = corpus::db_query(out.state, schema, cfg.bucket_edges).match.one_hot;
  const Ids belief_ids = nonempty(out.belief);
  const EncoderOutput belief_enc = layers::bigru_encode(belief_ids, s.embedding, s.enc_b);
  const Var m = match_embedding(match, s);
  out.act = layers::greedy_decode(
      corpus::Vocab::go, corpus::Vocab::eos, cfg.max_act, s.embedding,
      act_decoder_inputs(belief_enc, belief_ids, m, enc.context, context), s.dec_a);
  const Ids act_ids = nonempty(out.act);
  const EncoderOutput act_enc = layers::bigru_encode(act_ids, s.embedding, s.enc_b);
  out.response = layers::greedy_decode(
      corpus::Vocab::go, corpus::Vocab::eos, cfg.max_response, s.embedding,
      response_decoder_inputs(belief_enc, belief_ids, act_enc, act_ids, m, enc.context, context),
      s.dec_r);
  return out;
}

}  // namespace student
}  // namespace dast
