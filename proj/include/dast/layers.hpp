// Neural building blocks: embeddings, GRU cells, bi-directional encoders,
// additive attention, GRU decoders with a gated copy mechanism, transformer
// encoder layers and per-token cross-entropy.
//
// Parameters live in an ad::ParamSet under dotted prefixes. Each block has an
// `init_*` function that registers its tensors and a `*Ref` view that binds
// them from any ParamSet with the same names (original weights or fast
// weights alike).
#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dast/autodiff.hpp"
#include "dast/rng.hpp"

namespace dast::layers {

using ad::ParamSet;
using ad::Tensor;
using ad::Var;

inline Tensor xavier(std::size_t rows, std::size_t cols, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Tensor t(rows, cols);
  for (auto& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

inline Tensor uniform_init(std::size_t rows, std::size_t cols, double bound, Rng& rng) {
  Tensor t(rows, cols);
  for (auto& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

// ---------------------------------------------------------------------------
// Linear

struct LinearRef {
  Var weight;  // in x out
  Var bias;    // 1 x out, may be undefined

  static LinearRef bind(const ParamSet& p, const std::string& prefix) {
    LinearRef r{p[prefix + ".w"], {}};
    if (p.contains(prefix + ".b")) r.bias = p[prefix + ".b"];
    return r;
  }
  Var operator()(const Var& x) const {
    Var y = ad::matmul(x, weight);
    return bias.defined() ? ad::add(y, bias) : y;
  }
};

inline void init_linear(ParamSet& p, const std::string& prefix, std::size_t in, std::size_t out,
                        Rng& rng, bool with_bias = true) {
  p.add(prefix + ".w", xavier(in, out, rng));
  if (with_bias) p.add(prefix + ".b", Tensor(1, out));
}

// ---------------------------------------------------------------------------
// Embedding

class TokenRangeError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

inline Var embed_lookup(std::span<const std::size_t> ids, const Var& embedding) {
  for (std::size_t id : ids) {
    if (id >= embedding.rows()) {
      throw TokenRangeError("token id " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(embedding.rows()));
    }
  }
  return ad::gather_rows(embedding, ids);
}

// ---------------------------------------------------------------------------
// GRU
//
//   r = sigmoid(x Wr + bxr + h Ur + bhr)
//   z = sigmoid(x Wz + bxz + h Uz + bhz)
//   n = tanh(x Wn + bxn + r * (h Un + bhn))
//   h' = (1 - z) * n + z * h
//
// Gate blocks are packed as [r | z | n] along columns.

struct GruRef {
  Var w;   // in x 3H
  Var u;   // H x 3H
  Var bx;  // 1 x 3H
  Var bh;  // 1 x 3H

  static GruRef bind(const ParamSet& p, const std::string& prefix) {
    return {p[prefix + ".w"], p[prefix + ".u"], p[prefix + ".bx"], p[prefix + ".bh"]};
  }
  std::size_t hidden() const { return u.rows(); }
  // Input projections for a whole sequence, one row per step.
  Var project_inputs(const Var& xs) const { return ad::add(ad::matmul(xs, w), bx); }
};

inline void init_gru(ParamSet& p, const std::string& prefix, std::size_t in, std::size_t hidden,
                     Rng& rng) {
  p.add(prefix + ".w", xavier(in, 3 * hidden, rng));
  p.add(prefix + ".u", xavier(hidden, 3 * hidden, rng));
  p.add(prefix + ".bx", Tensor(1, 3 * hidden));
  p.add(prefix + ".bh", Tensor(1, 3 * hidden));
}

// One step given a precomputed input projection `xp` = x W + bx.
inline Var gru_step_projected(const Var& xp, const Var& h, const GruRef& g) {
  const std::size_t H = g.hidden();
  const Var hp = ad::add(ad::matmul(h, g.u), g.bh);
  const Var r = ad::sigmoid(ad::add(ad::slice_cols(xp, 0, H), ad::slice_cols(hp, 0, H)));
  const Var z = ad::sigmoid(ad::add(ad::slice_cols(xp, H, 2 * H), ad::slice_cols(hp, H, 2 * H)));
  const Var n = ad::tanh(
      ad::add(ad::slice_cols(xp, 2 * H, 3 * H), ad::mul(r, ad::slice_cols(hp, 2 * H, 3 * H))));
  return ad::add(ad::mul(ad::affine(z, -1.0, 1.0), n), ad::mul(z, h));
}

inline Var gru_step(const Var& x, const Var& h, const GruRef& g) {
  if (h.cols() != g.hidden() || x.cols() != g.w.rows()) {
    throw ad::ShapeError("gru_step: x " + x.value().shape_string() + ", h " +
                         h.value().shape_string() + " do not match cell " +
                         g.w.value().shape_string());
  }
  return gru_step_projected(g.project_inputs(x), h, g);
}

// ---------------------------------------------------------------------------
// Bi-directional GRU encoder, states projected back to the hidden width.

struct EncoderOutput {
  Var states;                        // L x H
  Var final;                         // 1 x H
  std::vector<Var> forward_states;   // per position, 1 x H
  std::vector<Var> backward_states;  // per position, 1 x H
};

struct BiGruRef {
  GruRef fw;
  GruRef bw;
  LinearRef proj;  // 2H -> H

  static BiGruRef bind(const ParamSet& p, const std::string& prefix) {
    return {GruRef::bind(p, prefix + ".fw"), GruRef::bind(p, prefix + ".bw"),
            LinearRef::bind(p, prefix + ".proj")};
  }
};

inline void init_bigru(ParamSet& p, const std::string& prefix, std::size_t in, std::size_t hidden,
                       Rng& rng) {
  init_gru(p, prefix + ".fw", in, hidden, rng);
  init_gru(p, prefix + ".bw", in, hidden, rng);
  init_linear(p, prefix + ".proj", 2 * hidden, hidden, rng);
}

inline EncoderOutput bigru_encode(std::span<const std::size_t> tokens, const Var& embedding,
                                  const BiGruRef& enc) {
  if (tokens.empty()) throw std::invalid_argument("bigru_encode: empty token sequence");
  const std::size_t L = tokens.size();
  const std::size_t H = enc.fw.hidden();
  const Var xs = embed_lookup(tokens, embedding);
  const Var xf = enc.fw.project_inputs(xs);
  const Var xb = enc.bw.project_inputs(xs);

  EncoderOutput out;
  out.forward_states.resize(L);
  out.backward_states.resize(L);
  Var h = Var::constant(Tensor(1, H));
  for (std::size_t i = 0; i < L; ++i) {
    h = gru_step_projected(ad::slice_rows(xf, i, i + 1), h, enc.fw);
    out.forward_states[i] = h;
  }
  h = Var::constant(Tensor(1, H));
  for (std::size_t i = L; i-- > 0;) {
    h = gru_step_projected(ad::slice_rows(xb, i, i + 1), h, enc.bw);
    out.backward_states[i] = h;
  }
  const Var both =
      ad::concat_cols({ad::concat_rows(out.forward_states), ad::concat_rows(out.backward_states)});
  out.states = enc.proj(both);
  out.final = enc.proj(ad::concat_cols({out.forward_states.back(), out.backward_states.front()}));
  return out;
}

// ---------------------------------------------------------------------------
// Additive attention: score_i = v . tanh(q Wq + k_i Wk)

struct AttentionRef {
  Var wq;  // Q x A
  Var wk;  // K x A
  Var v;   // A x 1

  static AttentionRef bind(const ParamSet& p, const std::string& prefix) {
    return {p[prefix + ".wq"], p[prefix + ".wk"], p[prefix + ".v"]};
  }
};

inline void init_attention(ParamSet& p, const std::string& prefix, std::size_t query_dim,
                           std::size_t key_dim, std::size_t attn_dim, Rng& rng) {
  p.add(prefix + ".wq", xavier(query_dim, attn_dim, rng));
  p.add(prefix + ".wk", xavier(key_dim, attn_dim, rng));
  p.add(prefix + ".v", xavier(attn_dim, 1, rng));
}

struct AttentionKeys {
  Var keys;       // L x K
  Var projected;  // L x A
};

inline AttentionKeys prepare_keys(const Var& keys, const AttentionRef& a) {
  if (keys.rows() == 0) throw std::invalid_argument("attention over empty key sequence");
  return {keys, ad::matmul(keys, a.wk)};
}

struct Attended {
  Var context;  // 1 x K
  Var weights;  // 1 x L
};

inline Attended attend(const Var& query, const AttentionKeys& keys, const AttentionRef& a) {
  const Var q = ad::matmul(query, a.wq);
  const Var scores = ad::matmul(ad::tanh(ad::add(keys.projected, q)), a.v);  // L x 1
  const Var weights = ad::softmax_rows(ad::transpose(scores));
  return {ad::matmul(weights, keys.keys), weights};
}

inline Attended attend(const Var& query, const Var& keys, const AttentionRef& a) {
  return attend(query, prepare_keys(keys, a), a);
}

// ---------------------------------------------------------------------------
// Copy mechanism

// (1 - g) * generation + g * copy, with the copy distribution being the
// attention weights scattered onto the source token ids.
inline Var mix_copy(const Var& generation, const Var& attention,
                    std::span<const std::size_t> source_ids, const Var& gate) {
  if (attention.cols() != source_ids.size()) {
    throw ad::ShapeError("mix_copy: " + std::to_string(source_ids.size()) + " source ids for " +
                         attention.value().shape_string() + " attention");
  }
  const Var copy = ad::scatter_cols(attention, source_ids, generation.cols());
  return ad::add(ad::mul(generation, ad::affine(gate, -1.0, 1.0)), ad::mul(copy, gate));
}

struct DecoderRef {
  GruRef cell;
  AttentionRef attention;
  LinearRef init;     // F -> H
  LinearRef hidden;   // 2H -> H
  LinearRef vocab;    // H -> V
  LinearRef gate;     // 2H + E -> 1
  Var norm_gain;      // optional, 1 x H
  Var norm_bias;

  static DecoderRef bind(const ParamSet& p, const std::string& prefix) {
    DecoderRef d{GruRef::bind(p, prefix + ".gru"),     AttentionRef::bind(p, prefix + ".attn"),
                 LinearRef::bind(p, prefix + ".init"), LinearRef::bind(p, prefix + ".hidden"),
                 LinearRef::bind(p, prefix + ".vocab"), LinearRef::bind(p, prefix + ".gate"),
                 {},
                 {}};
    if (p.contains(prefix + ".norm.g")) {
      d.norm_gain = p[prefix + ".norm.g"];
      d.norm_bias = p[prefix + ".norm.b"];
    }
    return d;
  }
  std::size_t vocab_size() const { return vocab.weight.cols(); }
};

struct DecoderDims {
  std::size_t embed{50};
  std::size_t hidden{100};
  std::size_t vocab{0};
  std::size_t init_features{0};
  bool pre_softmax_norm{false};
};

inline void init_decoder(ParamSet& p, const std::string& prefix, const DecoderDims& d, Rng& rng) {
  init_gru(p, prefix + ".gru", d.embed, d.hidden, rng);
  init_attention(p, prefix + ".attn", d.hidden, d.hidden, d.hidden, rng);
  init_linear(p, prefix + ".init", d.init_features, d.hidden, rng);
  init_linear(p, prefix + ".hidden", 2 * d.hidden, d.hidden, rng);
  init_linear(p, prefix + ".vocab", d.hidden, d.vocab, rng);
  init_linear(p, prefix + ".gate", 2 * d.hidden + d.embed, 1, rng);
  if (d.pre_softmax_norm) {
    p.add(prefix + ".norm.g", Tensor(1, d.hidden, 1.0));
    p.add(prefix + ".norm.b", Tensor(1, d.hidden));
  }
}

// Everything the decoder conditions on for one output sequence.
struct DecoderInputs {
  Var keys;                             // L x H attention memory
  std::vector<std::size_t> source_ids;  // L token ids backing the memory rows (copy targets)
  Var init_features;                    // 1 x F, mapped to the initial hidden state
};

struct StepOutput {
  Var hidden;        // 1 x H after the GRU update
  Var distribution;  // 1 x V, copy-mixed
  Var attention;     // 1 x L
  Var gate;          // 1 x 1
};

// One decoding step after the recurrent update: attention, generation
// softmax, copy gate and mixture.
inline StepOutput decode_step_with_copy(const Var& state, const Var& input_embedding,
                                        const AttentionKeys& keys,
                                        std::span<const std::size_t> source_ids,
                                        const DecoderRef& d) {
  const Attended att = attend(state, keys, d.attention);
  const Var joint = ad::concat_cols({state, att.context});
  Var o = ad::tanh(d.hidden(joint));
  if (d.norm_gain.defined()) o = ad::add(ad::mul(ad::layer_norm_rows(o), d.norm_gain), d.norm_bias);
  const Var generation = ad::softmax_rows(d.vocab(o));
  const Var gate = ad::sigmoid(d.gate(ad::concat_cols({joint, input_embedding})));
  return {state, mix_copy(generation, att.weights, source_ids, gate), att.weights, gate};
}

inline Var initial_state(const DecoderInputs& in, const DecoderRef& d) {
  return ad::tanh(d.init(in.init_features));
}

struct TeacherForced {
  Var probabilities;  // 1 x T, probability of each gold token
  std::vector<Var> states;
};

// Runs the decoder over `targets`, feeding `go` then the gold tokens.
inline TeacherForced teacher_forced_decode(std::span<const std::size_t> targets,
                                           std::size_t go_id, const Var& embedding,
                                           const DecoderInputs& in, const DecoderRef& d) {
  if (targets.empty()) throw std::invalid_argument("teacher_forced_decode: empty target");
  std::vector<std::size_t> inputs{go_id};
  inputs.insert(inputs.end(), targets.begin(), targets.end() - 1);
  const Var xs = embed_lookup(inputs, embedding);
  const Var xp = d.cell.project_inputs(xs);
  const AttentionKeys keys = prepare_keys(in.keys, d.attention);
  Var h = initial_state(in, d);
  TeacherForced out;
  std::vector<Var> picks;
  picks.reserve(targets.size());
  for (std::size_t t = 0; t < targets.size(); ++t) {
    h = gru_step_projected(ad::slice_rows(xp, t, t + 1), h, d.cell);
    const StepOutput s =
        decode_step_with_copy(h, ad::slice_rows(xs, t, t + 1), keys, in.source_ids, d);
    const std::size_t gold = targets[t];
    picks.push_back(ad::pick_per_row(s.distribution, std::span<const std::size_t>(&gold, 1)));
    out.states.push_back(h);
  }
  out.probabilities = ad::concat_cols(picks);
  return out;
}

// Greedy decoding until `eos_id` or `max_len` tokens; eos is not included.
inline std::vector<std::size_t> greedy_decode(std::size_t go_id, std::size_t eos_id,
                                              std::size_t max_len, const Var& embedding,
                                              const DecoderInputs& in, const DecoderRef& d) {
  ad::NoGradGuard no_grad;
  const AttentionKeys keys = prepare_keys(in.keys, d.attention);
  Var h = initial_state(in, d);
  std::vector<std::size_t> out;
  std::size_t prev = go_id;
  for (std::size_t t = 0; t < max_len; ++t) {
    const Var x = embed_lookup(std::span<const std::size_t>(&prev, 1), embedding);
    h = gru_step(x, h, d.cell);
    const StepOutput s = decode_step_with_copy(h, x, keys, in.source_ids, d);
    const auto& p = s.distribution.value();
    std::size_t best = 0;
    for (std::size_t j = 1; j < p.size(); ++j)
      if (p[j] > p[best]) best = j;
    if (best == eos_id) break;
    out.push_back(best);
    prev = best;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Transformer encoder layer (post-norm, no positional encoding).

struct TransformerRef {
  LinearRef qkv;  // d -> 3d
  LinearRef out;  // d -> d
  Var ln1_gain, ln1_bias;
  LinearRef ff1;  // d -> 4d
  LinearRef ff2;  // 4d -> d
  Var ln2_gain, ln2_bias;
  std::size_t heads{5};

  static TransformerRef bind(const ParamSet& p, const std::string& prefix, std::size_t heads) {
    return {LinearRef::bind(p, prefix + ".qkv"), LinearRef::bind(p, prefix + ".out"),
            p[prefix + ".ln1.g"],                p[prefix + ".ln1.b"],
            LinearRef::bind(p, prefix + ".ff1"), LinearRef::bind(p, prefix + ".ff2"),
            p[prefix + ".ln2.g"],                p[prefix + ".ln2.b"],
            heads};
  }
};

inline void init_transformer_layer(ParamSet& p, const std::string& prefix, std::size_t width,
                                   std::size_t heads, Rng& rng) {
  if (heads == 0 || width % heads != 0) {
    throw std::invalid_argument("transformer width " + std::to_string(width) +
                                " not divisible by head count " + std::to_string(heads));
  }
  init_linear(p, prefix + ".qkv", width, 3 * width, rng);
  init_linear(p, prefix + ".out", width, width, rng);
  p.add(prefix + ".ln1.g", Tensor(1, width, 1.0));
  p.add(prefix + ".ln1.b", Tensor(1, width));
  init_linear(p, prefix + ".ff1", width, 4 * width, rng);
  init_linear(p, prefix + ".ff2", 4 * width, width, rng);
  p.add(prefix + ".ln2.g", Tensor(1, width, 1.0));
  p.add(prefix + ".ln2.b", Tensor(1, width));
}

struct TransformerOutput {
  Var states;                       // L x d
  std::vector<Var> head_attention;  // per head, L x L
};

// Tanh-approximated GELU. Smooth everywhere, so finite-difference checks
// never straddle a kink.
inline Var gelu(const Var& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2 / pi)
  const Var cubic = ad::mul(ad::mul(x, x), x);
  const Var inner = ad::scale(ad::add(x, ad::scale(cubic, 0.044715)), kC);
  return ad::mul(ad::scale(x, 0.5), ad::affine(ad::tanh(inner), 1.0, 1.0));
}

inline TransformerOutput transformer_encoder_layer(const Var& x, const TransformerRef& t) {
  const std::size_t d = x.cols();
  if (t.heads == 0 || d % t.heads != 0) {
    throw ad::ShapeError("transformer width " + std::to_string(d) + " not divisible by " +
                         std::to_string(t.heads) + " heads");
  }
  const std::size_t dh = d / t.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Var qkv = t.qkv(x);
  TransformerOutput out;
  std::vector<Var> heads;
  for (std::size_t h = 0; h < t.heads; ++h) {
    const Var q = ad::slice_cols(qkv, h * dh, (h + 1) * dh);
    const Var k = ad::slice_cols(qkv, d + h * dh, d + (h + 1) * dh);
    const Var v = ad::slice_cols(qkv, 2 * d + h * dh, 2 * d + (h + 1) * dh);
    const Var a = ad::softmax_rows(ad::scale(ad::matmul(q, k, false, true), scale));
    out.head_attention.push_back(a);
    heads.push_back(ad::matmul(a, v));
  }
  const Var attended = t.out(ad::concat_cols(heads));
  const Var x1 = ad::add(ad::mul(ad::layer_norm_rows(ad::add(x, attended)), t.ln1_gain), t.ln1_bias);
  const Var ff = t.ff2(gelu(t.ff1(x1)));
  out.states = ad::add(ad::mul(ad::layer_norm_rows(ad::add(x1, ff)), t.ln2_gain), t.ln2_bias);
  return out;
}

// ---------------------------------------------------------------------------
// Cross-entropy

inline constexpr double kProbabilityFloor = 1e-12;

struct TokenLosses {
  Var losses;               // 1 x T, element i = -log p(gold_i)
  std::size_t clamped{0};   // tokens whose probability hit the floor
};

// From the per-token gold probabilities (1 x T).
inline TokenLosses cross_entropy_from_gold(const Var& gold_probabilities) {
  TokenLosses out;
  for (double p : gold_probabilities.value().vec())
    if (!(p > kProbabilityFloor)) ++out.clamped;
  out.losses = ad::neg(ad::log(ad::clamp_min(gold_probabilities, kProbabilityFloor)));
  return out;
}

// From full distributions (T x V, one row per token).
inline TokenLosses cross_entropy_per_token(const Var& distributions,
                                           std::span<const std::size_t> gold) {
  if (distributions.rows() != gold.size()) {
    throw ad::ShapeError("cross_entropy_per_token: " + std::to_string(gold.size()) +
                         " gold ids for " + distributions.value().shape_string());
  }
  return cross_entropy_from_gold(ad::transpose(ad::pick_per_row(distributions, gold)));
}

}  // namespace dast::layers
