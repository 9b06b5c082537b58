// Meta-teacher: re-encodes [C_t ; <sep> ; R_t] with the student's context
// encoder, runs transformer encoder layers over the states and turns the
// response positions into softmax-normalized per-token loss weights.
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "dast/autodiff.hpp"
#include "dast/layers.hpp"
#include "dast/student.hpp"

namespace dast::teacher {

using ad::ParamSet;
using ad::Tensor;
using ad::Var;

inline std::string layer_prefix(std::size_t i) { return "layer" + std::to_string(i); }

// The output projection starts at `output_scale` (zero gives uniform weights).
inline void init_teacher(ParamSet& p, const ModelConfig& cfg, Rng& rng, double output_scale = 0.0) {
  for (std::size_t i = 0; i < cfg.teacher_layers; ++i)
    layers::init_transformer_layer(p, layer_prefix(i), cfg.hidden, cfg.heads, rng);
  p.add("w", output_scale == 0.0 ? Tensor(cfg.hidden, 1)
                                 : layers::uniform_init(cfg.hidden, 1, output_scale, rng));
}

struct TeacherRef {
  std::vector<layers::TransformerRef> layers;
  Var w;  // H x 1

  static TeacherRef bind(const ParamSet& p, const ModelConfig& cfg) {
    TeacherRef t;
    for (std::size_t i = 0; i < cfg.teacher_layers; ++i)
      t.layers.push_back(layers::TransformerRef::bind(p, layer_prefix(i), cfg.heads));
    t.w = p["w"];
    return t;
  }
};

class EmptyResponseError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct TeacherOutput {
  Var weights;  // 1 x |R|, the weight vector
  Var logits;   // 1 x |R|
  Var h1;       // encoder states over [C ; sep ; R]
  Var h2;       // transformer output
};

// `response` is the response target as scored by the student (tokens plus
// eos). `encoder` supplies the shared embedding and context encoder; pass a
// detached view to keep teacher gradients out of the student.
inline TeacherOutput teacher_forward(const Ids& context, const Ids& response,
                                     const student::StudentRef& encoder, const TeacherRef& t) {
  if (response.empty()) throw EmptyResponseError("teacher_weights: empty response");
  Ids joint = context;
  joint.push_back(corpus::Vocab::sep);
  joint.insert(joint.end(), response.begin(), response.end());
  TeacherOutput out;
  out.h1 = layers::bigru_encode(joint, encoder.embedding, encoder.enc_c).states;
  Var h = out.h1;
  for (const auto& layer : t.layers) h = layers::transformer_encoder_layer(h, layer).states;
  out.h2 = h;
  const Var scores = ad::matmul(h, t.w);  // L x 1
  out.logits = ad::transpose(ad::slice_rows(scores, joint.size() - response.size(), joint.size()));
  out.weights = ad::softmax_rows(out.logits);
  return out;
}

inline Var teacher_weights(const Ids& context, const Ids& response,
                           const student::StudentRef& encoder, const TeacherRef& t) {
  return teacher_forward(context, response, encoder, t).weights;
}

// Constant copy of the student's embedding and context encoder. Teacher
// gradients stop here, so the teacher never updates the shared encoder.
struct EncoderView {
  ParamSet params;
  student::StudentRef ref;
};

inline EncoderView encoder_view(const ParamSet& student_params) {
  EncoderView v;
  for (const char* prefix : {"emb", "enc_c."}) {
    const ParamSet part = student_params.subset(prefix);
    for (std::size_t i = 0; i < part.size(); ++i) v.params.add(part.name_at(i), part.at(i).value());
  }
  v.params = v.params.detached();
  v.ref.embedding = v.params["emb"];
  v.ref.enc_c = layers::BiGruRef::bind(v.params, "enc_c");
  return v;
}

inline Var weighted_loss(const Var& token_losses, const Var& weights) {
  return ad::dot(token_losses, weights);
}

// Squared L2 norm; minimal (1/n) exactly at uniform weights.
inline Var weight_regularizer(const Var& weights) { return ad::dot(weights, weights); }

}  // namespace dast::teacher
