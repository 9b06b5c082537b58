// Adversarial MAML step over a set of tasks.
//
// A task exposes support(M, T) and query(M, T), each returning the batch loss
// (teacher-weighted) and the batch weight regularizer. One meta step:
//   M'_k = M - alpha * dM support_k(M, T)
//   L    = sum_k query_k(M'_k, T).loss
//   M   <- descend on dM L
//   T   <- ascend on dT (L + lambda * sum_k query_k.reg)
#pragma once

#include <concepts>
#include <cstddef>
#include <string>
#include <vector>

#include "dast/autodiff.hpp"
#include "dast/optim.hpp"

namespace dast::maml {

using ad::ParamSet;
using ad::Tensor;
using ad::Var;

struct Objective {
  Var loss;        // scalar
  Var weight_reg;  // scalar; undefined when there is no teacher
};

template <class Task>
concept MetaTask = requires(Task& t, const ParamSet& m, const ParamSet& th) {
  { t.support(m, th) } -> std::convertible_to<Objective>;
  { t.query(m, th) } -> std::convertible_to<Objective>;
};

struct MetaConfig {
  double inner_lr{0.005};
  double reg{0.01};
  bool second_order{false};
  double clip_norm{5.0};
  bool update_student{true};
  bool update_teacher{true};
};

// One plain gradient step. First order: M' holds fresh leaves, so gradients
// stop at M'. Second order: M' stays a differentiable function of M.
inline ParamSet inner_update(const ParamSet& params, const Var& loss, double alpha,
                             bool second_order) {
  const ad::Gradients g = ad::backward(loss, second_order);
  ParamSet fast = params;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Var& p = params.at(i);
    if (second_order) {
      fast.set_var(params.name_at(i), ad::sub(p, ad::scale(g.of(p), alpha)));
    } else {
      Tensor v = p.value();
      const Tensor gv = g.value_of(p);
      auto dst = v.data();
      const auto src = gv.data();
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] -= alpha * src[j];
      fast.set_value(params.name_at(i), std::move(v));
    }
  }
  return fast;
}

struct StepResult {
  double loss{0.0};       // sum of query losses
  double objective{0.0};  // loss + lambda * sum of regularizers
  double student_grad_norm{0.0};
  double teacher_grad_norm{0.0};
};

namespace detail {
inline void accumulate(std::vector<Tensor>& acc, const std::vector<Tensor>& g) {
  if (acc.empty()) {
    acc = g;
    return;
  }
  for (std::size_t i = 0; i < acc.size(); ++i) {
    auto a = acc[i].data();
    const auto b = g[i].data();
    for (std::size_t j = 0; j < a.size(); ++j) a[j] += b[j];
  }
}

inline void require_finite(const std::vector<Tensor>& grads, const ParamSet& params,
                           const std::string& who) {
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (!grads[i].all_finite())
      throw ad::NumericError("non-finite gradient", 0,
                             who + " gradient for '" + params.name_at(i) + "' is not finite");
}
}  // namespace detail

template <MetaTask Task>
StepResult meta_step(ParamSet& student, ParamSet& teacher, std::vector<Task>& tasks,
                     const MetaConfig& cfg, optim::Optimizer* student_opt,
                     optim::Optimizer* teacher_opt) {
  StepResult out;
  std::vector<Tensor> gs, gt;
  for (auto& task : tasks) {
    const Objective sup = task.support(student, teacher);
    const ParamSet fast = inner_update(student, sup.loss, cfg.inner_lr, cfg.second_order);
    const Objective q = task.query(fast, teacher);
    // The regularizer depends on the teacher only, so one backward pass
    // serves both the student and the teacher gradients.
    Var total = q.loss;
    if (q.weight_reg.defined() && cfg.reg != 0.0)
      total = ad::add(total, ad::scale(q.weight_reg, cfg.reg));
    out.loss += q.loss.item();
    out.objective += total.item();
    const ad::Gradients g = ad::backward(total);
    if (cfg.update_student)
      detail::accumulate(gs, ad::gradients_for(g, cfg.second_order ? student : fast));
    if (cfg.update_teacher && !teacher.empty())
      detail::accumulate(gt, ad::gradients_for(g, teacher));
  }
  if (cfg.update_student && !gs.empty()) {
    detail::require_finite(gs, student, "student");
    out.student_grad_norm = optim::clip_global_norm(gs, cfg.clip_norm);
    if (student_opt) student_opt->step(student, gs);
  }
  if (cfg.update_teacher && !gt.empty()) {
    detail::require_finite(gt, teacher, "teacher");
    out.teacher_grad_norm = optim::clip_global_norm(gt, cfg.clip_norm);
    if (teacher_opt) teacher_opt->step(teacher, optim::negated(std::move(gt)));
  }
  return out;
}

}  // namespace dast::maml
