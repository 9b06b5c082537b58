// First-order optimizers over a ParamSet and global-norm gradient clipping.
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dast/autodiff.hpp"

namespace dast::optim {

using ad::ParamSet;
using ad::Tensor;

inline double global_norm(const std::vector<Tensor>& grads) {
  double s = 0.0;
  for (const auto& g : grads)
    for (double x : g.data()) s += x * x;
  return std::sqrt(s);
}

// Rescales so the joint L2 norm is at most `max_norm`; returns the norm before
// clipping. A non-positive bound disables clipping.
inline double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (max_norm > 0.0 && norm > max_norm) {
    const double c = max_norm / norm;
    for (auto& g : grads)
      for (double& x : g.data()) x *= c;
  }
  return norm;
}

enum class Kind { adam, sgd };

inline Kind kind_from_string(const std::string& s) {
  if (s == "adam") return Kind::adam;
  if (s == "sgd") return Kind::sgd;
  throw std::invalid_argument("unknown optimizer '" + s + "' (expected adam or sgd)");
}

inline std::string to_string(Kind k) { return k == Kind::adam ? "adam" : "sgd"; }

class Optimizer {
 public:
  Optimizer() = default;
  Optimizer(Kind kind, double lr) : kind_(kind), lr_(lr) {}

  Kind kind() const noexcept { return kind_; }
  double base_lr() const noexcept { return lr_; }
  double lr_multiplier() const noexcept { return multiplier_; }
  void set_lr_multiplier(double m) { multiplier_ = m; }
  double effective_lr() const noexcept { return lr_ * multiplier_; }
  std::uint64_t steps() const noexcept { return t_; }

  // Moves parameters along -grads (descent). Pass negated gradients to ascend.
  void step(ParamSet& params, const std::vector<Tensor>& grads) {
    if (grads.size() != params.size())
      throw std::invalid_argument("optimizer: gradient count does not match parameters");
    if (kind_ == Kind::adam && m_.empty()) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        m_.emplace_back(params.at(i).rows(), params.at(i).cols());
        v_.emplace_back(params.at(i).rows(), params.at(i).cols());
      }
    }
    ++t_;
    const double lr = effective_lr();
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor value = params.at(i).value();
      const auto g = grads[i].data();
      auto p = value.data();
      if (p.size() != g.size()) throw ad::ShapeError("optimizer: gradient shape mismatch");
      if (kind_ == Kind::sgd) {
        for (std::size_t j = 0; j < p.size(); ++j) p[j] -= lr * g[j];
      } else {
        auto m = m_[i].data();
        auto v = v_[i].data();
        for (std::size_t j = 0; j < p.size(); ++j) {
          m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
          v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
          p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
        }
      }
      params.set_value(params.name_at(i), std::move(value));
    }
  }

  // Moment buffers (empty for SGD or before the first step), for checkpoints.
  const std::vector<Tensor>& first_moments() const noexcept { return m_; }
  const std::vector<Tensor>& second_moments() const noexcept { return v_; }
  void restore(std::uint64_t t, double multiplier, std::vector<Tensor> m, std::vector<Tensor> v) {
    t_ = t;
    multiplier_ = multiplier;
    m_ = std::move(m);
    v_ = std::move(v);
  }

  static constexpr double beta1 = 0.9;
  static constexpr double beta2 = 0.999;
  static constexpr double eps = 1e-8;

 private:
  Kind kind_{Kind::adam};
  double lr_{1e-3};
  double multiplier_{1.0};
  std::uint64_t t_{0};
  std::vector<Tensor> m_, v_;
};

inline std::vector<Tensor> negated(std::vector<Tensor> grads) {
  for (auto& g : grads)
    for (double& x : g.data()) x = -x;
  return grads;
}

}  // namespace dast::optim
