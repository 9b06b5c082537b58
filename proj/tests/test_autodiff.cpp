#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "test_util.hpp"

using namespace dast;
using ad::ParamSet;
using ad::Tensor;
using ad::Var;
using testutil::random_tensor;

namespace {

Var scalar_leaf(double v) { return Var::leaf(Tensor::scalar(v)); }

// Collapses any tensor-valued op to a scalar with fixed random projection
// weights so every output coordinate contributes to the gradient.
Var project(const Var& y, std::uint64_t seed) {
  Rng rng(seed + 99);
  return ad::dot(y, Var::constant(random_tensor(y.rows(), y.cols(), rng)));
}

struct OpCase {
  std::string name;
  std::function<void(ParamSet&, Rng&)> make;
  std::function<Var(const ParamSet&)> fn;
};

std::vector<OpCase> primitive_cases() {
  const std::vector<std::size_t> ids{2, 0, 2, 1};
  std::vector<OpCase> cases;
  auto two = [](std::size_t r, std::size_t c) {
    return [r, c](ParamSet& p, Rng& rng) {
      p.add("a", random_tensor(r, c, rng));
      p.add("b", random_tensor(r, c, rng));
    };
  };
  auto one = [](std::size_t r, std::size_t c, double lo = -1.0, double hi = 1.0) {
    return [=](ParamSet& p, Rng& rng) { p.add("a", random_tensor(r, c, rng, lo, hi)); };
  };
  cases.push_back({"add", two(3, 4), [](const ParamSet& p) { return project(ad::add(p["a"], p["b"]), 1); }});
  cases.push_back({"add_broadcast",
                   [](ParamSet& p, Rng& rng) {
                     p.add("a", random_tensor(3, 4, rng));
                     p.add("b", random_tensor(1, 4, rng));
                   },
                   [](const ParamSet& p) { return project(ad::add(p["a"], p["b"]), 2); }});
  cases.push_back({"sub", two(2, 3), [](const ParamSet& p) { return project(ad::sub(p["a"], p["b"]), 3); }});
  cases.push_back({"mul", two(2, 3), [](const ParamSet& p) { return project(ad::mul(p["a"], p["b"]), 4); }});
  cases.push_back({"scale_affine", one(2, 2), [](const ParamSet& p) {
                     return project(ad::affine(ad::scale(p["a"], 1.7), -0.5, 0.3), 5);
                   }});
  for (int ta = 0; ta < 2; ++ta) {
    for (int tb = 0; tb < 2; ++tb) {
      cases.push_back({"matmul" + std::to_string(ta) + std::to_string(tb),
                       [ta, tb](ParamSet& p, Rng& rng) {
                         p.add("a", ta ? random_tensor(4, 3, rng) : random_tensor(3, 4, rng));
                         p.add("b", tb ? random_tensor(2, 4, rng) : random_tensor(4, 2, rng));
                       },
                       [ta, tb](const ParamSet& p) {
                         return project(ad::matmul(p["a"], p["b"], ta, tb), 6);
                       }});
    }
  }
  cases.push_back({"transpose", one(2, 5), [](const ParamSet& p) { return project(ad::transpose(p["a"]), 7); }});
  cases.push_back({"concat", two(2, 3), [](const ParamSet& p) {
                     return ad::add(project(ad::concat_cols({p["a"], p["b"]}), 8),
                                    project(ad::concat_rows({p["a"], p["b"]}), 9));
                   }});
  cases.push_back({"slice", one(4, 5), [](const ParamSet& p) {
                     return ad::add(project(ad::slice_rows(p["a"], 1, 3), 10),
                                    project(ad::slice_cols(p["a"], 2, 5), 11));
                   }});
  cases.push_back({"embed", one(2, 3), [](const ParamSet& p) {
                     return ad::add(project(ad::embed_rows(p["a"], 1, 4), 12),
                                    project(ad::embed_cols(p["a"], 2, 6), 13));
                   }});
  cases.push_back({"reductions", one(3, 4), [](const ParamSet& p) {
                     return ad::add(ad::add(project(ad::reduce_rows(p["a"]), 14), project(ad::reduce_cols(p["a"]), 15)),
                                    ad::add(ad::sum(p["a"]), ad::mean(ad::mul(p["a"], p["a"]))));
                   }});
  cases.push_back({"dot", two(1, 6), [](const ParamSet& p) { return ad::dot(p["a"], p["b"]); }});
  cases.push_back({"sigmoid", one(2, 3), [](const ParamSet& p) { return project(ad::sigmoid(p["a"]), 16); }});
  cases.push_back({"tanh", one(2, 3), [](const ParamSet& p) { return project(ad::tanh(p["a"]), 17); }});
  cases.push_back({"exp", one(2, 3), [](const ParamSet& p) { return project(ad::exp(p["a"]), 18); }});
  cases.push_back({"log", one(2, 3, 0.5, 2.0), [](const ParamSet& p) { return project(ad::log(p["a"]), 19); }});
  cases.push_back({"reciprocal_rsqrt", one(2, 3, 0.5, 2.0), [](const ParamSet& p) {
                     return ad::add(project(ad::reciprocal(p["a"]), 20), project(ad::rsqrt(p["a"]), 21));
                   }});
  cases.push_back({"softmax_rows", one(3, 5), [](const ParamSet& p) { return project(ad::softmax_rows(p["a"]), 22); }});
  cases.push_back({"gather_scatter_rows", one(3, 4), [ids](const ParamSet& p) {
                     return ad::add(project(ad::gather_rows(p["a"], ids), 23),
                                    project(ad::scatter_rows(ad::slice_rows(p["a"], 0, 3), {ids.data(), 3}, 5), 24));
                   }});
  cases.push_back({"gather_scatter_cols", one(4, 3), [ids](const ParamSet& p) {
                     return ad::add(project(ad::gather_cols(p["a"], ids), 25),
                                    project(ad::scatter_cols(p["a"], {ids.data(), 3}, 4), 26));
                   }});
  cases.push_back({"pick_place", one(4, 3), [ids](const ParamSet& p) {
                     return ad::add(project(ad::pick_per_row(p["a"], ids), 27),
                                    project(ad::place_per_row(ad::pick_per_row(p["a"], ids), ids, 3), 28));
                   }});
  cases.push_back({"layer_norm", one(3, 6), [](const ParamSet& p) { return project(ad::layer_norm_rows(p["a"]), 29); }});
  cases.push_back({"dropout_apply", one(2, 4), [](const ParamSet& p) {
                     Tensor mask(2, 4, 1.0);
                     mask[1] = 0.0;
                     mask[6] = 0.0;
                     return project(ad::dropout_apply(p["a"], mask, 0.75), 30);
                   }});
  cases.push_back({"relu_clamp", one(2, 4), [](const ParamSet& p) {
                     // Shift away from the kinks so central differences are exact.
                     const Var x = ad::affine(p["a"], 1.0, 0.0);
                     return ad::add(project(ad::relu(ad::mul(x, x)), 31),
                                    project(ad::clamp_min(ad::exp(x), 1e-3), 32));
                   }});
  return cases;
}

}  // namespace

TEST(Tensor, RejectsZeroExtentsAndLengthMismatch) {
  EXPECT_THROW(Tensor(0, 3), ad::ShapeError);
  EXPECT_THROW(Tensor(2, 2, std::vector<double>{1, 2, 3}), ad::ShapeError);
  const Tensor t(2, 3, std::vector<double>{1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t(1, 2), 6.0);
  EXPECT_EQ(t.size(), 6u);
}

TEST(Primitive, MatmulExample) {
  const Var a = Var::constant(Tensor(2, 2, {1, 2, 3, 4}));
  const Var b = Var::constant(Tensor(2, 1, {1, 1}));
  const Var y = ad::matmul(a, b);
  EXPECT_EQ(y.value(), Tensor(2, 1, {3, 7}));
}

TEST(Primitive, SoftmaxOfZerosIsUniform) {
  const Var y = ad::softmax_rows(Var::constant(Tensor(1, 4)));
  for (double v : y.value().data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Primitive, LogInvertsExp) {
  const Var y = ad::log(ad::exp(Var::scalar(0.7)));
  EXPECT_NEAR(y.item(), 0.7, 1e-15);
}

TEST(Primitive, ShapeMismatchNamesShapes) {
  try {
    ad::add(Var::constant(Tensor(2, 3)), Var::constant(Tensor(3, 2)));
    FAIL() << "expected ShapeError";
  } catch (const ad::ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2x3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("3x2"), std::string::npos) << msg;
  }
}

TEST(Primitive, NonFiniteValuesAreRejected) {
  EXPECT_THROW(ad::log(Var::scalar(0.0)), ad::NumericError);
  EXPECT_THROW(ad::log(Var::scalar(-1.0)), ad::NumericError);
  EXPECT_THROW(Var::leaf(Tensor::scalar(std::numeric_limits<double>::quiet_NaN())), ad::NumericError);
  try {
    ad::exp(Var::scalar(1000.0));
    FAIL() << "expected NumericError";
  } catch (const ad::NumericError& e) {
    EXPECT_GT(e.node_id(), 0u);
    EXPECT_EQ(e.kind(), "exp");
  }
}

TEST(Graph, ForwardEvalExamples) {
  ad::Graph add({"a", "b"}, [](const ad::Graph::Bindings& b) { return ad::add(b.at("a"), b.at("b")); });
  EXPECT_EQ(add.forward_eval({{"a", Var::scalar(1)}, {"b", Var::scalar(2)}}).item(), 3.0);

  ad::Graph dot({"L", "w"}, [](const ad::Graph::Bindings& b) { return ad::dot(b.at("L"), b.at("w")); });
  const Var L = Var::constant(Tensor::row({1, 2, 3}));
  EXPECT_DOUBLE_EQ(dot.forward_eval({{"L", L}, {"w", Var::constant(Tensor(1, 3, 1.0 / 3.0))}}).item(), 2.0);
  EXPECT_NEAR(dot.forward_eval({{"L", L}, {"w", Var::constant(Tensor::row({0.2, 0.3, 0.5}))}}).item(), 2.3,
              1e-15);
}

TEST(Graph, UnboundLeafIsNamed) {
  ad::Graph g({"a", "b"}, [](const ad::Graph::Bindings& b) { return ad::add(b.at("a"), b.at("b")); });
  try {
    g.forward_eval({{"a", Var::scalar(1)}});
    FAIL() << "expected UnboundLeafError";
  } catch (const ad::UnboundLeafError& e) {
    EXPECT_EQ(e.leaf(), "b");
  }
}

TEST(Graph, BackwardBeforeForwardFails) {
  ad::Graph g({"a"}, [](const ad::Graph::Bindings& b) { return b.at("a"); });
  EXPECT_THROW(g.backward(Tensor::scalar(1.0)), std::logic_error);
}

TEST(Backward, QuadraticDerivative) {
  const Var m = scalar_leaf(0.0);
  const Var d = ad::affine(m, 1.0, -2.0);
  const auto g = ad::backward(ad::mul(d, d));
  EXPECT_DOUBLE_EQ(g.value_of(m)[0], -4.0);
}

TEST(Backward, SoftmaxJacobianRowsSumToZero) {
  const Var x = Var::leaf(Tensor::row({0.3, 0.3, 0.3, 0.3}));
  const Var c = Var::constant(Tensor::row({1.0, -2.0, 0.5, 4.0}));
  const auto g = ad::backward(ad::dot(ad::softmax_rows(x), c));
  const Tensor gx = g.value_of(x);
  double s = 0.0;
  for (double v : gx.data()) s += v;
  EXPECT_NEAR(s, 0.0, 1e-15);
}

TEST(Backward, WeightedLossChainRule) {
  // L(m) = [m^2, 3m]; d/dm dot(L, w) = w0 * 2m + w1 * 3.
  const Var m = scalar_leaf(1.5);
  const Var L = ad::concat_cols({ad::mul(m, m), ad::scale(m, 3.0)});
  const Var w = Var::constant(Tensor::row({0.25, 0.75}));
  const auto g = ad::backward(ad::dot(L, w));
  EXPECT_DOUBLE_EQ(g.value_of(m)[0], 0.25 * 2 * 1.5 + 0.75 * 3);
}

TEST(Backward, ReusedInputAccumulates) {
  const Var x = scalar_leaf(3.0);
  const auto g = ad::backward(ad::mul(x, x));
  EXPECT_DOUBLE_EQ(g.value_of(x)[0], 6.0);
}

TEST(Backward, AbsentLeafGradientIsZero) {
  const Var x = scalar_leaf(1.0), y = scalar_leaf(2.0);
  const auto g = ad::backward(ad::scale(x, 2.0));
  EXPECT_FALSE(g.has(y));
  EXPECT_EQ(g.value_of(y)[0], 0.0);
}

TEST(Backward, SeedShapeMustMatch) {
  const Var x = Var::leaf(Tensor(1, 3, 1.0));
  EXPECT_THROW(ad::backward(ad::exp(x), Tensor(3, 1, 1.0)), ad::ShapeError);
}

TEST(Backward, LinearInSeed) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Var a = Var::leaf(random_tensor(2, 3, rng));
    const Var b = Var::leaf(random_tensor(3, 4, rng));
    const Var y = ad::tanh(ad::matmul(a, b));
    const Tensor s = random_tensor(2, 4, rng);
    Tensor s2 = s;
    for (double& v : s2.data()) v *= 2.0;
    const auto g1 = ad::backward(y, s);
    const auto g2 = ad::backward(y, s2);
    for (const Var* leaf : {&a, &b}) {
      const Tensor t1 = g1.value_of(*leaf), t2 = g2.value_of(*leaf);
      for (std::size_t i = 0; i < t1.size(); ++i) EXPECT_DOUBLE_EQ(t2[i], 2.0 * t1[i]);
    }
  }
}

TEST(Backward, SecondOrderThroughGradient) {
  // f = x^3: f' = 3x^2 and f'' = 6x, obtained by differentiating the gradient graph.
  const Var x = scalar_leaf(1.3);
  const Var f = ad::mul(ad::mul(x, x), x);
  const auto g = ad::backward(f, true);
  const Var dfdx = g.of(x);
  EXPECT_TRUE(dfdx.requires_grad());
  EXPECT_NEAR(dfdx.item(), 3 * 1.3 * 1.3, 1e-14);
  const auto gg = ad::backward(dfdx);
  EXPECT_NEAR(gg.value_of(x)[0], 6 * 1.3, 1e-14);
}

TEST(Backward, FirstOrderGradientIsDetached) {
  const Var x = scalar_leaf(1.3);
  const auto g = ad::backward(ad::mul(x, x));
  EXPECT_FALSE(g.of(x).requires_grad());
}

TEST(GradMode, NoGradGuardStopsRecording) {
  const Var x = scalar_leaf(2.0);
  {
    ad::NoGradGuard guard;
    EXPECT_FALSE(ad::exp(x).requires_grad());
  }
  EXPECT_TRUE(ad::exp(x).requires_grad());
}

TEST(Determinism, IdenticalInputsGiveIdenticalGradients) {
  auto run = [] {
    Rng rng(5);
    const Var a = Var::leaf(random_tensor(3, 3, rng));
    const auto g = ad::backward(ad::sum(ad::softmax_rows(ad::matmul(a, a))));
    return g.value_of(a);
  };
  EXPECT_EQ(run(), run());
}

TEST(GradCheck, QuadraticIsExact) {
  ParamSet p;
  p.add("m", Tensor::scalar(0.0));
  const auto r = ad::grad_check(
      [](const ParamSet& q) {
        const Var d = ad::affine(q["m"], 1.0, -2.0);
        return ad::mul(d, d);
      },
      p, 1e-5);
  EXPECT_LT(r.max_relative_error, 1e-8);
}

TEST(GradCheck, RejectsBadEpsilon) {
  ParamSet p;
  p.add("m", Tensor::scalar(0.0));
  auto f = [](const ParamSet& q) { return q["m"]; };
  EXPECT_THROW(ad::grad_check(f, p, 1e-9), std::invalid_argument);
  EXPECT_THROW(ad::grad_check(f, p, 0.05), std::invalid_argument);
}

TEST(GradCheck, NonFiniteIntermediateReportsNode) {
  ParamSet p;
  p.add("m", Tensor::scalar(0.0));
  EXPECT_THROW(ad::grad_check([](const ParamSet& q) { return ad::log(q["m"]); }, p, 1e-5),
               ad::NumericError);
}

TEST(GradCheck, EveryPrimitiveOverTwentySeeds) {
  for (const auto& c : primitive_cases()) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed * 31 + 7);
      ParamSet p;
      c.make(p, rng);
      const auto r = ad::grad_check(c.fn, p, 1e-5);
      EXPECT_LT(r.max_relative_error, 1e-4) << c.name << " seed " << seed << " at "
                                            << r.worst_parameter << "[" << r.worst_index << "]";
    }
  }
}

TEST(Softmax, RowsAreProbabilityVectors) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const Var y = ad::softmax_rows(Var::constant(random_tensor(4, 7, rng, -30, 30)));
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 7; ++c) {
        EXPECT_GE(y.value()(r, c), 0.0);
        s += y.value()(r, c);
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Mean, IsBitwiseDotWithUniform) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const std::size_t n = 1 + rng.index(17);
    const Var x = Var::constant(random_tensor(1, n, rng, 0, 10));
    EXPECT_EQ(ad::mean(x).item(), ad::dot(x, Var::constant(Tensor(1, n, 1.0 / n))).item());
  }
}

TEST(ParamSet, NamesAreUniqueAndOrdered) {
  ParamSet p;
  p.add("b", Tensor::scalar(1));
  p.add("a", Tensor::scalar(2));
  EXPECT_THROW(p.add("a", Tensor::scalar(3)), std::invalid_argument);
  EXPECT_EQ(p.names(), (std::vector<std::string>{"b", "a"}));
  EXPECT_THROW(p.set_value("a", Tensor(2, 1)), ad::ShapeError);
  EXPECT_THROW(p["missing"], std::out_of_range);
}

TEST(ParamSet, CloneIsIndependent) {
  ParamSet p;
  p.add("w", Tensor(2, 2, 1.0));
  ParamSet q = p.clone();
  EXPECT_TRUE(q.values_equal(p));
  q.set_value("w", Tensor(2, 2, 5.0));
  EXPECT_EQ(p["w"].value()(0, 0), 1.0);
  EXPECT_TRUE(ParamSet().clone().empty());
}

TEST(ParamSet, VersionAdvancesOnMutation) {
  ParamSet p;
  p.add("w", Tensor::scalar(1));
  const auto v = p.version();
  p.set_value("w", Tensor::scalar(2));
  EXPECT_GT(p.version(), v);
}

TEST(ParamSet, DetachedHasNoGradient) {
  ParamSet p;
  p.add("w", Tensor::scalar(1));
  const ParamSet d = p.detached();
  EXPECT_FALSE(d["w"].requires_grad());
  EXPECT_FALSE(ad::exp(d["w"]).requires_grad());
}
