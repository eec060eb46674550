#include <cmath>
#include <functional>

#include <gtest/gtest.h>

#include "tvi/diffgraph.hpp"

using namespace tvi;
using namespace tvi::ad;

namespace {

ParamVector flat(const Vector& values) {
  ParamLayout layout;
  layout.add("p", 0, "flat", static_cast<int>(values.size()), 1);
  ParamVector p(layout);
  p.values = values;
  return p;
}

Vector central_differences(const ParamVector& params, const std::function<Var(Tape&)>& f, double h) {
  Vector g(params.values.size());
  for (Eigen::Index i = 0; i < params.values.size(); ++i) {
    ParamVector plus = params;
    ParamVector minus = params;
    plus.values[i] += h;
    minus.values[i] -= h;
    g[i] = (evaluate_with_gradient(plus, f).value - evaluate_with_gradient(minus, f).value) / (2.0 * h);
  }
  return g;
}

double max_rel_error(const Vector& a, const Vector& b) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), 1e-3});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

}  // namespace

TEST(Diffgraph, Square) {
  auto r = evaluate_with_gradient(flat(Vector::Constant(1, 3.0)), [](Tape& t) { return sum(square(t.param(0))); });
  EXPECT_EQ(r.value, 9.0);
  EXPECT_EQ(r.gradient[0], 6.0);
}

TEST(Diffgraph, LogSumExpGradient) {
  auto r = evaluate_with_gradient(flat(Vector::Zero(2)), [](Tape& t) { return log(sum(exp(t.param(0)))); });
  EXPECT_NEAR(r.value, std::log(2.0), 1e-15);
  EXPECT_NEAR(r.gradient[0], 0.5, 1e-15);
  EXPECT_NEAR(r.gradient[1], 0.5, 1e-15);
}

TEST(Diffgraph, EveryPrimitiveMatchesFiniteDifferences) {
  RngStream rng(21);
  struct Case {
    const char* name;
    std::function<Var(Tape&, Var)> f;
    double lo;
  };
  Matrix w(3, 2);
  w << 0.3, -0.2, 0.5, 0.1, -0.4, 0.7;
  const std::vector<Case> cases = {
      {"add", [](Tape& t, Var p) { return sum(square(p + t.constant(0.3))); }, -2},
      {"sub", [](Tape& t, Var p) { return sum(square(p - t.constant(0.3))); }, -2},
      {"mul", [](Tape&, Var p) { return sum(p * p * p); }, -2},
      {"div", [](Tape& t, Var p) { return sum(t.constant(1.0) / (p + 3.0)); }, -2},
      {"exp", [](Tape&, Var p) { return sum(exp(p)); }, -2},
      {"log", [](Tape&, Var p) { return sum(log(p)); }, 0.2},
      {"tanh", [](Tape&, Var p) { return sum(tanh(p)); }, -2},
      {"sigmoid", [](Tape&, Var p) { return sum(sigmoid(p)); }, -2},
      {"silu", [](Tape&, Var p) { return sum(silu(p)); }, -2},
      {"softplus", [](Tape&, Var p) { return sum(softplus(p)); }, -2},
      {"pow", [](Tape&, Var p) { return sum(pow(p, 1.7)); }, 0.2},
      {"mean", [](Tape&, Var p) { return mean(square(p)); }, -2},
      {"matmul",
       [w](Tape& t, Var p) {
         Var row = gather_cols(p, {0, 0, 0});
         return sum(square(matmul(ad::Var(row), t.constant(w))));
       },
       -2},
      {"softmax", [](Tape& t, Var p) { return sum(softmax_rows(p) * t.constant(Matrix::Constant(1, 1, 2.0))); }, -2},
      {"log_sum_exp", [](Tape&, Var p) { return sum(log_sum_exp_rows(p)); }, -2},
  };
  for (const auto& c : cases) {
    for (int trial = 0; trial < 10; ++trial) {
      Matrix v(1, 3);
      for (int i = 0; i < 3; ++i) v(0, i) = rng.uniform(c.lo, 2.0);
      ParamLayout layout;
      layout.add("row", 0, "row", 1, 3);
      ParamVector p(layout);
      p.values = Eigen::Map<Vector>(v.data(), 3);
      auto f = [&](Tape& t) { return c.f(t, t.param(0)); };
      auto r = evaluate_with_gradient(p, f);
      Vector fd = central_differences(p, f, 1e-6);
      EXPECT_LT(max_rel_error(r.gradient, fd), 1e-6) << c.name;
    }
  }
}

TEST(Diffgraph, RandomCompositeOfFiftyParameters) {
  RngStream rng(5);
  ParamLayout layout;
  layout.add("w1", 0, "w", 4, 6);
  layout.add("b1", 0, "b", 1, 6);
  layout.add("w2", 1, "w", 6, 3);
  layout.add("b2", 1, "b", 1, 2);  // 24 + 6 + 18 + 2 = 50
  ParamVector p(layout);
  ASSERT_EQ(layout.total_size(), 50u);
  for (Eigen::Index i = 0; i < p.values.size(); ++i) p.values[i] = 0.5 * rng.normal();
  Matrix x(5, 4);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  auto f = [&](Tape& t) {
    Var h = silu(matmul(t.constant(x), t.param(0)) + t.param(1));
    Var o = matmul(tanh(h), t.param(2));
    Var a = gather_cols(o, {0, 1});
    Var b = softplus(gather_cols(o, {2, 2})) + t.param(3);
    Var parts[] = {a, b};
    Var c = concat_cols(parts);
    return mean(log_sum_exp_rows(c)) + sum(softmax_rows(c) * exp(scale(c, 0.1))) / t.constant(3.0);
  };
  auto r = evaluate_with_gradient(p, f);
  Vector fd = central_differences(p, f, 1e-5);
  EXPECT_LT(max_rel_error(r.gradient, fd), 1e-4);
}

TEST(Diffgraph, LinearMatchesMatmulPlusBias) {
  RngStream rng(12);
  ParamLayout layout;
  layout.add("x", 0, "x", 6, 3);
  layout.add("w", 0, "w", 3, 4);
  layout.add("b", 0, "b", 1, 4);
  ParamVector p(layout);
  for (Eigen::Index i = 0; i < p.values.size(); ++i) p.values[i] = rng.normal();
  auto fused = [](Tape& t) { return sum(tanh(linear(t.param(0), t.param(1), t.param(2)))); };
  auto plain = [](Tape& t) { return sum(tanh(matmul(t.param(0), t.param(1)) + t.param(2))); };
  auto a = evaluate_with_gradient(p, fused);
  auto b = evaluate_with_gradient(p, plain);
  EXPECT_NEAR(a.value, b.value, 1e-12);
  EXPECT_LT((a.gradient - b.gradient).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT(max_rel_error(a.gradient, central_differences(p, fused, 1e-5)), 1e-4);
}

TEST(Diffgraph, ConstantSubexpressionHasZeroGradient) {
  ParamLayout layout;
  layout.add("a", 0, "a", 1, 2);
  layout.add("b", 0, "b", 1, 2);
  ParamVector p(layout);
  p.values << 0.5, -0.3, 1.2, 2.0;
  auto r = evaluate_with_gradient(p, [](Tape& t) {
    t.param(1);  // touched but unused
    return sum(exp(t.param(0))) + sum(t.constant(Matrix::Constant(1, 2, 4.0)));
  });
  EXPECT_EQ(r.gradient[2], 0.0);
  EXPECT_EQ(r.gradient[3], 0.0);
}

TEST(Diffgraph, Deterministic) {
  ParamVector p = flat((Vector(3) << 0.1, 0.2, 0.3).finished());
  auto f = [](Tape& t) { return sum(silu(t.param(0)) * tanh(t.param(0))); };
  auto a = evaluate_with_gradient(p, f);
  auto b = evaluate_with_gradient(p, f);
  EXPECT_EQ(a.value, b.value);
  EXPECT_EQ(a.gradient, b.gradient);
}

TEST(Diffgraph, ValueMatchesPlainEvaluation) {
  Vector v(3);
  v << 0.3, -1.1, 2.0;
  auto r = evaluate_with_gradient(flat(v), [](Tape& t) { return sum(exp(t.param(0)) * t.param(0)); });
  double plain = 0.0;
  for (int i = 0; i < 3; ++i) plain += std::exp(v[i]) * v[i];
  EXPECT_NEAR(r.value, plain, 1e-14);
}

TEST(Diffgraph, UnregisteredPrimitiveIsNamed) {
  Tape t;
  Var a = t.constant(1.0);
  const Var in[] = {a};
  try {
    apply("erfcx", in);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("erfcx"), std::string::npos);
  }
  EXPECT_NEAR(apply("exp", in).scalar(), std::exp(1.0), 1e-15);
}

TEST(Diffgraph, NonFiniteReportsNode) {
  Tape t;
  Var a = t.constant(-1.0);
  try {
    log(a);
    FAIL();
  } catch (const NonFiniteError& e) {
    EXPECT_EQ(e.op(), "log");
    EXPECT_EQ(e.node(), 1u);
  }
}

TEST(BatchedForward, MeanOfSamples) {
  ParamVector p = flat((Vector(2) << 0.4, -0.7).finished());
  auto per_sample = [](Tape& t, Var batch) {
    Var w = t.param(0);  // 2 x 1
    return square(matmul(batch, w)) + sum(w);
  };
  Matrix one(1, 2);
  one << 1.0, 2.0;
  Matrix repeated = one.replicate(4, 1);
  auto single = batched_forward(p, one, per_sample);
  auto many = batched_forward(p, repeated, per_sample);
  EXPECT_NEAR(single.value, many.value, 1e-14);

  Matrix three(3, 2);
  three << 1.0, 2.0, -0.5, 0.3, 2.0, 1.0;
  auto all = batched_forward(p, three, per_sample);
  Vector avg_grad = Vector::Zero(2);
  double avg = 0.0;
  for (int r = 0; r < 3; ++r) {
    auto s = batched_forward(p, three.row(r), per_sample);
    avg += s.value / 3.0;
    avg_grad += s.gradient / 3.0;
  }
  EXPECT_NEAR(all.value, avg, 1e-14);
  EXPECT_LT((all.gradient - avg_grad).cwiseAbs().maxCoeff(), 1e-13);
  EXPECT_THROW(batched_forward(p, Matrix(0, 2), per_sample), std::invalid_argument);
}
