#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "tvi/targets.hpp"

using namespace tvi;

namespace {

EightSchoolsData fixture() { return EightSchoolsData::load(std::string(TVI_DATA_DIR) + "/eight_schools.json"); }

double naive_gm(const GmSpec& s, const Vector& x) {
  double total = 0.0;
  const int d = s.dim();
  for (int k = 0; k < s.modes(); ++k) {
    const double sq = (x - s.centers.row(k).transpose()).squaredNorm();
    total += s.weights[k] * std::pow(2.0 * M_PI * s.sigma * s.sigma, -0.5 * d) * std::exp(-0.5 * sq / (s.sigma * s.sigma));
  }
  return std::log(total);
}

double normal_logpdf(double x, double mean, double sd) {
  const double r = (x - mean) / sd;
  return -0.5 * std::log(2.0 * M_PI) - std::log(sd) - 0.5 * r * r;
}

double schools_loglik(const EightSchoolsData& data, double mu, double tau, const Vector& eta) {
  double total = 0.0;
  for (int j = 0; j < 8; ++j) total += normal_logpdf(data.y[j], mu + tau * eta[j], data.sigma[j]);
  return total;
}

// Constrained-space log density in (mu, tau, eta): no Jacobian.
double schools_constrained(const EightSchoolsData& data, double mu, double tau, const Vector& eta) {
  double lp = schools_loglik(data, mu, tau, eta) + normal_logpdf(mu, 0.0, 5.0);
  for (int j = 0; j < 8; ++j) lp += normal_logpdf(eta[j], 0.0, 1.0);
  lp += std::log(2.0 / (M_PI * 5.0 * (1.0 + (tau / 5.0) * (tau / 5.0))));
  return lp;
}

Vector fd_gradient(const TargetModel& t, const Vector& x) {
  Vector g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Vector p = x;
    Vector m = x;
    p[i] += 1e-6;
    m[i] -= 1e-6;
    g[i] = (t.log_density(p) - t.log_density(m)) / 2e-6;
  }
  return g;
}

}  // namespace

TEST(RingGm, Geometry) {
  const GmSpec s = ring_gm_2d();
  EXPECT_NEAR(s.centers(0, 0), 7.0, 1e-15);
  EXPECT_NEAR(s.centers(0, 1), 3.0, 1e-15);
  EXPECT_EQ(s.modes(), 6);
  EXPECT_EQ(s.sigma, 0.38);
  for (int i = 0; i < 6; ++i) {
    EXPECT_NEAR((s.centers.row(i) - Eigen::RowVector2d(3.0, 3.0)).norm(), 4.0, 1e-12);
    for (int j = i + 1; j < 6; ++j) EXPECT_GE((s.centers.row(i) - s.centers.row(j)).norm(), 4.0 - 1e-12);
  }
  EXPECT_NEAR(s.weights.sum(), 1.0, 1e-15);
}

TEST(RingGm, DensityAtMode) {
  const GmSpec s = ring_gm_2d();
  const Vector x = Eigen::Vector2d(7.0, 3.0);
  EXPECT_NEAR(gm_log_density(s, x), naive_gm(s, x), 1e-12);
  EXPECT_NEAR(gm_log_density(s, x), std::log(1.0 / 6.0) - std::log(2.0 * M_PI * 0.38 * 0.38), 1e-12);
}

TEST(RingGm, MatchesNaiveSum) {
  const GmSpec s = ring_gm_2d();
  RngStream rng(3);
  for (int i = 0; i < 500; ++i) {
    const Vector x = Eigen::Vector2d(rng.uniform(-2.0, 8.0), rng.uniform(-2.0, 8.0));
    const double naive = naive_gm(s, x);
    if (std::isfinite(naive) && naive > -600.0) {
      EXPECT_NEAR(gm_log_density(s, x), naive, 1e-9);
    }
  }
}

TEST(RingGm, QuadratureIntegratesToOne) {
  const GmSpec s = ring_gm_2d();
  const int n = 1801;
  const double h = 18.0 / (n - 1);
  double total = 0.0;
  Vector x(2);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      x << -6.0 + i * h, -6.0 + j * h;
      const double w = ((i == 0 || i == n - 1) ? 0.5 : 1.0) * ((j == 0 || j == n - 1) ? 0.5 : 1.0);
      total += w * std::exp(gm_log_density(s, x));
    }
  }
  EXPECT_NEAR(total * h * h, 1.0, 1e-3);
}

TEST(Gm, SingleUnitComponent) {
  GmSpec s;
  s.centers = Matrix::Constant(1, 10, 0.7);
  s.sigma = 1.0;
  s.weights = Vector::Ones(1);
  EXPECT_NEAR(gm_log_density(s, Vector::Constant(10, 0.7)), -5.0 * std::log(2.0 * M_PI), 1e-12);
  EXPECT_THROW(gm_log_density(s, Vector::Zero(3)), std::invalid_argument);
}

TEST(Gm, PermutationSymmetry) {
  GmSpec s = ring_gm_2d();
  GmSpec p = s;
  const int order[] = {3, 1, 5, 0, 4, 2};
  for (int k = 0; k < 6; ++k) p.centers.row(k) = s.centers.row(order[k]);
  const Vector center = Eigen::Vector2d(3.0, 3.0);
  EXPECT_NEAR(gm_log_density(s, center), gm_log_density(p, center), 1e-13);
  RngStream rng(4);
  for (int i = 0; i < 20; ++i) {
    const Vector x = Eigen::Vector2d(rng.uniform(-1.0, 7.0), rng.uniform(-1.0, 7.0));
    EXPECT_NEAR(gm_log_density(s, x), gm_log_density(p, x), 1e-12);
  }
}

TEST(Gm, GradientMatchesFiniteDifferences) {
  const GmInstance gm = make_gm(10, 5, 2);
  RngStream rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    Vector x(10);
    for (int j = 0; j < 10; ++j) x[j] = rng.uniform(-5.0, 5.0);
    Vector g(10);
    gm.target.density(x.data(), g.data());
    EXPECT_LT((g - fd_gradient(gm.target, x)).cwiseAbs().maxCoeff(), 1e-5 * std::max(1.0, g.cwiseAbs().maxCoeff()));
  }
}

TEST(Algorithm1, SingleCenter) {
  GmGenConfig cfg;
  cfg.K = 1;
  cfg.d = 3;
  cfg.d_min = 1.0;
  cfg.d_max = 2.0;
  RngStream rng(1);
  const Matrix c = generate_gm_centers(cfg, rng);
  ASSERT_EQ(c.rows(), 1);
  EXPECT_LE(c.cwiseAbs().maxCoeff(), 5.0);
}

TEST(Algorithm1, RadiiFromChiSquareQuantiles) {
  EXPECT_NEAR(gm_min_distance(10), 4.8176, 1e-3);
  EXPECT_NEAR(gm_max_distance(10), 5.4395, 1e-3);
  EXPECT_NEAR(gm_min_distance(20), std::sqrt(37.566), 1e-3);
}

TEST(Algorithm1, ConstraintsHoldAcrossSeeds) {
  for (int d : {10, 20}) {
    const std::uint64_t seeds = d == 10 ? 100 : 20;  // the acceptance suite runs 100 at d=20
    for (std::uint64_t seed = 0; seed < seeds; ++seed) {
      const GmInstance gm = make_gm(d, 5, seed);
      const Matrix& c = gm.spec.centers;
      ASSERT_EQ(c.rows(), 5);
      EXPECT_LE(c.cwiseAbs().maxCoeff(), 5.0);
      for (int i = 1; i < 5; ++i) {
        double nearest = 1e300;
        for (int j = 0; j < i; ++j) nearest = std::min(nearest, (c.row(i) - c.row(j)).norm());
        EXPECT_LT(nearest, gm.spec.d_max) << "d=" << d << " seed=" << seed;
      }
      for (int i = 0; i < 5; ++i) {
        for (int j = i + 1; j < 5; ++j) EXPECT_GT((c.row(i) - c.row(j)).norm(), gm.spec.d_min);
      }
    }
  }
}

TEST(Algorithm1, DeterministicAndFailsLoudly) {
  EXPECT_EQ(make_gm(10, 5, 7).spec.centers, make_gm(10, 5, 7).spec.centers);
  GmGenConfig cfg;
  cfg.K = 3;
  cfg.d = 2;
  cfg.d_min = 30.0;  // larger than the box diagonal
  cfg.d_max = 31.0;
  cfg.M = 100;
  cfg.max_tries = 5;
  RngStream rng(1);
  try {
    generate_gm_centers(cfg, rng);
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("could not place 3 centers"), std::string::npos);
  }
  cfg.d_max = 10.0;
  EXPECT_THROW(generate_gm_centers(cfg, rng), std::invalid_argument);
  EXPECT_THROW(make_gm(1, 2, 0), std::invalid_argument);
}

TEST(GmSpecJson, RoundTrip) {
  const GmInstance gm = make_gm(10, 5, 3);
  const GmSpec back = gm_spec_from_json(gm_spec_to_json(gm.spec));
  EXPECT_EQ(back.centers, gm.spec.centers);
  EXPECT_EQ(back.sigma, gm.spec.sigma);
  EXPECT_EQ(back.weights, gm.spec.weights);
  EXPECT_EQ(back.seed, 3u);
  EXPECT_EQ(back.d_min, gm.spec.d_min);
  EXPECT_THROW(gm_spec_from_json("{\"centers\": [[0, 0]], \"dim\": 2, \"sigma\": 1, \"weights\": [0.5]}"),
               std::invalid_argument);
  EXPECT_THROW(gm_spec_from_json("{\"centers\": [[0, 0], [0, 0]], \"dim\": 2, \"sigma\": 1, \"weights\": [0.5, 0.5]}"),
               std::invalid_argument);
}

TEST(EightSchools, FixtureValues) {
  const auto data = fixture();
  const std::array<double, 8> y{28, 8, -3, 7, -1, 1, 18, 12};
  const std::array<double, 8> s{15, 10, 16, 11, 9, 11, 10, 18};
  EXPECT_EQ(data.y, y);
  EXPECT_EQ(data.sigma, s);
}

TEST(EightSchools, MatchesConstrainedDensityPlusJacobian) {
  const auto data = fixture();
  RngStream rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    Vector u(10);
    for (int j = 0; j < 10; ++j) u[j] = 2.0 * rng.normal();
    const double tau = std::exp(u[1]);
    const Vector eta = u.tail(8);
    EXPECT_NEAR(eight_schools_log_density(data, u), schools_constrained(data, u[0], tau, eta) + u[1], 1e-10);
  }
  EXPECT_THROW(eight_schools_log_density(data, Vector::Zero(9)), std::invalid_argument);
}

TEST(EightSchools, JacobianSliceIntegral) {
  // Integrating over log tau must agree with integrating the constrained
  // density over tau.
  const auto data = fixture();
  Vector eta(8);
  eta << 0.3, -0.2, 0.5, 0.1, -0.4, 0.2, 0.6, -0.1;
  const double mu = 4.0;
  double over_u = 0.0;
  const int n = 40001;
  const double lo = -25.0;
  const double hi = 8.0;
  const double h = (hi - lo) / (n - 1);
  Vector u(10);
  u << mu, 0.0, eta;
  for (int i = 0; i < n; ++i) {
    u[1] = lo + i * h;
    over_u += ((i == 0 || i == n - 1) ? 0.5 : 1.0) * std::exp(eight_schools_log_density(data, u) + 30.0);
  }
  over_u *= h;
  double over_tau = 0.0;
  const double th = std::exp(hi) / (n - 1);
  for (int i = 1; i < n; ++i) {
    over_tau += ((i == n - 1) ? 0.5 : 1.0) * std::exp(schools_constrained(data, mu, i * th, eta) + 30.0);
  }
  over_tau += 0.5 * std::exp(schools_constrained(data, mu, 0.0, eta) + 30.0);
  over_tau *= th;
  EXPECT_NEAR(over_u / over_tau, 1.0, 1e-4);
}

TEST(EightSchools, PriorIntegratesToOne) {
  // Strip the likelihood and the eta factors (eta = 0), then integrate the
  // (mu, log tau) prior on a grid.
  const auto data = fixture();
  const Vector eta = Vector::Zero(8);
  const double eta_part = 8.0 * normal_logpdf(0.0, 0.0, 1.0);
  const int n = 801;
  double total = 0.0;
  const double hm = 80.0 / (n - 1);
  const double hs = 60.0 / (n - 1);
  Vector u(10);
  u.tail(8).setZero();
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < n; ++k) {
      u[0] = -40.0 + i * hm;
      u[1] = -30.0 + k * hs;
      const double prior = eight_schools_log_density(data, u) - schools_loglik(data, u[0], std::exp(u[1]), eta) - eta_part;
      total += ((i == 0 || i == n - 1) ? 0.5 : 1.0) * ((k == 0 || k == n - 1) ? 0.5 : 1.0) * std::exp(prior);
    }
  }
  EXPECT_NEAR(total * hm * hs, 1.0, 1e-2);
}

TEST(EightSchools, TranslationConsistentInMu) {
  const auto data = fixture();
  EightSchoolsData shifted = data;
  const double c = 3.5;
  for (auto& y : shifted.y) y += c;
  RngStream rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    Vector u(10);
    for (int j = 0; j < 10; ++j) u[j] = rng.normal();
    Vector v = u;
    v[0] += c;
    const double prior_change = normal_logpdf(v[0], 0.0, 5.0) - normal_logpdf(u[0], 0.0, 5.0);
    EXPECT_NEAR(eight_schools_log_density(shifted, v) - eight_schools_log_density(data, u), prior_change, 1e-10);
  }
}

TEST(EightSchools, GradientMatchesFiniteDifferences) {
  const TargetModel t = eight_schools_target(fixture());
  RngStream rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    Vector u(10);
    for (int j = 0; j < 10; ++j) u[j] = 1.5 * rng.normal();
    Vector g(10);
    t.density(u.data(), g.data());
    EXPECT_LT((g - fd_gradient(t, u)).cwiseAbs().maxCoeff(), 1e-5 * std::max(1.0, g.cwiseAbs().maxCoeff()));
  }
}

TEST(TargetOp, ChainsThroughTape) {
  const TargetModel t = gm_target(ring_gm_2d(), "ring");
  ad::Tape tape;
  Matrix x(3, 2);
  x << 6.5, 3.2, 1.0, 1.0, 3.0, 7.5;
  ad::Var v = tape.variable(x);
  ad::Var out = ad::sum(ad::scale(log_density(t, v), 2.0));
  tape.backward(out);
  for (int r = 0; r < 3; ++r) {
    Vector g(2);
    const Vector row = x.row(r).transpose();
    const double val = t.density(row.data(), g.data());
    EXPECT_EQ(val, t.log_density(row));
    EXPECT_NEAR(tape.grad(v)(r, 0), 2.0 * g[0], 1e-12);
    EXPECT_NEAR(tape.grad(v)(r, 1), 2.0 * g[1], 1e-12);
  }
}

TEST(TargetOp, NonFiniteNamesThePoint) {
  TargetModel t;
  t.name = "broken";
  t.dim = 1;
  t.density = [](const double* x, double* g) {
    if (g != nullptr) g[0] = 0.0;
    return x[0] > 0.0 ? std::log(-1.0) : 0.0;
  };
  ad::Tape tape;
  Matrix x(2, 1);
  x << -1.0, 2.5;
  try {
    log_density(t, tape.constant(x));
    FAIL();
  } catch (const std::domain_error& e) {
    EXPECT_NE(std::string(e.what()).find("2.5"), std::string::npos);
  }
}
