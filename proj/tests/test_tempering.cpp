#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "tvi/tempering.hpp"

using namespace tvi;

namespace {

FlowArchitecture tiny(int dim, int layers = 2) {
  FlowArchitecture a;
  a.dim = dim;
  a.layers = layers;
  a.hidden_layers = 2;
  a.width = 16;
  a.bins = 8;
  a.half_width = 4.0;
  return a;
}

FlowModel perturbed(int dim, std::uint64_t seed, double scale = 0.15) {
  FlowModel m(tiny(dim), seed);
  RngStream rng(seed, 77);
  m.perturb(rng, scale);
  return m;
}

double std_normal_logpdf(const Vector& z) { return -0.5 * z.size() * std::log(2.0 * M_PI) - 0.5 * z.squaredNorm(); }

const std::vector<ObjectiveMode> kModes = {ObjectiveMode::FlowVatLiteral, ObjectiveMode::FlowVatExact,
                                           ObjectiveMode::TargetOnly, ObjectiveMode::Plain};

}  // namespace

TEST(TemperedBase, Variance) {
  RngStream rng(1);
  const Matrix z = tempered_base_sample(rng, 2, 4.0, 100000);
  for (int c = 0; c < 2; ++c) {
    const double m = z.col(c).mean();
    EXPECT_NEAR((z.col(c).array() - m).square().mean(), 4.0, 0.2);
  }
  RngStream a(3);
  RngStream b(3);
  EXPECT_EQ(tempered_base_sample(a, 3, 2.0, 10), tempered_base_sample(b, 3, 2.0, 10));
  RngStream c(3);
  RngStream d(3);
  EXPECT_EQ(tempered_base_sample(c, 3, 1.0, 10), sample_standard_normal(d, 10, 3));
}

TEST(TemperedBase, LogpdfValues) {
  EXPECT_NEAR(tempered_base_logpdf(Vector::Zero(2), 1.0), -1.837877, 1e-6);
  EXPECT_NEAR(tempered_base_logpdf(Vector::Zero(1), std::exp(1.0)), -1.418939, 1e-6);
  const int n = 200001;
  const double h = 40.0 / (n - 1);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const Vector z = Vector::Constant(1, -20.0 + i * h);
    total += ((i == 0 || i == n - 1) ? 0.5 : 1.0) * std::exp(tempered_base_logpdf(z, 3.0));
  }
  EXPECT_NEAR(total * h, 1.0, 1e-6);
}

TEST(Objective, LiteralIsScaledPlainIntegrand) {
  const FlowModel m = perturbed(2, 4);
  const TargetModel target = gm_target(ring_gm_2d(), "ring");
  RngStream rng(5);
  Matrix z(100, 2);
  Vector temps(100);
  for (int i = 0; i < 100; ++i) {
    temps[i] = rng.uniform(0.95, 10.0);
    z.row(i) = sample_standard_normal(rng, 2).transpose() * std::sqrt(temps[i]);
  }
  const Vector literal = objective_values(m, target, z, temps, ObjectiveMode::FlowVatLiteral);
  const FlowMap f = m.forward(z, temps);
  for (int i = 0; i < 100; ++i) {
    const Vector zi = z.row(i).transpose();
    const double plain = target.log_density(Vector(f.values.row(i).transpose())) - std_normal_logpdf(zi) + f.logdet[i];
    EXPECT_NEAR(literal[i], plain / temps[i], 1e-10 * std::max(1.0, std::abs(plain)));
  }
}

TEST(Objective, ModesCoincideAtUnitTemperature) {
  const FlowModel m = perturbed(3, 6);
  const TargetModel target = make_gm(3, 2, 1).target;
  RngStream rng(6);
  const Matrix z = sample_standard_normal(rng, 50, 3);
  const Vector ones = Vector::Ones(50);
  const Vector plain = objective_values(m, target, z, ones, ObjectiveMode::Plain);
  for (auto mode : kModes) {
    EXPECT_LT((objective_values(m, target, z, ones, mode) - plain).cwiseAbs().maxCoeff(), 1e-12) << to_string(mode);
  }
}

TEST(Objective, IdentityFlowOnStandardNormalIsZero) {
  const FlowModel m(tiny(2), 7);
  const TargetModel target = gaussian_target(Vector::Zero(2));
  RngStream rng(7);
  const Matrix z = sample_standard_normal(rng, 10000, 2);
  const Vector v = objective_values(m, target, z, Vector::Ones(10000), ObjectiveMode::FlowVatLiteral);
  const double mean = v.mean();
  const double se = std::sqrt((v.array() - mean).square().sum() / (v.size() - 1) / v.size());
  EXPECT_LE(std::abs(mean), 3.0 * se + 1e-15);
}

TEST(Objective, GradientsMatchFiniteDifferences) {
  const FlowModel base = perturbed(2, 8);
  const TargetModel target = gm_target(ring_gm_2d(), "ring");
  RngStream rng(8);
  Vector temps(16);
  for (int i = 0; i < 16; ++i) temps[i] = rng.uniform(0.95, 4.0);
  for (auto mode : kModes) {
    const Matrix z = draw_latents(rng, mode, 2, temps);
    const LossAndGradient lg = loss_and_gradient(base, target, z, temps, mode);
    double worst = 0.0;
    for (Eigen::Index i = 0; i < lg.gradient.size(); i += 3) {
      FlowModel p = base;
      FlowModel q = base;
      p.params().values[i] += 1e-6;
      q.params().values[i] -= 1e-6;
      const double fp = -objective_values(p, target, z, temps, mode).mean();
      const double fq = -objective_values(q, target, z, temps, mode).mean();
      const double fd = (fp - fq) / 2e-6;
      worst = std::max(worst, std::abs(fd - lg.gradient[i]) / std::max(1e-2, std::abs(fd)));
    }
    EXPECT_LT(worst, 1e-4) << to_string(mode);
    EXPECT_NEAR(lg.loss, -objective_values(base, target, z, temps, mode).mean(), 1e-12);
  }
}

TEST(Objective, AffineOptimumAcrossTemperatures) {
  // Flow reduced to its affine stage: theta = exp(s) * z + loc. Target N(mu, sigma^2 I).
  // The exact tempered ELBO is optimised by the same s at every T; the literal
  // form optimises s = ln sigma - ln(T)/2.
  const double sigma = 1.7;
  Vector mu(2);
  mu << 0.5, -1.0;
  TargetModel target;
  target.name = "scaled_gaussian";
  target.dim = 2;
  target.density = [mu, sigma](const double* x, double* g) {
    double sq = 0.0;
    for (int j = 0; j < 2; ++j) {
      const double r = x[j] - mu[j];
      sq += r * r;
      if (g != nullptr) g[j] = -r / (sigma * sigma);
    }
    return -std::log(2.0 * M_PI * sigma * sigma) - 0.5 * sq / (sigma * sigma);
  };
  FlowModel m(tiny(2), 9);
  const auto& segs = m.params().layout.segments();
  std::size_t loc = 0;
  std::size_t log_scale = 0;
  for (std::size_t i = 0; i < segs.size(); ++i) {
    if (segs[i].role == "affine_loc") loc = i;
    if (segs[i].role == "affine_log_scale") log_scale = i;
  }
  m.params().segment(loc) = mu.transpose();
  RngStream rng(9);
  const Matrix eps = sample_standard_normal(rng, 2000, 2);
  const double m2 = eps.array().square().mean();
  for (double T : {1.0, 4.0}) {
    const Matrix z = eps * std::sqrt(T);
    const Vector temps = Vector::Constant(z.rows(), T);
    for (auto mode : {ObjectiveMode::FlowVatExact, ObjectiveMode::FlowVatLiteral}) {
      auto loss_at = [&](double s) {
        m.params().segment(log_scale).setConstant(s);
        return -objective_values(m, target, z, temps, mode).mean();
      };
      // Both losses are convex in s.
      double lo = -2.0;
      double hi = 2.0;
      while (hi - lo > 1e-6) {
        const double a = lo + (hi - lo) / 3.0;
        const double b = hi - (hi - lo) / 3.0;
        (loss_at(a) < loss_at(b) ? hi : lo) = (loss_at(a) < loss_at(b) ? b : a);
      }
      const double best_s = 0.5 * (lo + hi);
      const double expected = mode == ObjectiveMode::FlowVatExact ? std::log(sigma) - 0.5 * std::log(m2)
                                                                  : std::log(sigma) - 0.5 * std::log(T * m2);
      EXPECT_NEAR(best_s, expected, 1e-4) << to_string(mode) << " T=" << T;
    }
  }
}

TEST(Objective, RejectsBadInput) {
  const FlowModel m(tiny(2), 1);
  const TargetModel target = gaussian_target(Vector::Zero(2));
  EXPECT_THROW(objective_values(m, target, Matrix::Zero(3, 2), Vector::Constant(3, 0.3), ObjectiveMode::FlowVatLiteral),
               std::invalid_argument);
  EXPECT_THROW(objective_values(m, target, Matrix::Zero(3, 2), Vector::Ones(2), ObjectiveMode::FlowVatLiteral),
               std::invalid_argument);
  EXPECT_THROW(objective_values(m, gaussian_target(Vector::Zero(3)), Matrix::Zero(3, 2), Vector::Ones(3),
                                ObjectiveMode::Plain),
               std::invalid_argument);
  EXPECT_EQ(objective_mode_from_string("flowvat_exact"), ObjectiveMode::FlowVatExact);
  EXPECT_THROW(objective_mode_from_string("eq8"), std::invalid_argument);
}

TEST(LinearAnneal, Endpoints) {
  auto s = TemperatureSchedule::linear_anneal(100.0, 30, 100);
  EXPECT_EQ(linear_anneal_step(s, 0), 100.0);
  EXPECT_EQ(linear_anneal_step(s, 99), 100.0);
  EXPECT_EQ(linear_anneal_step(s, 1500), 50.5);
  EXPECT_EQ(linear_anneal_step(s, 3000), 1.0);
  EXPECT_EQ(linear_anneal_step(s, 99999), 1.0);
  double prev = 1e9;
  for (int e = 0; e < 4000; ++e) {
    const double T = linear_anneal_step(s, e);
    EXPECT_LE(T, prev);
    if (e % 100 != 0) {
      EXPECT_EQ(T, prev);
    }
    prev = T;
  }
}

TEST(AdaAnn, ClosedFormRecursion) {
  auto s = TemperatureSchedule::adaann(100.0, 0.1, 100);
  // Two-point batch with population std 10.
  const std::vector<double> batch{-10.0, 10.0};
  int k = 0;
  while (s.current() > 1.0) {
    const double T = adaann_step(s, batch);
    ++k;
    if (T > 1.0) {
      EXPECT_NEAR(T, 1.0 / (0.01 + 0.01 * k), 1e-9);
    }
    ASSERT_LT(k, 1000);
  }
  EXPECT_EQ(k, 99);
  EXPECT_EQ(s.updates(), 99);
}

TEST(AdaAnn, StepProperties) {
  auto frozen = TemperatureSchedule::adaann(100.0, 0.0, 100);
  EXPECT_EQ(adaann_step(frozen, std::vector<double>{1.0, 5.0, -3.0}), 100.0);

  auto a = TemperatureSchedule::adaann(100.0, 0.02, 100);
  auto b = TemperatureSchedule::adaann(100.0, 0.02, 100);
  const double Ta = adaann_step(a, std::vector<double>{-1.0, 1.0});
  const double Tb = adaann_step(b, std::vector<double>{-5.0, 5.0});
  EXPECT_LT(Ta, Tb);  // larger spread, smaller step

  auto flat = TemperatureSchedule::adaann(10.0, 0.05, 100);
  EXPECT_NEAR(adaann_step(flat, std::vector<double>{2.0, 2.0, 2.0}), 1.0 / (0.1 + 0.05), 1e-12);

  auto big = TemperatureSchedule::adaann(10.0, 0.5, 100);
  EXPECT_EQ(adaann_step(big, std::vector<double>{0.0, 0.01}), 1.0);
  EXPECT_EQ(adaann_step(big, std::vector<double>{0.0, 0.01}), 1.0);

  EXPECT_FALSE(a.is_update_epoch(0));
  EXPECT_FALSE(a.is_update_epoch(150));
  EXPECT_TRUE(a.is_update_epoch(200));
  EXPECT_THROW(adaann_step(a, std::vector<double>{}), std::invalid_argument);
}

TEST(AdaAnn, ReferenceUpdateCount) {
  // beta grows by a factor 1 + tol / sqrt(d/2) per update.
  EXPECT_EQ(adaann_reference_updates(100.0, 0.02, 2), static_cast<int>(std::ceil(std::log(100.0) / std::log(1.02))));
  EXPECT_EQ(adaann_reference_updates(1.0, 0.02, 2), 0);
  EXPECT_EQ(adaann_reference_updates(100.0, 0.0, 2), -1);
}

TEST(TrainingTemperatures, Sampling) {
  RngStream rng(10);
  auto u = TemperatureSchedule::uniform_range(0.95, 10.0);
  const Vector t = sample_training_temperatures(u, rng, 1000, 0);
  EXPECT_GE(t.minCoeff(), 0.95);
  EXPECT_LE(t.maxCoeff(), 10.0);
  auto fine = TemperatureSchedule::uniform_range(0.95, 1.5);
  EXPECT_NEAR(sample_training_temperatures(fine, rng, 100000, 0).mean(), 1.225, 0.01);
  auto one = TemperatureSchedule::constant(1.0);
  EXPECT_TRUE((sample_training_temperatures(one, rng, 10, 5).array() == 1.0).all());
  auto lin = TemperatureSchedule::linear_anneal(100.0, 10, 100);
  EXPECT_TRUE((sample_training_temperatures(lin, rng, 4, 500).array() == 50.5).all());
  EXPECT_THROW(TemperatureSchedule::constant(0.3), std::invalid_argument);
  EXPECT_THROW(TemperatureSchedule::uniform_range(2.0, 1.0), std::invalid_argument);
}
