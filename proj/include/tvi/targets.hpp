#pragma once

// Benchmark posteriors as unnormalised log densities on R^d.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>

#include "tvi/diffgraph.hpp"
#include "tvi/mathcore.hpp"

namespace tvi {

/// Isotropic Gaussian mixture with a shared sigma.
struct GmSpec {
  Matrix centers;  // K x d
  double sigma = 1.0;
  Vector weights;  // K
  std::uint64_t seed = 0;
  double d_min = 0.0;
  double d_max = 0.0;

  int dim() const { return static_cast<int>(centers.cols()); }
  int modes() const { return static_cast<int>(centers.rows()); }
  void validate() const;
};

struct GmGenConfig {
  int K = 5;
  int d = 10;
  double d_min = 0.0;
  double d_max = 0.0;
  int M = 10000;
  std::uint64_t seed = 0;
  int max_tries = 1000;
  double box_halfwidth = 5.0;

  void validate() const;
};

struct EightSchoolsData {
  std::array<double, 8> y{};
  std::array<double, 8> sigma{};

  /// Reads the {"y": [...], "sigma": [...]} fixture.
  static EightSchoolsData load(const std::string& path);
  void validate() const;
};

/// Unnormalised log density ln p'(theta) with optional analytic gradient.
struct TargetModel {
  /// Writes the gradient into `grad` (length dim) when it is non-null.
  using Density = std::function<double(const double* theta, double* grad)>;

  std::string name;
  int dim = 0;
  Density density;
  std::optional<double> true_log_evidence;
  std::optional<Matrix> mode_centers;
  std::optional<double> component_sigma;

  double log_density(const Vector& theta) const;
  /// One value per row.
  Vector log_density(const Matrix& thetas) const;
};

/// Tape op: ln p'(theta) per row (n x 1), differentiable in theta. Throws on a
/// non-finite density, naming the offending point.
ad::Var log_density(const TargetModel& target, ad::Var theta);

GmSpec ring_gm_2d();

/// Literal port of the batched rejection scheme: a candidate is kept when its
/// nearest accepted center lies strictly between d_min and d_max.
Matrix generate_gm_centers(const GmGenConfig& cfg, RngStream& rng);

struct GmInstance {
  GmSpec spec;
  TargetModel target;
};

/// Unit-sigma mixture with separation radii from chi-square quantiles.
GmInstance make_gm(int d, int K, std::uint64_t seed);
double gm_min_distance(int d);
double gm_max_distance(int d);

TargetModel gm_target(const GmSpec& spec, std::string name);
double gm_log_density(const GmSpec& spec, const Vector& theta);
double gm_log_density(const GmSpec& spec, const double* theta, double* grad);

/// u = (mu, log tau, eta_1..eta_8), non-centered parameterisation including
/// the log-Jacobian of tau = exp(u_2).
double eight_schools_log_density(const EightSchoolsData& data, const Vector& u);
double eight_schools_log_density(const EightSchoolsData& data, const double* u, double* grad);
TargetModel eight_schools_target(const EightSchoolsData& data);

/// Normalised N(mean, I); handy reference target with known evidence 0.
TargetModel gaussian_target(const Vector& mean, std::string name = "gaussian");

/// JSON round trip for experiment instances.
std::string gm_spec_to_json(const GmSpec& spec);
GmSpec gm_spec_from_json(const std::string& text);
void save_gm_spec(const GmSpec& spec, const std::string& path);
GmSpec load_gm_spec(const std::string& path);

}  // namespace tvi
