#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

namespace tvi {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Probability in [0, 1]. Construction outside the range throws.
class Probability {
 public:
  explicit Probability(double value);
  double value() const { return value_; }

 private:
  double value_;
};

/// Deterministic random stream keyed by (seed, stream-id).
///
/// Streams are cheap to derive: `substream(k)` hashes the current key with
/// `k`, so every (epoch, batch, purpose) tuple can get its own reproducible
/// sequence without sharing state between consumers.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id = 0);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }

  RngStream substream(std::uint64_t key) const;

  std::uint64_t next_u64();
  /// Uniform on [0, 1) with 53 bits of resolution.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal via Box-Muller; the spare draw is cached.
  double normal();

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::uint64_t state_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t& state);

/// Regularized lower incomplete gamma P(a, x).
double regularized_gamma_p(double a, double x);

/// Chi-square quantile: x with P(dof/2, x/2) = alpha.
double chi2_quantile(int dof, double alpha);
inline double chi2_quantile(int dof, Probability alpha) { return chi2_quantile(dof, alpha.value()); }

/// Isotropic Gaussian log density with scalar variance.
double gaussian_logpdf(std::span<const double> x, std::span<const double> mean, double var);
double gaussian_logpdf(const Vector& x, const Vector& mean, double var);
/// Zero-mean isotropic case.
double gaussian_logpdf_centered(std::span<const double> x, double var);

double log_sum_exp(std::span<const double> values);
inline double log_sum_exp(const std::vector<double>& values) {
  return log_sum_exp(std::span<const double>(values));
}
inline double log_sum_exp(const Vector& values) {
  return log_sum_exp(std::span<const double>(values.data(), static_cast<std::size_t>(values.size())));
}

Vector sample_standard_normal(RngStream& rng, int dim);
/// n x dim matrix of i.i.d. standard normal draws, filled row by row.
Matrix sample_standard_normal(RngStream& rng, int n, int dim);

inline constexpr double kLog2Pi = 1.8378770664093454836;

}  // namespace tvi
