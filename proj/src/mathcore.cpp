#include "tvi/mathcore.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace tvi {

Probability::Probability(double value) : value_(value) {
  if (!(value >= 0.0 && value <= 1.0)) {
    throw std::invalid_argument("probability out of range: " + std::to_string(value));
  }
}

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream_id) : seed_(seed), stream_id_(stream_id) {
  std::uint64_t key = seed;
  std::uint64_t mixed = splitmix64(key);
  key = mixed ^ (stream_id * 0xd1b54a32d192ed03ULL);
  // Two rounds so nearby (seed, stream) pairs land far apart.
  splitmix64(key);
  for (auto& s : state_) s = splitmix64(key);
}

RngStream RngStream::substream(std::uint64_t key) const {
  std::uint64_t h = stream_id_ ^ 0x6a09e667f3bcc909ULL;
  std::uint64_t derived = splitmix64(h) ^ rotl(key * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b4e019ULL, 17);
  std::uint64_t tmp = derived;
  return RngStream(seed_, splitmix64(tmp));
}

std::uint64_t RngStream::next_u64() {
  const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
  const std::uint64_t t = state_[1] << 17;
  state_[2] ^= state_[0];
  state_[3] ^= state_[1];
  state_[1] ^= state_[2];
  state_[0] ^= state_[3];
  state_[2] ^= t;
  state_[3] = rotl(state_[3], 45);
  return result;
}

double RngStream::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double RngStream::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(angle);
  has_spare_ = true;
  return r * std::cos(angle);
}

namespace {

double gamma_p_series(double a, double x) {
  double term = 1.0 / a;
  double sum = term;
  for (int n = 1; n < 10000; ++n) {
    term *= x / (a + n);
    sum += term;
    if (std::abs(term) < std::abs(sum) * 1e-17) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

// Upper tail Q(a, x) by modified Lentz continued fraction.
double gamma_q_continued_fraction(double a, double x) {
  constexpr double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < 10000; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < 1e-16) break;
  }
  return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

}  // namespace

double regularized_gamma_p(double a, double x) {
  if (!(a > 0.0)) throw std::invalid_argument("regularized_gamma_p: a must be positive");
  if (x <= 0.0) return 0.0;
  if (x < a + 1.0) return gamma_p_series(a, x);
  return 1.0 - gamma_q_continued_fraction(a, x);
}

double chi2_quantile(int dof, double alpha) {
  if (dof < 1) throw std::invalid_argument("invalid dof: " + std::to_string(dof));
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha outside [0, 1]");
  if (alpha == 1.0) throw std::domain_error("quantile diverges at alpha = 1");
  if (alpha == 0.0) return 0.0;

  const double a = 0.5 * dof;
  auto cdf = [a](double x) { return regularized_gamma_p(a, 0.5 * x); };

  double lo = 0.0;
  double hi = std::max(1.0, 2.0 * dof);
  while (cdf(hi) < alpha) {
    lo = hi;
    hi *= 2.0;
  }
  for (int iter = 0; iter < 400; ++iter) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    if (cdf(mid) < alpha) {
      lo = mid;
    } else {
      hi = mid;
    }
    if (hi - lo < 1e-13 * std::max(1.0, hi)) break;
  }
  return 0.5 * (lo + hi);
}

double gaussian_logpdf(std::span<const double> x, std::span<const double> mean, double var) {
  if (x.size() != mean.size()) {
    throw std::invalid_argument("gaussian_logpdf: dimension mismatch (" + std::to_string(x.size()) + " vs " +
                                std::to_string(mean.size()) + ")");
  }
  if (!(var > 0.0)) throw std::invalid_argument("gaussian_logpdf: variance must be positive");
  double sq = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double diff = x[i] - mean[i];
    sq += diff * diff;
  }
  const double d = static_cast<double>(x.size());
  return -0.5 * d * (kLog2Pi + std::log(var)) - 0.5 * sq / var;
}

double gaussian_logpdf(const Vector& x, const Vector& mean, double var) {
  return gaussian_logpdf(std::span<const double>(x.data(), static_cast<std::size_t>(x.size())),
                         std::span<const double>(mean.data(), static_cast<std::size_t>(mean.size())), var);
}

double gaussian_logpdf_centered(std::span<const double> x, double var) {
  if (!(var > 0.0)) throw std::invalid_argument("gaussian_logpdf: variance must be positive");
  double sq = 0.0;
  for (double v : x) sq += v * v;
  const double d = static_cast<double>(x.size());
  return -0.5 * d * (kLog2Pi + std::log(var)) - 0.5 * sq / var;
}

double log_sum_exp(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("log_sum_exp: empty input");
  const double m = *std::max_element(values.begin(), values.end());
  if (m == -std::numeric_limits<double>::infinity()) return m;
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double v : values) s += std::exp(v - m);
  return m + std::log(s);
}

Vector sample_standard_normal(RngStream& rng, int dim) {
  if (dim < 1) throw std::invalid_argument("sample_standard_normal: dim must be >= 1");
  Vector out(dim);
  for (int i = 0; i < dim; ++i) out[i] = rng.normal();
  return out;
}

Matrix sample_standard_normal(RngStream& rng, int n, int dim) {
  if (dim < 1 || n < 1) throw std::invalid_argument("sample_standard_normal: n and dim must be >= 1");
  Matrix out(n, dim);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < dim; ++c) out(r, c) = rng.normal();
  }
  return out;
}

}  // namespace tvi
