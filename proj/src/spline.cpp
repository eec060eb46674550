#include "tvi/spline.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>

namespace tvi {

namespace {

// Forward-mode dual over the seven local inputs of a single bin:
// (x, x_k, w_k, y_k, h_k, d_k, d_{k+1}).
constexpr int kLocal = 7;

struct Dual {
  double v = 0.0;
  std::array<double, kLocal> d{};

  static Dual seed(double value, int slot) {
    Dual out{value, {}};
    out.d[static_cast<std::size_t>(slot)] = 1.0;
    return out;
  }
  static Dual constant(double value) { return Dual{value, {}}; }
};

Dual operator+(const Dual& a, const Dual& b) {
  Dual r{a.v + b.v, {}};
  for (int i = 0; i < kLocal; ++i) r.d[i] = a.d[i] + b.d[i];
  return r;
}
Dual operator-(const Dual& a, const Dual& b) {
  Dual r{a.v - b.v, {}};
  for (int i = 0; i < kLocal; ++i) r.d[i] = a.d[i] - b.d[i];
  return r;
}
Dual operator*(const Dual& a, const Dual& b) {
  Dual r{a.v * b.v, {}};
  for (int i = 0; i < kLocal; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
  return r;
}
Dual operator/(const Dual& a, const Dual& b) {
  Dual r{a.v / b.v, {}};
  const double inv = 1.0 / (b.v * b.v);
  for (int i = 0; i < kLocal; ++i) r.d[i] = (a.d[i] * b.v - a.v * b.d[i]) * inv;
  return r;
}
Dual operator*(double s, const Dual& a) {
  Dual r{s * a.v, {}};
  for (int i = 0; i < kLocal; ++i) r.d[i] = s * a.d[i];
  return r;
}
Dual log(const Dual& a) {
  Dual r{std::log(a.v), {}};
  for (int i = 0; i < kLocal; ++i) r.d[i] = a.d[i] / a.v;
  return r;
}

struct BinEval {
  Dual y;
  Dual logdet;
};

// Rational-quadratic map within one bin, with the boundary conditions
// y(x_k) = y_k, y(x_k + w_k) = y_k + h_k and derivatives d_k, d_{k+1}.
BinEval eval_bin(const Dual& x, const Dual& xk, const Dual& wk, const Dual& yk, const Dual& hk, const Dual& dk,
                 const Dual& dk1) {
  const Dual one = Dual::constant(1.0);
  const Dual xi = (x - xk) / wk;
  const Dual om = one - xi;
  const Dual s = hk / wk;
  const Dual xi_om = xi * om;
  const Dual den = s + (dk1 + dk - 2.0 * s) * xi_om;
  const Dual num_y = hk * (s * xi * xi + dk * xi_om);
  const Dual y = yk + num_y / den;
  const Dual num_d = dk1 * xi * xi + 2.0 * s * xi_om + dk * om * om;
  const Dual logdet = 2.0 * log(s) + log(num_d) - 2.0 * log(den);
  return {y, logdet};
}

struct Decoded {
  std::vector<double> soft_w;  // softmax of width logits
  std::vector<double> soft_h;
  std::vector<double> knot_x;  // K + 1
  std::vector<double> knot_y;
  std::vector<double> deriv;   // K + 1, boundaries 1
  std::vector<double> deriv_sigmoid;  // K - 1, d(deriv)/d(raw)
  double scale = 0.0;          // 2B - K * min_bin
};

// raw + kDerivShift maps zero to a unit derivative after the floor.
const double kDerivShift = std::log(std::expm1(1.0 - kMinDerivative));

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void softmax_into(const double* logits, int n, std::vector<double>& out) {
  out.resize(static_cast<std::size_t>(n));
  double m = logits[0];
  for (int i = 1; i < n; ++i) m = std::max(m, logits[i]);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    out[static_cast<std::size_t>(i)] = std::exp(logits[i] - m);
    total += out[static_cast<std::size_t>(i)];
  }
  for (auto& v : out) v /= total;
}

void decode_into(const double* raw, double half_width, int bins, Decoded& dec) {
  const auto K = static_cast<std::size_t>(bins);
  dec.scale = 2.0 * half_width - bins * kMinBinWidth;
  softmax_into(raw, bins, dec.soft_w);
  softmax_into(raw + bins, bins, dec.soft_h);
  dec.knot_x.resize(K + 1);
  dec.knot_y.resize(K + 1);
  dec.knot_x[0] = -half_width;
  dec.knot_y[0] = -half_width;
  for (std::size_t k = 0; k < K; ++k) {
    dec.knot_x[k + 1] = dec.knot_x[k] + kMinBinWidth + dec.scale * dec.soft_w[k];
    dec.knot_y[k + 1] = dec.knot_y[k] + kMinBinWidth + dec.scale * dec.soft_h[k];
  }
  dec.knot_x[K] = half_width;
  dec.knot_y[K] = half_width;
  dec.deriv.assign(K + 1, 1.0);
  dec.deriv_sigmoid.resize(K - 1);
  for (std::size_t k = 0; k + 1 < K; ++k) {
    const double r = raw[2 * K + k] + kDerivShift;
    dec.deriv[k + 1] = raw[2 * K + k] == 0.0 ? 1.0 : kMinDerivative + softplus(r);
    dec.deriv_sigmoid[k] = sigmoid(r);
  }
}

int find_bin(const std::vector<double>& knots, double v) {
  // knots has K + 1 entries spanning [-B, B]; v is inside.
  const auto it = std::upper_bound(knots.begin() + 1, knots.end() - 1, v);
  return static_cast<int>(it - knots.begin()) - 1;
}

struct LocalPartials {
  int bin = -1;  // -1: identity tail
  double out = 0.0;
  double logdet = 0.0;
  std::array<double, kLocal> d_out{};
  std::array<double, kLocal> d_logdet{};
};

BinEval eval_at(const Decoded& dec, int k, double x) {
  const auto ku = static_cast<std::size_t>(k);
  return eval_bin(Dual::seed(x, 0), Dual::seed(dec.knot_x[ku], 1),
                  Dual::seed(dec.knot_x[ku + 1] - dec.knot_x[ku], 2), Dual::seed(dec.knot_y[ku], 3),
                  Dual::seed(dec.knot_y[ku + 1] - dec.knot_y[ku], 4), Dual::seed(dec.deriv[ku], 5),
                  Dual::seed(dec.deriv[ku + 1], 6));
}

// Exact identity on bins whose knots coincide with the diagonal, so a
// zero-initialised flow reproduces its input bit for bit.
bool is_identity_bin(const Decoded& dec, int k) {
  const auto ku = static_cast<std::size_t>(k);
  return dec.knot_x[ku] == dec.knot_y[ku] && dec.knot_x[ku + 1] == dec.knot_y[ku + 1] && dec.deriv[ku] == 1.0 &&
         dec.deriv[ku + 1] == 1.0;
}

LocalPartials forward_local(const Decoded& dec, double half_width, double x) {
  LocalPartials lp;
  if (x < -half_width || x > half_width) {
    lp.out = x;
    lp.d_out[0] = 1.0;
    return lp;
  }
  lp.bin = find_bin(dec.knot_x, x);
  const BinEval e = eval_at(dec, lp.bin, x);
  const bool identity_bin = is_identity_bin(dec, lp.bin);
  lp.out = identity_bin ? x : e.y.v;
  lp.logdet = identity_bin ? 0.0 : e.logdet.v;
  lp.d_out = e.y.d;
  lp.d_logdet = e.logdet.d;
  return lp;
}

double solve_bin_inverse(const Decoded& dec, int k, double y) {
  const auto ku = static_cast<std::size_t>(k);
  const double xk = dec.knot_x[ku];
  const double wk = dec.knot_x[ku + 1] - xk;
  const double yk = dec.knot_y[ku];
  const double hk = dec.knot_y[ku + 1] - yk;
  const double dk = dec.deriv[ku];
  const double dk1 = dec.deriv[ku + 1];
  const double s = hk / wk;
  const double dy = y - yk;
  const double sum = dk1 + dk - 2.0 * s;
  const double a = hk * (s - dk) + dy * sum;
  const double b = hk * dk - dy * sum;
  const double c = -s * dy;
  const double disc = std::max(0.0, b * b - 4.0 * a * c);
  const double xi = (2.0 * c) / (-b - std::sqrt(disc));
  return xk + std::clamp(xi, 0.0, 1.0) * wk;
}

// Inverse direction expressed as partials w.r.t. (y, x_k, w_k, ...), obtained
// from the forward partials at the solved point via the implicit function
// theorem.
LocalPartials inverse_local(const Decoded& dec, double half_width, double y) {
  LocalPartials lp;
  if (y < -half_width || y > half_width) {
    lp.out = y;
    lp.d_out[0] = 1.0;
    return lp;
  }
  lp.bin = find_bin(dec.knot_y, y);
  const bool identity_bin = is_identity_bin(dec, lp.bin);
  const double x = identity_bin ? y : solve_bin_inverse(dec, lp.bin, y);
  const BinEval e = eval_at(dec, lp.bin, x);
  const double dydx = e.y.d[0];
  lp.out = x;
  lp.logdet = identity_bin ? 0.0 : -e.logdet.v;
  lp.d_out[0] = 1.0 / dydx;
  lp.d_logdet[0] = -e.logdet.d[0] * lp.d_out[0];
  for (int i = 1; i < kLocal; ++i) {
    const double dx = -e.y.d[static_cast<std::size_t>(i)] / dydx;
    lp.d_out[static_cast<std::size_t>(i)] = dx;
    lp.d_logdet[static_cast<std::size_t>(i)] = -(e.logdet.d[static_cast<std::size_t>(i)] + e.logdet.d[0] * dx);
  }
  return lp;
}

Decoded decode_knots(const SplineKnots& knots) {
  Decoded dec;
  const auto K = static_cast<std::size_t>(knots.bins);
  dec.knot_x = knots.knot_x();
  dec.knot_y = knots.knot_y();
  dec.deriv.assign(K + 1, 1.0);
  for (std::size_t k = 0; k + 1 < K; ++k) dec.deriv[k + 1] = knots.derivatives[k];
  return dec;
}

// Accumulate d(loss)/d(raw) for one coordinate given the upstream gradient
// w.r.t. the seven local inputs of the selected bin.
void chain_to_raw(const Decoded& dec, int bins, int k, const std::array<double, kLocal>& g_local, double* g_raw) {
  const auto K = static_cast<std::size_t>(bins);
  const auto ku = static_cast<std::size_t>(k);
  std::vector<double> gw(K, 0.0);
  std::vector<double> gh(K, 0.0);
  // x_k = -B + sum_{j<k} w_j, w_k itself, and x_{k+1} = x_k + w_k is implied.
  for (std::size_t j = 0; j < ku; ++j) {
    gw[j] += g_local[1];
    gh[j] += g_local[3];
  }
  gw[ku] += g_local[2];
  gh[ku] += g_local[4];
  auto softmax_back = [&](const std::vector<double>& s, const std::vector<double>& g, double* out) {
    double dot = 0.0;
    for (std::size_t j = 0; j < K; ++j) dot += g[j] * s[j];
    for (std::size_t j = 0; j < K; ++j) out[j] += dec.scale * s[j] * (g[j] - dot);
  };
  softmax_back(dec.soft_w, gw, g_raw);
  softmax_back(dec.soft_h, gh, g_raw + K);
  if (ku >= 1) g_raw[2 * K + ku - 1] += g_local[5] * dec.deriv_sigmoid[ku - 1];
  if (ku + 1 <= K - 1) g_raw[2 * K + ku] += g_local[6] * dec.deriv_sigmoid[ku];
}

}  // namespace

SplineKnots SplineKnots::identity(double half_width, int bins) {
  SplineKnots k;
  k.bins = bins;
  k.half_width = half_width;
  k.widths.assign(static_cast<std::size_t>(bins), 2.0 * half_width / bins);
  k.heights = k.widths;
  k.derivatives.assign(static_cast<std::size_t>(bins - 1), 1.0);
  return k;
}

void SplineKnots::validate() const {
  if (bins < 1) throw std::invalid_argument("spline: bin count must be positive");
  if (!(half_width > 0.0)) throw std::invalid_argument("spline: interval half-width must be positive");
  const auto K = static_cast<std::size_t>(bins);
  if (widths.size() != K || heights.size() != K || derivatives.size() != K - 1) {
    throw std::invalid_argument("spline: knot arrays have wrong lengths");
  }
  double sw = 0.0;
  double sh = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    if (!(widths[k] > 0.0) || !(heights[k] > 0.0)) throw std::invalid_argument("spline: bin sizes must be positive");
    sw += widths[k];
    sh += heights[k];
  }
  const double tol = 1e-9 * 2.0 * half_width;
  if (std::abs(sw - 2.0 * half_width) > tol || std::abs(sh - 2.0 * half_width) > tol) {
    throw std::invalid_argument("spline: bins must span [-B, B]");
  }
  for (double d : derivatives) {
    if (!(d > 0.0) || !std::isfinite(d)) throw std::invalid_argument("spline: derivatives must be positive");
  }
}

std::vector<double> SplineKnots::knot_x() const {
  std::vector<double> out(widths.size() + 1);
  out[0] = -half_width;
  for (std::size_t k = 0; k < widths.size(); ++k) out[k + 1] = out[k] + widths[k];
  out.back() = half_width;
  return out;
}

std::vector<double> SplineKnots::knot_y() const {
  std::vector<double> out(heights.size() + 1);
  out[0] = -half_width;
  for (std::size_t k = 0; k < heights.size(); ++k) out[k + 1] = out[k] + heights[k];
  out.back() = half_width;
  return out;
}

double SplineKnots::knot_derivative(int k) const {
  if (k <= 0 || k >= bins) return 1.0;
  return derivatives[static_cast<std::size_t>(k - 1)];
}

SplineKnots decode_raw_params(std::span<const double> raw, double half_width, int bins) {
  if (bins < 1) throw std::invalid_argument("spline: bin count must be positive");
  if (static_cast<int>(raw.size()) != spline_param_count(bins)) {
    throw std::invalid_argument("decode_raw_params: expected " + std::to_string(spline_param_count(bins)) +
                                " raw values, got " + std::to_string(raw.size()));
  }
  Decoded dec;
  decode_into(raw.data(), half_width, bins, dec);
  SplineKnots k;
  k.bins = bins;
  k.half_width = half_width;
  const auto K = static_cast<std::size_t>(bins);
  k.widths.resize(K);
  k.heights.resize(K);
  for (std::size_t j = 0; j < K; ++j) {
    k.widths[j] = kMinBinWidth + dec.scale * dec.soft_w[j];
    k.heights[j] = kMinBinWidth + dec.scale * dec.soft_h[j];
  }
  k.derivatives.assign(dec.deriv.begin() + 1, dec.deriv.end() - 1);
  return k;
}

SplineResult rq_spline_forward(double x, const SplineKnots& knots) {
  knots.validate();
  const LocalPartials lp = forward_local(decode_knots(knots), knots.half_width, x);
  return {lp.out, lp.logdet};
}

SplineResult rq_spline_inverse(double y, const SplineKnots& knots) {
  knots.validate();
  const LocalPartials lp = inverse_local(decode_knots(knots), knots.half_width, y);
  return {lp.out, lp.logdet};
}

ad::Var rq_spline(ad::Var x, ad::Var raw, double half_width, int bins, bool inverse) {
  if (&x.tape() != &raw.tape()) throw std::invalid_argument("rq_spline: operands live on different tapes");
  const int P = spline_param_count(bins);
  const Matrix& xv = x.value();
  const Matrix& rv = raw.value();
  const Eigen::Index n = xv.rows();
  const Eigen::Index m = xv.cols();
  if (rv.rows() != n || rv.cols() != m * P) throw std::invalid_argument("rq_spline: raw parameter shape mismatch");

  Matrix out = Matrix::Zero(n, m + 1);
  // Per element: bin index and the 14 local partials, reused by backward.
  auto partials = std::make_shared<std::vector<LocalPartials>>(static_cast<std::size_t>(n * m));
  Decoded dec;
  std::vector<double> raw_row(static_cast<std::size_t>(P));
  for (Eigen::Index j = 0; j < m; ++j) {
    for (Eigen::Index r = 0; r < n; ++r) {
      for (int p = 0; p < P; ++p) raw_row[static_cast<std::size_t>(p)] = rv(r, j * P + p);
      decode_into(raw_row.data(), half_width, bins, dec);
      LocalPartials lp = inverse ? inverse_local(dec, half_width, xv(r, j)) : forward_local(dec, half_width, xv(r, j));
      out(r, j) = lp.out;
      out(r, m) += lp.logdet;
      (*partials)[static_cast<std::size_t>(j * n + r)] = lp;
    }
  }

  return x.tape().push("rq_spline", std::move(out), {x.id(), raw.id()},
                       [partials, half_width, bins, P, n, m](ad::Tape& tp, std::size_t self) {
                         const auto& node = tp.node(self);
                         const Matrix& g = tp.grad_ref(self);
                         const Matrix& rvals = tp.value(node.inputs[1]);
                         Matrix& gx = tp.grad_ref(node.inputs[0]);
                         Matrix& graw = tp.grad_ref(node.inputs[1]);
                         Decoded d;
                         std::vector<double> row(static_cast<std::size_t>(P));
                         std::vector<double> grow(static_cast<std::size_t>(P));
                         for (Eigen::Index j = 0; j < m; ++j) {
                           for (Eigen::Index r = 0; r < n; ++r) {
                             const LocalPartials& lp = (*partials)[static_cast<std::size_t>(j * n + r)];
                             const double go = g(r, j);
                             const double gl = g(r, m);
                             gx(r, j) += go * lp.d_out[0] + gl * lp.d_logdet[0];
                             if (lp.bin < 0) continue;
                             std::array<double, kLocal> gloc{};
                             for (int i = 0; i < kLocal; ++i) {
                               gloc[static_cast<std::size_t>(i)] =
                                   go * lp.d_out[static_cast<std::size_t>(i)] + gl * lp.d_logdet[static_cast<std::size_t>(i)];
                             }
                             for (int p = 0; p < P; ++p) row[static_cast<std::size_t>(p)] = rvals(r, j * P + p);
                             decode_into(row.data(), half_width, bins, d);
                             std::fill(grow.begin(), grow.end(), 0.0);
                             chain_to_raw(d, bins, lp.bin, gloc, grow.data());
                             for (int p = 0; p < P; ++p) graw(r, j * P + p) += grow[static_cast<std::size_t>(p)];
                           }
                         }
                       });
}

}  // namespace tvi
