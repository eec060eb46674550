#pragma once

// Monotone rational-quadratic spline on [-B, B] with identity tails.

#include <span>
#include <vector>

#include "tvi/diffgraph.hpp"

namespace tvi {

inline constexpr double kMinBinWidth = 1e-3;
inline constexpr double kMinDerivative = 1e-3;

struct SplineKnots {
  int bins = 0;
  double half_width = 0.0;
  std::vector<double> widths;       // bins entries, sum 2B
  std::vector<double> heights;      // bins entries, sum 2B
  std::vector<double> derivatives;  // bins - 1 internal knots

  /// Equal bins and unit derivatives: the identity map.
  static SplineKnots identity(double half_width, int bins);

  /// Throws std::invalid_argument if any invariant fails.
  void validate() const;

  std::vector<double> knot_x() const;
  std::vector<double> knot_y() const;
  /// Derivative at each of the bins + 1 knots (boundaries fixed at 1).
  double knot_derivative(int k) const;
};

/// Number of raw conditioner outputs per transformed coordinate.
constexpr int spline_param_count(int bins) { return 3 * bins - 1; }

SplineKnots decode_raw_params(std::span<const double> raw, double half_width, int bins);

struct SplineResult {
  double value = 0.0;
  double logdet = 0.0;
};

SplineResult rq_spline_forward(double x, const SplineKnots& knots);
SplineResult rq_spline_inverse(double y, const SplineKnots& knots);

/// Batched spline as a tape primitive. `x` is n x m, `raw` is n x m(3K-1)
/// with coordinate j's parameters in columns [j(3K-1), (j+1)(3K-1)). Returns
/// n x (m + 1): the m transformed columns followed by the per-row log|det|.
/// Bin selection is piecewise constant; gradients flow through the
/// rational-quadratic expression of the selected bin only.
ad::Var rq_spline(ad::Var x, ad::Var raw, double half_width, int bins, bool inverse);

}  // namespace tvi
