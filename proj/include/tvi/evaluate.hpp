#pragma once

// Mode capture scoring, grid-transform diagnostics and sample export.

#include <string>
#include <vector>

#include "tvi/flow.hpp"
#include "tvi/targets.hpp"

namespace tvi {

struct ModeReport {
  /// Fraction of samples whose nearest center is k.
  std::vector<double> assigned_fraction;
  /// Fraction of samples assigned to k and inside its capture radius.
  std::vector<double> inlier_fraction;
  std::vector<bool> captured;
  int modes_captured = 0;
  int n_samples = 0;
  double quantile = 0.9;
  double threshold = 0.05;
  double radius = 0.0;
  /// Distances of the samples assigned to each center.
  std::vector<std::vector<double>> distances;
};

/// Nearest-center assignment (ties to the lowest index); mode k is captured
/// when the inlier fraction exceeds `threshold`. Radius is
/// sigma * sqrt(chi2_quantile(d, quantile)).
ModeReport mode_capture(const Matrix& samples, const Matrix& centers, double sigma, double quantile = 0.9,
                        double threshold = 0.05);
ModeReport mode_capture(const Matrix& samples, const GmSpec& spec, double quantile = 0.9, double threshold = 0.05);

std::string modes_json(const ModeReport& report);

struct GridSpec {
  double lo = -3.0;
  double hi = 3.0;
  double spacing = 0.5;
};

struct GridTransform {
  GridSpec spec;
  Matrix grid;  // points x 2
  std::vector<double> temperatures;
  std::vector<Matrix> mapped;  // one per temperature, same shape as grid
};

/// Regular 2-d grid (x outer, y inner) pushed through the flow at each T.
GridTransform grid_transform(const FlowModel& model, const GridSpec& spec, const std::vector<double>& temperatures);
/// Mean over grid points of the largest pairwise displacement across
/// temperatures, in units of the grid spacing.
double transform_drift(const GridTransform& gt);
/// Long format: T,grid_x,grid_y,mapped_x,mapped_y.
std::string grid_csv(const GridTransform& gt);

/// theta_1..theta_d, log_q, log_p_unnorm for n flow samples at T.
std::string samples_csv(const FlowModel& model, const TargetModel& target, int n, double T, RngStream& rng);
void export_samples(const FlowModel& model, const TargetModel& target, int n, double T, RngStream& rng,
                    const std::string& path);

}  // namespace tvi
