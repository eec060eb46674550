#include "tvi/evaluate.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "tvi/mathcore.hpp"

namespace tvi {

ModeReport mode_capture(const Matrix& samples, const Matrix& centers, double sigma, double quantile, double threshold) {
  const auto n = samples.rows();
  const auto K = centers.rows();
  if (n < 1) throw std::invalid_argument("mode_capture: no samples");
  if (K < 1) throw std::invalid_argument("mode_capture: no centers");
  if (samples.cols() != centers.cols()) {
    throw std::invalid_argument("mode_capture: samples have dimension " + std::to_string(samples.cols()) + ", centers " +
                                std::to_string(centers.cols()));
  }
  if (!(sigma > 0.0)) throw std::invalid_argument("mode_capture: sigma must be positive");
  if (!(quantile > 0.0 && quantile < 1.0)) throw std::invalid_argument("mode_capture: quantile must be in (0, 1)");

  ModeReport r;
  r.n_samples = static_cast<int>(n);
  r.quantile = quantile;
  r.threshold = threshold;
  r.radius = sigma * std::sqrt(chi2_quantile(static_cast<int>(centers.cols()), quantile));
  r.assigned_fraction.assign(static_cast<std::size_t>(K), 0.0);
  r.inlier_fraction.assign(static_cast<std::size_t>(K), 0.0);
  r.captured.assign(static_cast<std::size_t>(K), false);
  r.distances.assign(static_cast<std::size_t>(K), {});
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index best = 0;
    double best_d2 = (samples.row(i) - centers.row(0)).squaredNorm();
    for (Eigen::Index k = 1; k < K; ++k) {
      const double d2 = (samples.row(i) - centers.row(k)).squaredNorm();
      if (d2 < best_d2) {
        best_d2 = d2;
        best = k;
      }
    }
    const auto b = static_cast<std::size_t>(best);
    const double dist = std::sqrt(best_d2);
    r.assigned_fraction[b] += 1.0;
    if (dist <= r.radius) r.inlier_fraction[b] += 1.0;
    r.distances[b].push_back(dist);
  }
  for (std::size_t k = 0; k < static_cast<std::size_t>(K); ++k) {
    r.assigned_fraction[k] /= static_cast<double>(n);
    r.inlier_fraction[k] /= static_cast<double>(n);
    r.captured[k] = r.inlier_fraction[k] > threshold;
    if (r.captured[k]) ++r.modes_captured;
  }
  return r;
}

ModeReport mode_capture(const Matrix& samples, const GmSpec& spec, double quantile, double threshold) {
  return mode_capture(samples, spec.centers, spec.sigma, quantile, threshold);
}

std::string modes_json(const ModeReport& r) {
  nlohmann::json j;
  j["n_samples"] = r.n_samples;
  j["quantile"] = r.quantile;
  j["capture_threshold"] = r.threshold;
  j["radius"] = r.radius;
  j["modes_captured"] = r.modes_captured;
  j["modes_total"] = r.captured.size();
  j["assigned_fraction"] = r.assigned_fraction;
  j["inlier_fraction"] = r.inlier_fraction;
  j["captured"] = r.captured;
  j["distances"] = r.distances;
  return j.dump(2);
}

GridTransform grid_transform(const FlowModel& model, const GridSpec& spec, const std::vector<double>& temperatures) {
  if (model.dim() != 2) throw std::invalid_argument("grid_transform: only defined for 2-d models, got d = " + std::to_string(model.dim()));
  if (!(spec.spacing > 0.0) || !(spec.hi >= spec.lo)) throw std::invalid_argument("grid_transform: bad grid range or spacing");
  if (temperatures.empty()) throw std::invalid_argument("grid_transform: no temperatures");
  const int m = static_cast<int>(std::floor((spec.hi - spec.lo) / spec.spacing + 1e-9)) + 1;
  GridTransform gt;
  gt.spec = spec;
  gt.temperatures = temperatures;
  gt.grid.resize(static_cast<Eigen::Index>(m) * m, 2);
  for (int a = 0; a < m; ++a) {
    for (int b = 0; b < m; ++b) {
      gt.grid(a * m + b, 0) = spec.lo + a * spec.spacing;
      gt.grid(a * m + b, 1) = spec.lo + b * spec.spacing;
    }
  }
  for (double T : temperatures) gt.mapped.push_back(model.forward(gt.grid, T).values);
  return gt;
}

double transform_drift(const GridTransform& gt) {
  if (gt.mapped.size() < 2) throw std::invalid_argument("transform_drift: need at least two temperatures");
  const auto n = gt.grid.rows();
  for (const auto& m : gt.mapped) {
    if (m.rows() != n || m.cols() != gt.grid.cols()) throw std::invalid_argument("transform_drift: mapped grid shape mismatch");
  }
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double worst = 0.0;
    for (std::size_t a = 0; a < gt.mapped.size(); ++a) {
      for (std::size_t b = a + 1; b < gt.mapped.size(); ++b) {
        worst = std::max(worst, (gt.mapped[a].row(i) - gt.mapped[b].row(i)).norm());
      }
    }
    total += worst;
  }
  return total / static_cast<double>(n) / gt.spec.spacing;
}

std::string grid_csv(const GridTransform& gt) {
  std::ostringstream os;
  os << "T,grid_x,grid_y,mapped_x,mapped_y\n" << std::setprecision(17);
  for (std::size_t t = 0; t < gt.mapped.size(); ++t) {
    for (Eigen::Index i = 0; i < gt.grid.rows(); ++i) {
      os << gt.temperatures[t] << "," << gt.grid(i, 0) << "," << gt.grid(i, 1) << "," << gt.mapped[t](i, 0) << ","
         << gt.mapped[t](i, 1) << "\n";
    }
  }
  return os.str();
}

std::string samples_csv(const FlowModel& model, const TargetModel& target, int n, double T, RngStream& rng) {
  if (n < 1) throw std::invalid_argument("samples: n must be >= 1");
  if (target.dim != model.dim()) throw std::invalid_argument("samples: model and target dimensions differ");
  const FlowSample s = sample(model, rng, n, T);
  const Vector lp = target.log_density(s.thetas);
  std::ostringstream os;
  for (int c = 0; c < model.dim(); ++c) os << "theta_" << c + 1 << ",";
  os << "log_q,log_p_unnorm\n" << std::setprecision(17);
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < model.dim(); ++c) os << s.thetas(i, c) << ",";
    os << s.log_probs[i] << "," << lp[i] << "\n";
  }
  return os.str();
}

void export_samples(const FlowModel& model, const TargetModel& target, int n, double T, RngStream& rng,
                    const std::string& path) {
  const std::string text = samples_csv(model, target, n, T, rng);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path);
}

}  // namespace tvi
