#include "tvi/evidence.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <json.hpp>

namespace tvi {

EvidenceEstimate evidence_from_log_weights(std::span<const double> log_weights, double T) {
  const auto n = static_cast<int>(log_weights.size());
  if (n < 2) throw std::invalid_argument("evidence: need at least 2 samples");
  double top = -std::numeric_limits<double>::infinity();
  for (double l : log_weights) {
    if (std::isnan(l) || l == std::numeric_limits<double>::infinity()) {
      throw std::domain_error("evidence: log-weight is NaN or +inf");
    }
    top = std::max(top, l);
  }
  if (top == -std::numeric_limits<double>::infinity()) throw std::domain_error("evidence: every importance weight is zero");

  double sum = 0.0;
  double sumsq = 0.0;
  double wmax = 0.0;
  for (double l : log_weights) {
    const double w = std::exp(l - top);
    sum += w;
    sumsq += w * w;
    wmax = std::max(wmax, w);
  }
  const double mean = sum / n;
  const double var = std::max(0.0, (sumsq - n * mean * mean) / (n - 1));

  EvidenceEstimate e;
  e.n = n;
  e.T = T;
  e.log_Z_hat = top + std::log(mean);
  e.std_err_log = std::sqrt(var / n) / mean;
  e.ess = sum * sum / sumsq;
  e.max_weight_fraction = wmax / sum;
  e.unreliable = e.ess < kMinReliableEss;
  return e;
}

EvidenceEstimate estimate_evidence(const FlowModel& model, const TargetModel& target, double T, int n, RngStream& rng) {
  if (n < 2) throw std::invalid_argument("estimate_evidence: n must be >= 2");
  if (!(T > 0.0) || !std::isfinite(T)) throw std::invalid_argument("estimate_evidence: T must be positive");
  const FlowSample s = sample(model, rng, n, T);
  const Vector lp = target.log_density(s.thetas);
  std::vector<double> lw(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) lw[static_cast<std::size_t>(i)] = lp[i] - s.log_probs[i];
  return evidence_from_log_weights(lw, T);
}

std::vector<EvidenceEstimate> temperature_sweep(const FlowModel& model, const TargetModel& target,
                                                const std::vector<double>& temperatures, int n, const RngStream& rng) {
  if (temperatures.empty()) throw std::invalid_argument("temperature_sweep: empty temperature grid");
  std::vector<EvidenceEstimate> out;
  out.reserve(temperatures.size());
  for (std::size_t i = 0; i < temperatures.size(); ++i) {
    RngStream sub = rng.substream(i);
    out.push_back(estimate_evidence(model, target, temperatures[i], n, sub));
  }
  return out;
}

std::string evidence_json(const std::vector<EvidenceEstimate>& estimates) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : estimates) {
    arr.push_back({{"T", e.T},
                   {"log_Z_hat", e.log_Z_hat},
                   {"std_err_log", e.std_err_log},
                   {"n", e.n},
                   {"ess", e.ess},
                   {"max_weight_fraction", e.max_weight_fraction},
                   {"unreliable", e.unreliable}});
  }
  return arr.dump(2);
}

}  // namespace tvi
