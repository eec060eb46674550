#pragma once

// Importance-sampling evidence with the tempered flow as proposal.

#include <span>
#include <string>
#include <vector>

#include "tvi/flow.hpp"
#include "tvi/targets.hpp"

namespace tvi {

struct EvidenceEstimate {
  double log_Z_hat = 0.0;
  /// Delta-method standard error of log_Z_hat.
  double std_err_log = 0.0;
  int n = 0;
  double T = 1.0;
  double ess = 0.0;
  double max_weight_fraction = 0.0;
  /// ess below kMinReliableEss.
  bool unreliable = false;
};

constexpr double kMinReliableEss = 10.0;

/// Estimate from precomputed log-weights ln p'(theta_i) - ln q(theta_i).
/// Weights are only ever exponentiated after subtracting the maximum.
EvidenceEstimate evidence_from_log_weights(std::span<const double> log_weights, double T = 1.0);

EvidenceEstimate estimate_evidence(const FlowModel& model, const TargetModel& target, double T, int n, RngStream& rng);

/// One independent sub-stream of `rng` per temperature.
std::vector<EvidenceEstimate> temperature_sweep(const FlowModel& model, const TargetModel& target,
                                                const std::vector<double>& temperatures, int n, const RngStream& rng);

/// JSON array of {T, log_Z_hat, std_err_log, n, ess, max_weight_fraction, unreliable}.
std::string evidence_json(const std::vector<EvidenceEstimate>& estimates);

}  // namespace tvi
