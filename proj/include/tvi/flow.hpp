#pragma once

// Temperature-conditional coupling flow built from rational-quadratic splines.

#include <cstdint>
#include <string>
#include <vector>

#include "tvi/diffgraph.hpp"
#include "tvi/mathcore.hpp"

namespace tvi {

struct FlowArchitecture {
  int dim = 2;
  int layers = 6;
  int hidden_layers = 2;
  int width = 128;
  int bins = 16;
  double half_width = 4.0;
  /// Non-conditional flows see a constant context regardless of T.
  bool conditional = true;
  /// Learned elementwise scale and shift after the coupling stack.
  bool affine = true;

  bool operator==(const FlowArchitecture&) const = default;
};

struct CouplingLayer {
  std::vector<int> permutation;  // applied to the input columns before the layer
  std::vector<int> pass;         // positions (after permutation) fed to the conditioner
  std::vector<int> transformed;  // positions transformed by the spline
  std::vector<std::size_t> weights;  // ParamVector segment ids: W0, b0, W1, b1, ..., Wout, bout
};

struct FlowSample {
  Matrix thetas;
  Vector log_probs;
};

struct FlowMap {
  Matrix values;
  Vector logdet;
};

class FlowModel {
 public:
  /// Hidden layers get a seeded uniform(+-1/sqrt(fan_in)) initialisation; the
  /// conditioner output layers and the affine layer start at zero, so a fresh
  /// model is the identity map.
  FlowModel(FlowArchitecture arch, std::uint64_t seed);
  /// Rebuild with explicit permutations and parameters (checkpoint loading).
  FlowModel(FlowArchitecture arch, std::vector<std::vector<int>> permutations, const Vector& values);

  const FlowArchitecture& architecture() const { return arch_; }
  int dim() const { return arch_.dim; }
  const std::vector<CouplingLayer>& layers() const { return layers_; }
  const ad::ParamVector& params() const { return params_; }
  ad::ParamVector& params() { return params_; }

  /// Conditioner context feature: ln T for conditional flows, 0 otherwise.
  double context(double temperature) const;

  /// Tape-level maps. The tape must have this model's parameters bound.
  struct TapeMap {
    ad::Var values;
    ad::Var logdet;  // n x 1
  };
  TapeMap forward(ad::Tape& tape, ad::Var z, const Vector& temperatures) const;
  TapeMap inverse(ad::Tape& tape, ad::Var theta, const Vector& temperatures) const;
  /// Exact log density at per-row temperatures (n x 1).
  ad::Var log_prob(ad::Tape& tape, ad::Var theta, const Vector& temperatures) const;

  FlowMap forward(const Matrix& z, const Vector& temperatures) const;
  FlowMap forward(const Matrix& z, double temperature) const;
  FlowMap inverse(const Matrix& theta, const Vector& temperatures) const;
  FlowMap inverse(const Matrix& theta, double temperature) const;

  /// Add N(0, scale^2) noise to every parameter (used to build non-trivial test models).
  void perturb(RngStream& rng, double scale);
  /// Zero every conditioner output layer and the affine layer.
  void zero_output_layers();

 private:
  void build_layout();
  void init_permutations(std::uint64_t seed);
  void finalize_permutations();
  ad::Var conditioner(ad::Tape& tape, const CouplingLayer& layer, ad::Var pass, ad::Var context) const;

  FlowArchitecture arch_;
  std::vector<CouplingLayer> layers_;
  std::vector<int> origin_;  // composite permutation after the coupling stack
  std::vector<int> restore_;  // inverse of origin_
  std::size_t loc_segment_ = 0;
  std::size_t log_scale_segment_ = 0;
  ad::ParamVector params_;
};

/// ln q(theta) at temperature T: tempered-base density of the inverse image
/// plus the inverse log-determinant.
Vector log_prob(const FlowModel& model, const Matrix& theta, double temperature);
Vector log_prob(const FlowModel& model, const Matrix& theta, const Vector& temperatures);

/// Draw z ~ N(0, T I), push through the flow; log-densities reuse the forward
/// log-determinant.
FlowSample sample(const FlowModel& model, RngStream& rng, int n, double temperature);

/// Reject invalid architectures with a descriptive message.
void validate(const FlowArchitecture& arch);

}  // namespace tvi
