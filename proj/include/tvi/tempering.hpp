#pragma once

// Tempered base distribution, tempered objectives and temperature schedules.

#include <span>
#include <string>

#include "tvi/diffgraph.hpp"
#include "tvi/flow.hpp"
#include "tvi/mathcore.hpp"
#include "tvi/targets.hpp"

namespace tvi {

inline constexpr double kTemperatureFloor = 0.5;

/// Throws unless T is finite and >= kTemperatureFloor.
void check_temperature(double T, const std::string& what);

enum class ObjectiveMode { FlowVatLiteral, FlowVatExact, TargetOnly, Plain };

std::string to_string(ObjectiveMode mode);
ObjectiveMode objective_mode_from_string(const std::string& name);
/// FlowVAT modes draw z from N(0, T I); the others from N(0, I).
bool tempers_base(ObjectiveMode mode);

/// sqrt(T) * standard normal, n x d.
Matrix tempered_base_sample(RngStream& rng, int d, double T, int n);
/// Normalised N(0, T I) log density.
double tempered_base_logpdf(const Vector& z, double T);

/// Latent batch for a mode: z ~ N(0, T_i I) row-wise for FlowVAT modes,
/// N(0, I) otherwise.
Matrix draw_latents(RngStream& rng, ObjectiveMode mode, int d, const Vector& temperatures);

/// Per-sample objective integrand (n x 1, to be maximised) on the tape. The
/// tape must have the model's parameters bound. Plain ignores `temperatures`
/// and evaluates at T = 1.
ad::Var objective_integrand(ad::Tape& tape, const FlowModel& model, const TargetModel& target, const Matrix& z,
                            const Vector& temperatures, ObjectiveMode mode);

/// Negated Monte-Carlo objective, -mean(integrand).
ad::Var negative_tempered_objective(ad::Tape& tape, const FlowModel& model, const TargetModel& target, const Matrix& z,
                                    const Vector& temperatures, ObjectiveMode mode);

struct LossAndGradient {
  double loss = 0.0;
  Vector gradient;
  /// ln p'(f(z)) per sample, reused by adaptive schedules.
  Vector target_log_density;
};

LossAndGradient loss_and_gradient(const FlowModel& model, const TargetModel& target, const Matrix& z,
                                  const Vector& temperatures, ObjectiveMode mode);

/// Value-only integrand per sample.
Vector objective_values(const FlowModel& model, const TargetModel& target, const Matrix& z, const Vector& temperatures,
                        ObjectiveMode mode);

struct ScheduleConfig {
  enum class Kind { Constant, UniformRange, LinearAnneal, AdaAnn };
  Kind kind = Kind::Constant;
  double value = 1.0;  // Constant
  double lo = 0.95;    // UniformRange
  double hi = 10.0;
  double T0 = 100.0;   // annealed variants
  int update_every = 100;
  int steps = 1;       // LinearAnneal: number of updates from T0 down to 1
  double tol = 0.02;   // AdaAnn

  void validate() const;
};

std::string to_string(ScheduleConfig::Kind kind);

class TemperatureSchedule {
 public:
  explicit TemperatureSchedule(ScheduleConfig cfg);

  static TemperatureSchedule constant(double T);
  static TemperatureSchedule uniform_range(double lo, double hi);
  static TemperatureSchedule linear_anneal(double T0, int steps, int update_every);
  static TemperatureSchedule adaann(double T0, double tol, int update_every);

  const ScheduleConfig& config() const { return cfg_; }
  ScheduleConfig::Kind kind() const { return cfg_.kind; }
  bool annealed() const;
  /// Current temperature of an annealed or constant schedule.
  double current() const { return current_; }
  void set_current(double T) { current_ = T; }
  int updates() const { return updates_; }
  /// Annealed schedules move only on positive multiples of update_every.
  bool is_update_epoch(int epoch) const;

 private:
  friend double linear_anneal_step(TemperatureSchedule& schedule, int epoch);
  friend double adaann_step(TemperatureSchedule& schedule, std::span<const double> loglik_values);

  ScheduleConfig cfg_;
  double current_ = 1.0;
  int updates_ = 0;
};

/// T0 + (1 - T0) * min(k, steps) / steps with k = floor(epoch / update_every).
double linear_anneal_step(TemperatureSchedule& schedule, int epoch);

/// One AdaAnn update: 1/T += tol / std(ln p'), clamped at T = 1. A batch with
/// zero spread takes the step tol.
double adaann_step(TemperatureSchedule& schedule, std::span<const double> loglik_values);

/// Updates needed by AdaAnn for an isotropic Gaussian reference in d
/// dimensions, where std(ln p') under p^(1/T) is sqrt(d/2) / beta.
int adaann_reference_updates(double T0, double tol, int d);

/// One temperature per batch element.
Vector sample_training_temperatures(TemperatureSchedule& schedule, RngStream& rng, int batch_size, int epoch);

}  // namespace tvi
