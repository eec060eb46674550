#include "tvi/tempering.hpp"

#include <cmath>
#include <stdexcept>

namespace tvi {

namespace {

struct Integrand {
  ad::Var values;  // n x 1
  ad::Var target;  // n x 1, ln p'(theta)
};

void check_batch(const FlowModel& model, const TargetModel& target, const Matrix& z, const Vector& temperatures) {
  if (z.cols() != model.dim()) throw std::invalid_argument("objective: latent dimension does not match the flow");
  if (target.dim != model.dim()) throw std::invalid_argument("objective: target dimension does not match the flow");
  if (z.rows() < 1) throw std::invalid_argument("objective: empty batch");
  if (temperatures.size() != z.rows()) throw std::invalid_argument("objective: one temperature per sample required");
  for (Eigen::Index i = 0; i < temperatures.size(); ++i) check_temperature(temperatures[i], "objective");
}

Integrand build(ad::Tape& tape, const FlowModel& model, const TargetModel& target, const Matrix& z,
                const Vector& temperatures, ObjectiveMode mode) {
  check_batch(model, target, z, temperatures);
  const Eigen::Index n = z.rows();
  const Vector temps = mode == ObjectiveMode::Plain ? Vector::Ones(n) : temperatures;
  const FlowModel::TapeMap fwd = model.forward(tape, tape.constant(z), temps);
  const ad::Var lp = log_density(target, fwd.values);

  Matrix inv_t(n, 1);
  Matrix log_q_std(n, 1);
  Matrix log_q_tempered(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double sq = z.row(i).squaredNorm();
    inv_t(i, 0) = 1.0 / temps[i];
    log_q_std(i, 0) = -0.5 * z.cols() * kLog2Pi - 0.5 * sq;
    log_q_tempered(i, 0) = -0.5 * z.cols() * (kLog2Pi + std::log(temps[i])) - 0.5 * sq / temps[i];
  }
  ad::Var values;
  switch (mode) {
    case ObjectiveMode::FlowVatLiteral:
      values = (lp - tape.constant(std::move(log_q_std)) + fwd.logdet) * tape.constant(std::move(inv_t));
      break;
    case ObjectiveMode::FlowVatExact:
      values = lp * tape.constant(std::move(inv_t)) - tape.constant(std::move(log_q_tempered)) + fwd.logdet;
      break;
    case ObjectiveMode::TargetOnly:
      values = lp * tape.constant(std::move(inv_t)) - tape.constant(std::move(log_q_std)) + fwd.logdet;
      break;
    case ObjectiveMode::Plain:
      values = lp - tape.constant(std::move(log_q_std)) + fwd.logdet;
      break;
  }
  return {values, lp};
}

}  // namespace

void check_temperature(double T, const std::string& what) {
  if (!std::isfinite(T) || T < kTemperatureFloor) {
    throw std::invalid_argument(what + ": temperature " + std::to_string(T) + " below floor " +
                                std::to_string(kTemperatureFloor));
  }
}

std::string to_string(ObjectiveMode mode) {
  switch (mode) {
    case ObjectiveMode::FlowVatLiteral:
      return "flowvat_literal";
    case ObjectiveMode::FlowVatExact:
      return "flowvat_exact";
    case ObjectiveMode::TargetOnly:
      return "target_only";
    case ObjectiveMode::Plain:
      return "plain";
  }
  return "?";
}

ObjectiveMode objective_mode_from_string(const std::string& name) {
  for (auto m : {ObjectiveMode::FlowVatLiteral, ObjectiveMode::FlowVatExact, ObjectiveMode::TargetOnly, ObjectiveMode::Plain}) {
    if (to_string(m) == name) return m;
  }
  throw std::invalid_argument("unknown objective mode: " + name);
}

bool tempers_base(ObjectiveMode mode) { return mode == ObjectiveMode::FlowVatLiteral || mode == ObjectiveMode::FlowVatExact; }

Matrix tempered_base_sample(RngStream& rng, int d, double T, int n) {
  if (!(T > 0.0)) throw std::invalid_argument("tempered_base_sample: T must be positive");
  return sample_standard_normal(rng, n, d) * std::sqrt(T);
}

double tempered_base_logpdf(const Vector& z, double T) {
  if (!(T > 0.0)) throw std::invalid_argument("tempered_base_logpdf: T must be positive");
  return -0.5 * static_cast<double>(z.size()) * (kLog2Pi + std::log(T)) - 0.5 * z.squaredNorm() / T;
}

Matrix draw_latents(RngStream& rng, ObjectiveMode mode, int d, const Vector& temperatures) {
  Matrix z = sample_standard_normal(rng, static_cast<int>(temperatures.size()), d);
  if (tempers_base(mode)) z.array().colwise() *= temperatures.array().sqrt();
  return z;
}

ad::Var objective_integrand(ad::Tape& tape, const FlowModel& model, const TargetModel& target, const Matrix& z,
                            const Vector& temperatures, ObjectiveMode mode) {
  return build(tape, model, target, z, temperatures, mode).values;
}

ad::Var negative_tempered_objective(ad::Tape& tape, const FlowModel& model, const TargetModel& target, const Matrix& z,
                                    const Vector& temperatures, ObjectiveMode mode) {
  return -ad::mean(objective_integrand(tape, model, target, z, temperatures, mode));
}

LossAndGradient loss_and_gradient(const FlowModel& model, const TargetModel& target, const Matrix& z,
                                  const Vector& temperatures, ObjectiveMode mode) {
  ad::Tape tape;
  tape.bind(model.params());
  const Integrand it = build(tape, model, target, z, temperatures, mode);
  const ad::Var loss = -ad::mean(it.values);
  tape.backward(loss);
  return {loss.scalar(), tape.param_gradient(), it.target.value().col(0)};
}

Vector objective_values(const FlowModel& model, const TargetModel& target, const Matrix& z, const Vector& temperatures,
                        ObjectiveMode mode) {
  ad::Tape tape;
  tape.bind(model.params());
  return build(tape, model, target, z, temperatures, mode).values.value().col(0);
}

void ScheduleConfig::validate() const {
  switch (kind) {
    case Kind::Constant:
      check_temperature(value, "constant schedule");
      break;
    case Kind::UniformRange:
      check_temperature(lo, "uniform schedule");
      if (!(hi >= lo) || !std::isfinite(hi)) throw std::invalid_argument("uniform schedule: need lo <= hi");
      break;
    case Kind::LinearAnneal:
    case Kind::AdaAnn:
      if (!(T0 >= 1.0) || !std::isfinite(T0)) throw std::invalid_argument("annealing schedule: T0 must be >= 1");
      if (update_every < 1) throw std::invalid_argument("annealing schedule: update_every must be >= 1");
      if (kind == Kind::LinearAnneal && steps < 1) throw std::invalid_argument("linear schedule: steps must be >= 1");
      if (kind == Kind::AdaAnn && (!(tol >= 0.0) || !std::isfinite(tol))) {
        throw std::invalid_argument("adaann schedule: tol must be >= 0");
      }
      break;
  }
}

std::string to_string(ScheduleConfig::Kind kind) {
  switch (kind) {
    case ScheduleConfig::Kind::Constant:
      return "constant";
    case ScheduleConfig::Kind::UniformRange:
      return "uniform_range";
    case ScheduleConfig::Kind::LinearAnneal:
      return "linear_anneal";
    case ScheduleConfig::Kind::AdaAnn:
      return "adaann";
  }
  return "?";
}

TemperatureSchedule::TemperatureSchedule(ScheduleConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  switch (cfg_.kind) {
    case ScheduleConfig::Kind::Constant:
      current_ = cfg_.value;
      break;
    case ScheduleConfig::Kind::UniformRange:
      current_ = 0.5 * (cfg_.lo + cfg_.hi);
      break;
    case ScheduleConfig::Kind::LinearAnneal:
    case ScheduleConfig::Kind::AdaAnn:
      current_ = cfg_.T0;
      break;
  }
}

TemperatureSchedule TemperatureSchedule::constant(double T) {
  ScheduleConfig c;
  c.kind = ScheduleConfig::Kind::Constant;
  c.value = T;
  return TemperatureSchedule(c);
}

TemperatureSchedule TemperatureSchedule::uniform_range(double lo, double hi) {
  ScheduleConfig c;
  c.kind = ScheduleConfig::Kind::UniformRange;
  c.lo = lo;
  c.hi = hi;
  return TemperatureSchedule(c);
}

TemperatureSchedule TemperatureSchedule::linear_anneal(double T0, int steps, int update_every) {
  ScheduleConfig c;
  c.kind = ScheduleConfig::Kind::LinearAnneal;
  c.T0 = T0;
  c.steps = steps;
  c.update_every = update_every;
  return TemperatureSchedule(c);
}

TemperatureSchedule TemperatureSchedule::adaann(double T0, double tol, int update_every) {
  ScheduleConfig c;
  c.kind = ScheduleConfig::Kind::AdaAnn;
  c.T0 = T0;
  c.tol = tol;
  c.update_every = update_every;
  return TemperatureSchedule(c);
}

bool TemperatureSchedule::annealed() const {
  return cfg_.kind == ScheduleConfig::Kind::LinearAnneal || cfg_.kind == ScheduleConfig::Kind::AdaAnn;
}

bool TemperatureSchedule::is_update_epoch(int epoch) const {
  return annealed() && epoch > 0 && epoch % cfg_.update_every == 0;
}

double linear_anneal_step(TemperatureSchedule& schedule, int epoch) {
  const auto& c = schedule.cfg_;
  if (c.kind != ScheduleConfig::Kind::LinearAnneal) throw std::logic_error("linear_anneal_step: not a linear schedule");
  if (epoch < 0) throw std::invalid_argument("linear_anneal_step: negative epoch");
  const int k = std::min(epoch / c.update_every, c.steps);
  schedule.updates_ = k;
  schedule.current_ = k == c.steps ? 1.0 : c.T0 + (1.0 - c.T0) * static_cast<double>(k) / c.steps;
  return schedule.current_;
}

double adaann_step(TemperatureSchedule& schedule, std::span<const double> loglik_values) {
  const auto& c = schedule.cfg_;
  if (c.kind != ScheduleConfig::Kind::AdaAnn) throw std::logic_error("adaann_step: not an AdaAnn schedule");
  if (loglik_values.empty()) throw std::invalid_argument("adaann_step: empty batch");
  double mean = 0.0;
  for (double v : loglik_values) mean += v;
  mean /= static_cast<double>(loglik_values.size());
  double var = 0.0;
  for (double v : loglik_values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(loglik_values.size());
  if (!std::isfinite(var)) throw std::domain_error("adaann_step: non-finite log densities in batch");
  const double sd = std::sqrt(var);
  const double dbeta = sd > 0.0 ? c.tol / sd : c.tol;
  const double beta = std::min(1.0, 1.0 / schedule.current_ + dbeta);
  schedule.current_ = beta >= 1.0 ? 1.0 : 1.0 / beta;
  ++schedule.updates_;
  return schedule.current_;
}

int adaann_reference_updates(double T0, double tol, int d) {
  if (T0 <= 1.0) return 0;
  if (!(tol > 0.0)) return -1;  // never arrives
  const double factor = 1.0 + tol / std::sqrt(0.5 * d);
  return static_cast<int>(std::ceil(std::log(T0) / std::log(factor)));
}

Vector sample_training_temperatures(TemperatureSchedule& schedule, RngStream& rng, int batch_size, int epoch) {
  if (batch_size < 1) throw std::invalid_argument("sample_training_temperatures: batch_size must be >= 1");
  const auto& c = schedule.config();
  switch (c.kind) {
    case ScheduleConfig::Kind::UniformRange: {
      Vector t(batch_size);
      for (int i = 0; i < batch_size; ++i) t[i] = rng.uniform(c.lo, c.hi);
      return t;
    }
    case ScheduleConfig::Kind::LinearAnneal:
      return Vector::Constant(batch_size, linear_anneal_step(schedule, epoch));
    case ScheduleConfig::Kind::Constant:
    case ScheduleConfig::Kind::AdaAnn:
      break;
  }
  return Vector::Constant(batch_size, schedule.current());
}

}  // namespace tvi
