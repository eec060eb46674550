#pragma once

// Two-phase training loop, AdamW, ELBO reporting and checkpoints.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tvi/flow.hpp"
#include "tvi/targets.hpp"
#include "tvi/tempering.hpp"

namespace tvi {

enum class Method { FlowVat, FlowVatExact, TargetOnly, NfVi, LinearAnneal, AdaAnn };

std::string to_string(Method method);
Method method_from_string(const std::string& name);
/// Methods whose flow is conditioned on temperature.
bool is_conditional(Method method);
bool is_annealed(Method method);
ObjectiveMode objective_for(Method method);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  bool operator==(const AdamWConfig&) const = default;
};

struct TrainConfig {
  std::string preset = "desk";
  Method method = Method::FlowVat;
  int pretrain_epochs = 3000;
  int finetune_epochs = 1500;
  double pretrain_lr = 1e-3;
  double finetune_lr = 1e-4;
  int batch_size = 512;
  std::array<double, 2> pretrain_T_range{0.95, 10.0};
  std::array<double, 2> finetune_T_range{0.95, 1.5};
  double anneal_T0 = 100.0;
  int anneal_steps = 0;  // 0: reach T = 1 on the last update block of pretraining
  double adaann_tol = 0.02;
  int update_every = 100;
  int elbo_samples = 5000;
  std::uint64_t seed = 0;
  AdamWConfig adamw;
  /// dim and conditional are filled in from the target and method.
  FlowArchitecture architecture;

  /// "desk" (CPU minutes) or "paper" (full-size network and epoch counts).
  static TrainConfig preset_config(const std::string& name);

  int resolved_anneal_steps() const;
  /// Throws std::invalid_argument naming every offending field.
  void validate(int dim) const;
  FlowArchitecture resolved_architecture(int dim) const;

  bool operator==(const TrainConfig&) const = default;
};

/// Serialised with every field; parsing rejects unknown keys and starts from
/// the named preset so partial overrides are allowed.
std::string train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const std::string& text);

struct AdamWState {
  Vector m;
  Vector v;
  long step = 0;
  AdamWConfig cfg;

  AdamWState() = default;
  AdamWState(std::size_t n, AdamWConfig c);
};

/// Decoupled weight decay Adam with bias correction.
void adamw_step(AdamWState& state, Vector& params, const Vector& gradient, double lr);

struct ElboEstimate {
  double mean = 0.0;
  double std_err = 0.0;
  int n = 0;
  double T = 1.0;
  int excluded = 0;
};

/// Mean and standard error of ln p'(theta) - ln q(theta) over n flow samples.
ElboEstimate estimate_elbo(const FlowModel& model, const TargetModel& target, RngStream& rng, int n, double T = 1.0);

struct HistoryRow {
  int epoch = 0;
  double T_mean = 0.0;
  double loss = 0.0;
};

struct TrainResult {
  FlowModel model;
  std::optional<FlowModel> pretrain_model;
  std::vector<HistoryRow> history;
  ElboEstimate elbo;
  /// Temperature after each annealing update (empty for other methods).
  std::vector<double> anneal_trace;
  /// First epoch at which an annealed schedule reached T = 1, or -1.
  int anneal_reached_one = -1;
  bool aborted = false;
  std::string abort_reason;
};

struct TrainHooks {
  std::function<void(const FlowModel&)> on_pretrain_end;
  /// Called every `progress_every` epochs with (epoch, loss).
  std::function<void(int, double)> progress;
  int progress_every = 500;
};

/// Runs pretraining and fine-tuning. A non-finite loss or gradient stops
/// training; the result then holds the last good model and aborted = true.
TrainResult train(const TrainConfig& config, const TargetModel& target, const TrainHooks& hooks = {});

void save_checkpoint(const FlowModel& model, const std::string& path);
/// expected_dim < 0 skips the dimension check.
FlowModel load_checkpoint(const std::string& path, int expected_dim = -1);

std::string history_csv(const std::vector<HistoryRow>& history);
std::string elbo_json(const ElboEstimate& e);

}  // namespace tvi
