#pragma once

// Experiment configs, run directories and the `tvi` command-line front end.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "tvi/evaluate.hpp"
#include "tvi/evidence.hpp"
#include "tvi/targets.hpp"
#include "tvi/trainer.hpp"

namespace tvi {

inline constexpr const char* kVersion = "0.1.0";
/// Overrides the output directory of every command.
inline constexpr const char* kOutputDirEnv = "TVI_OUTPUT_DIR";

struct TargetSpec {
  /// ring2d, gm, gm_file, eight_schools or gaussian.
  std::string name = "ring2d";
  int dim = 2;            // gm, gaussian
  int modes = 5;          // gm
  std::uint64_t seed = 0; // gm
  std::string path;       // gm_file, eight_schools (empty: bundled data)
  std::vector<double> mean;  // gaussian; empty means the origin

  bool operator==(const TargetSpec&) const = default;
};

struct ExperimentConfig {
  TargetSpec target;
  TrainConfig train;
  std::string output_dir;

  bool operator==(const ExperimentConfig&) const = default;
};

/// {"target": {...}, "train": {...}, "seed": n, "output_dir": "..."}; unknown
/// keys anywhere are rejected. A top-level seed overrides train.seed.
ExperimentConfig experiment_from_json(const std::string& text);
std::string experiment_to_json(const ExperimentConfig& cfg);

TargetModel build_target(const TargetSpec& spec);
/// Mixture description when the target is a Gaussian mixture.
std::optional<GmSpec> target_gm_spec(const TargetSpec& spec);

/// Flag, then the environment variable, then the configured value, then `fallback`.
std::string resolve_output_dir(const std::string& flag, const std::string& configured, const std::string& fallback);

struct LoadedRun {
  ExperimentConfig config;
  TargetModel target;
  FlowModel model;
};
LoadedRun load_run(const std::string& run_dir);

/// Writes config.json, history.csv, checkpoint_pretrain.bin, checkpoint.bin,
/// elbo.json and meta.json into run_dir.
TrainResult cmd_train(const ExperimentConfig& cfg, const std::string& run_dir, std::ostream& log);
GmSpec cmd_gen_target(int dim, int modes, std::uint64_t seed, const std::string& out_path, std::ostream& log);
std::vector<EvidenceEstimate> cmd_evidence(const std::string& run_dir, const std::vector<double>& temps, int n,
                                           std::uint64_t seed, const std::string& out_dir, std::ostream& log);
ModeReport cmd_modes(const std::string& run_dir, const std::string& gm_file, int n, std::uint64_t seed,
                     const std::string& out_dir, std::ostream& log);
double cmd_grid(const std::string& run_dir, const std::vector<double>& temps, const GridSpec& grid,
                const std::string& out_dir, std::ostream& log);
ElboEstimate cmd_elbo(const std::string& run_dir, int n, double T, std::uint64_t seed, std::ostream& log);

/// Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
int run_cli(int argc, char** argv);

}  // namespace tvi
