#include "tvi/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include <CLI11.hpp>
#include <json.hpp>

#ifndef TVI_DEFAULT_DATA_DIR
#define TVI_DEFAULT_DATA_DIR "data"
#endif

namespace tvi {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr std::uint64_t kModesStream = 0x30deULL;
constexpr std::uint64_t kEvidenceStream = 0xe71dULL;
constexpr std::uint64_t kElboStream = 0xe1b1ULL;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create directory " + dir + ": " + ec.message());
}

json target_to_json(const TargetSpec& t) {
  json j{{"name", t.name}};
  if (t.name == "gm") {
    j["dim"] = t.dim;
    j["modes"] = t.modes;
    j["seed"] = t.seed;
  } else if (t.name == "gm_file") {
    j["path"] = t.path;
  } else if (t.name == "eight_schools") {
    if (!t.path.empty()) j["path"] = t.path;
  } else if (t.name == "gaussian") {
    j["dim"] = t.dim;
    if (!t.mean.empty()) j["mean"] = t.mean;
  }
  return j;
}

TargetSpec target_from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("target must be a JSON object");
  TargetSpec t;
  std::vector<std::string> unknown;
  bool has_dim = false;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    if (k == "name") t.name = it->get<std::string>();
    else if (k == "dim") {
      t.dim = it->get<int>();
      has_dim = true;
    } else if (k == "modes") t.modes = it->get<int>();
    else if (k == "seed") t.seed = it->get<std::uint64_t>();
    else if (k == "path") t.path = it->get<std::string>();
    else if (k == "mean") t.mean = it->get<std::vector<double>>();
    else unknown.push_back("target." + k);
  }
  if (!unknown.empty()) {
    std::string msg = "unknown config keys:";
    for (const auto& k : unknown) msg += " " + k;
    throw std::invalid_argument(msg);
  }
  if (t.name == "ring2d" || t.name == "eight_schools" || t.name == "gm_file") {
    if (has_dim) throw std::invalid_argument("target." + t.name + " does not take a dim");
    t.dim = t.name == "ring2d" ? 2 : t.name == "eight_schools" ? 10 : 0;
  } else if (t.name == "gm") {
    if (t.dim < 2 || t.modes < 1) throw std::invalid_argument("target.gm needs dim >= 2 and modes >= 1");
  } else if (t.name == "gaussian") {
    if (!t.mean.empty() && !has_dim) t.dim = static_cast<int>(t.mean.size());
    if (t.dim < 2 || (!t.mean.empty() && static_cast<int>(t.mean.size()) != t.dim)) {
      throw std::invalid_argument("target.gaussian needs dim >= 2 matching mean");
    }
  } else {
    throw std::invalid_argument("unknown target name: " + t.name + " (ring2d, gm, gm_file, eight_schools, gaussian)");
  }
  if (t.name == "gm_file" && t.path.empty()) throw std::invalid_argument("target.gm_file needs a path");
  return t;
}

std::string eight_schools_path(const TargetSpec& t) {
  return t.path.empty() ? std::string(TVI_DEFAULT_DATA_DIR) + "/eight_schools.json" : t.path;
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

}  // namespace

ExperimentConfig experiment_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("experiment config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw std::invalid_argument("experiment config must be a JSON object");
  ExperimentConfig c;
  std::vector<std::string> unknown;
  std::optional<std::uint64_t> seed;
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      if (k == "target") c.target = target_from_json(*it);
      else if (k == "train") c.train = train_config_from_json(it->dump());
      else if (k == "seed") seed = it->get<std::uint64_t>();
      else if (k == "output_dir") c.output_dir = it->get<std::string>();
      else unknown.push_back(k);
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("experiment config: ") + e.what());
  }
  if (!unknown.empty()) {
    std::string msg = "unknown config keys:";
    for (const auto& k : unknown) msg += " " + k;
    throw std::invalid_argument(msg);
  }
  if (seed) c.train.seed = *seed;
  return c;
}

std::string experiment_to_json(const ExperimentConfig& c) {
  json j;
  j["target"] = target_to_json(c.target);
  j["train"] = json::parse(train_config_to_json(c.train));
  j["seed"] = c.train.seed;
  if (!c.output_dir.empty()) j["output_dir"] = c.output_dir;
  return j.dump(2) + "\n";
}

std::optional<GmSpec> target_gm_spec(const TargetSpec& t) {
  if (t.name == "ring2d") return ring_gm_2d();
  if (t.name == "gm") return make_gm(t.dim, t.modes, t.seed).spec;
  if (t.name == "gm_file") return load_gm_spec(t.path);
  return std::nullopt;
}

TargetModel build_target(const TargetSpec& t) {
  if (t.name == "ring2d") return gm_target(ring_gm_2d(), "ring2d");
  if (t.name == "gm") return make_gm(t.dim, t.modes, t.seed).target;
  if (t.name == "gm_file") return gm_target(load_gm_spec(t.path), "gm_file");
  if (t.name == "eight_schools") return eight_schools_target(EightSchoolsData::load(eight_schools_path(t)));
  if (t.name == "gaussian") {
    Vector mean = Vector::Zero(t.dim);
    for (std::size_t i = 0; i < t.mean.size(); ++i) mean[static_cast<Eigen::Index>(i)] = t.mean[i];
    return gaussian_target(mean);
  }
  throw std::invalid_argument("unknown target name: " + t.name);
}

std::string resolve_output_dir(const std::string& flag, const std::string& configured, const std::string& fallback) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv(kOutputDirEnv); env != nullptr && *env != '\0') return env;
  if (!configured.empty()) return configured;
  return fallback;
}

LoadedRun load_run(const std::string& run_dir) {
  const fs::path dir(run_dir);
  if (!fs::is_directory(dir)) throw std::runtime_error("run directory " + run_dir + " does not exist");
  if (!fs::exists(dir / "checkpoint.bin")) throw std::runtime_error("run directory " + run_dir + " has no checkpoint.bin");
  ExperimentConfig cfg = experiment_from_json(read_file((dir / "config.json").string()));
  TargetModel target = build_target(cfg.target);
  FlowModel model = load_checkpoint((dir / "checkpoint.bin").string(), target.dim);
  return {std::move(cfg), std::move(target), std::move(model)};
}

TrainResult cmd_train(const ExperimentConfig& cfg, const std::string& run_dir, std::ostream& log) {
  const TargetModel target = build_target(cfg.target);
  cfg.train.validate(target.dim);
  ensure_dir(run_dir);
  const fs::path dir(run_dir);
  write_file(dir / "config.json", experiment_to_json(cfg));
  log << "training " << to_string(cfg.train.method) << " on " << target.name << " (d = " << target.dim << ", "
      << cfg.train.pretrain_epochs << " + " << cfg.train.finetune_epochs << " epochs, seed " << cfg.train.seed << ")\n";

  TrainHooks hooks;
  hooks.on_pretrain_end = [&](const FlowModel& m) { save_checkpoint(m, (dir / "checkpoint_pretrain.bin").string()); };
  hooks.progress = [&](int epoch, double loss) { log << "  epoch " << epoch << "  loss " << fmt(loss) << "\n" << std::flush; };
  hooks.progress_every = 500;
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult r = train(cfg.train, target, hooks);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (cfg.train.pretrain_epochs > 0 && !fs::exists(dir / "checkpoint_pretrain.bin") && r.pretrain_model) {
    save_checkpoint(*r.pretrain_model, (dir / "checkpoint_pretrain.bin").string());
  }
  save_checkpoint(r.model, (dir / "checkpoint.bin").string());
  write_file(dir / "history.csv", history_csv(r.history));
  if (!r.aborted) write_file(dir / "elbo.json", elbo_json(r.elbo) + "\n");
  json meta{{"seed", cfg.train.seed},
            {"version", kVersion},
            {"method", to_string(cfg.train.method)},
            {"target", target.name},
            {"epochs_completed", r.history.size()},
            {"wall_clock_seconds", seconds},
            {"aborted", r.aborted},
            {"anneal_reached_one", r.anneal_reached_one},
            {"anneal_trace", r.anneal_trace}};
  if (r.aborted) meta["abort_reason"] = r.abort_reason;
  write_file(dir / "meta.json", meta.dump(2) + "\n");
  if (r.aborted) throw std::runtime_error("training aborted at " + r.abort_reason + "; last good model saved in " + run_dir);
  log << "done in " << fmt(seconds, 1) << " s; ELBO(T=1) = " << fmt(r.elbo.mean) << " +- " << fmt(r.elbo.std_err) << " (n = "
      << r.elbo.n << ")\n";
  if (cfg.train.method == Method::LinearAnneal || cfg.train.method == Method::AdaAnn) {
    log << "annealing reached T = 1 at epoch " << r.anneal_reached_one << " after " << r.anneal_trace.size() << " updates\n";
  }
  log << "run directory: " << run_dir << "\n";
  return r;
}

GmSpec cmd_gen_target(int dim, int modes, std::uint64_t seed, const std::string& out_path, std::ostream& log) {
  const GmSpec spec = make_gm(dim, modes, seed).spec;
  const fs::path p(out_path);
  if (p.has_parent_path()) ensure_dir(p.parent_path().string());
  save_gm_spec(spec, out_path);
  log << "wrote " << out_path << ": d = " << dim << ", K = " << modes << ", d_min = " << fmt(spec.d_min)
      << ", d_max = " << fmt(spec.d_max) << "\n";
  return spec;
}

std::vector<EvidenceEstimate> cmd_evidence(const std::string& run_dir, const std::vector<double>& temps, int n,
                                           std::uint64_t seed, const std::string& out_dir, std::ostream& log) {
  const LoadedRun run = load_run(run_dir);
  const auto est = temperature_sweep(run.model, run.target, temps, n, RngStream(seed, kEvidenceStream));
  ensure_dir(out_dir);
  write_file(fs::path(out_dir) / "evidence.json", evidence_json(est) + "\n");
  log << "     T    log_Z_hat   std_err      ess   max_w\n";
  for (const auto& e : est) {
    log << std::setw(6) << fmt(e.T, 2) << std::setw(13) << fmt(e.log_Z_hat) << std::setw(10) << fmt(e.std_err_log)
        << std::setw(9) << fmt(e.ess, 0) << std::setw(8) << fmt(e.max_weight_fraction, 3) << (e.unreliable ? "  unreliable" : "")
        << "\n";
  }
  if (run.target.true_log_evidence) log << "true log-evidence: " << fmt(*run.target.true_log_evidence) << "\n";
  return est;
}

ModeReport cmd_modes(const std::string& run_dir, const std::string& gm_file, int n, std::uint64_t seed,
                     const std::string& out_dir, std::ostream& log) {
  const LoadedRun run = load_run(run_dir);
  std::optional<GmSpec> spec;
  if (!gm_file.empty()) spec = load_gm_spec(gm_file);
  else spec = target_gm_spec(run.config.target);
  if (!spec) throw std::invalid_argument("target " + run.target.name + " has no mode centers; pass --target <gm_spec.json>");
  if (spec->dim() != run.model.dim()) throw std::invalid_argument("mode centers and model dimensions differ");
  const RngStream rng(seed, kModesStream);
  RngStream a = rng;
  RngStream b = rng;
  const FlowSample s = sample(run.model, a, n, 1.0);
  const ModeReport report = mode_capture(s.thetas, *spec);
  ensure_dir(out_dir);
  write_file(fs::path(out_dir) / "modes.json", modes_json(report) + "\n");
  write_file(fs::path(out_dir) / "samples.csv", samples_csv(run.model, run.target, n, 1.0, b));
  log << "modes captured: " << report.modes_captured << " / " << report.captured.size() << " (radius " << fmt(report.radius)
      << ", n = " << n << ")\n";
  for (std::size_t k = 0; k < report.captured.size(); ++k) {
    log << "  mode " << k << ": inlier fraction " << fmt(report.inlier_fraction[k], 3) << (report.captured[k] ? "  captured" : "")
        << "\n";
  }
  return report;
}

double cmd_grid(const std::string& run_dir, const std::vector<double>& temps, const GridSpec& grid,
                const std::string& out_dir, std::ostream& log) {
  const LoadedRun run = load_run(run_dir);
  const GridTransform gt = grid_transform(run.model, grid, temps);
  ensure_dir(out_dir);
  write_file(fs::path(out_dir) / "grid.csv", grid_csv(gt));
  const double drift = temps.size() >= 2 ? transform_drift(gt) : 0.0;
  log << "grid " << gt.grid.rows() << " points at " << temps.size() << " temperatures; drift = " << fmt(drift, 6)
      << " grid spacings\n";
  return drift;
}

ElboEstimate cmd_elbo(const std::string& run_dir, int n, double T, std::uint64_t seed, std::ostream& log) {
  const LoadedRun run = load_run(run_dir);
  RngStream rng(seed, kElboStream);
  const ElboEstimate e = estimate_elbo(run.model, run.target, rng, n, T);
  log << "ELBO(T=" << fmt(T, 2) << ") = " << fmt(e.mean) << " +- " << fmt(e.std_err) << " (n = " << e.n << ", excluded "
      << e.excluded << ")\n";
  return e;
}

int run_cli(int argc, char** argv) {
  CLI::App app{"Temperature-conditional flow variational inference"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  int gen_dim = 10;
  int gen_modes = 5;
  std::uint64_t gen_seed = 0;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-target", "Place Gaussian-mixture centers and write gm_spec.json");
  gen->add_option("--dim", gen_dim, "Dimension")->capture_default_str();
  gen->add_option("--modes", gen_modes, "Number of centers")->capture_default_str();
  gen->add_option("--seed", gen_seed, "Seed")->capture_default_str();
  gen->add_option("--out", gen_out, "Output file (default <output dir>/gm_spec.json)");

  std::string config_path;
  std::string method;
  std::string target_name;
  std::string preset;
  std::string gm_file;
  std::string out;
  std::optional<int> t_dim;
  std::optional<int> t_modes;
  std::optional<std::uint64_t> t_seed;
  std::optional<std::uint64_t> seed;
  std::optional<int> pretrain_epochs;
  std::optional<int> finetune_epochs;
  std::optional<int> batch_size;
  std::optional<int> bins;
  std::optional<double> pretrain_lr;
  std::optional<double> finetune_lr;
  std::optional<double> half_width;
  std::optional<double> adaann_tol;
  std::optional<double> anneal_T0;
  auto* tr = app.add_subcommand("train", "Train a flow and write a run directory");
  tr->add_option("--config", config_path, "Experiment config JSON")->check(CLI::ExistingFile);
  tr->add_option("--method", method, "flowvat, flowvat_exact, target_only, nf_vi, linear_anneal or adaann");
  tr->add_option("--target", target_name, "ring2d, gm, gm_file, eight_schools or gaussian");
  tr->add_option("--dim", t_dim, "Target dimension (gm, gaussian)");
  tr->add_option("--modes", t_modes, "Mixture components (gm)");
  tr->add_option("--target-seed", t_seed, "Center placement seed (gm)");
  tr->add_option("--gm-file", gm_file, "gm_spec.json for --target gm_file");
  tr->add_option("--preset", preset, "desk or paper");
  tr->add_option("--seed", seed, "Training seed");
  tr->add_option("--pretrain-epochs", pretrain_epochs);
  tr->add_option("--finetune-epochs", finetune_epochs);
  tr->add_option("--batch-size", batch_size);
  tr->add_option("--pretrain-lr", pretrain_lr);
  tr->add_option("--finetune-lr", finetune_lr);
  tr->add_option("--bins", bins, "Spline bins K");
  tr->add_option("--half-width", half_width, "Spline interval half-width B");
  tr->add_option("--adaann-tol", adaann_tol);
  tr->add_option("--anneal-T0", anneal_T0);
  tr->add_option("--out", out, "Run directory");

  std::string run_dir;
  std::vector<double> temps{1.0, 1.25, 1.5};
  int n = 50000;
  std::uint64_t eval_seed = 0;
  std::string eval_out;
  auto* ev = app.add_subcommand("evidence", "Importance-sampling evidence over a temperature grid");
  ev->add_option("--run", run_dir, "Run directory")->required();
  ev->add_option("--temps", temps, "Proposal temperatures")->delimiter(',')->capture_default_str();
  ev->add_option("--n", n, "Samples per temperature")->capture_default_str();
  ev->add_option("--seed", eval_seed)->capture_default_str();
  ev->add_option("--out", eval_out, "Output directory (default: the run directory)");

  int modes_n = 2000;
  std::string modes_target;
  auto* md = app.add_subcommand("modes", "Mode-capture score and samples.csv at T = 1");
  md->add_option("--run", run_dir, "Run directory")->required();
  md->add_option("--target", modes_target, "gm_spec.json overriding the run's target");
  md->add_option("--n", modes_n)->capture_default_str();
  md->add_option("--seed", eval_seed)->capture_default_str();
  md->add_option("--out", eval_out, "Output directory (default: the run directory)");

  std::vector<double> grid_temps{0.95, 1.0, 1.5, 4.0};
  GridSpec grid;
  auto* gr = app.add_subcommand("grid", "Push a regular latent grid through the flow (2-d only)");
  gr->add_option("--run", run_dir, "Run directory")->required();
  gr->add_option("--temps", grid_temps)->delimiter(',')->capture_default_str();
  gr->add_option("--lo", grid.lo)->capture_default_str();
  gr->add_option("--hi", grid.hi)->capture_default_str();
  gr->add_option("--spacing", grid.spacing)->capture_default_str();
  gr->add_option("--out", eval_out, "Output directory (default: the run directory)");

  int elbo_n = 5000;
  double elbo_T = 1.0;
  auto* el = app.add_subcommand("elbo", "Monte-Carlo ELBO of a trained run");
  el->add_option("--run", run_dir, "Run directory")->required();
  el->add_option("--n", elbo_n)->capture_default_str();
  el->add_option("--T", elbo_T)->capture_default_str();
  el->add_option("--seed", eval_seed)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  auto out_dir_for = [&](const std::string& fallback) { return resolve_output_dir(eval_out, "", fallback); };
  try {
    if (*gen) {
      const std::string path = gen_out.empty() ? (fs::path(resolve_output_dir("", "", ".")) / "gm_spec.json").string() : gen_out;
      cmd_gen_target(gen_dim, gen_modes, gen_seed, path, std::cout);
    } else if (*tr) {
      json j = config_path.empty() ? json::object() : json::parse(read_file(config_path));
      if (!j.is_object()) throw std::invalid_argument("experiment config must be a JSON object");
      json& target = j["target"];
      if (target.is_null()) target = json::object();
      if (!target_name.empty()) {
        target = json{{"name", target_name}};
      }
      if (t_dim) target["dim"] = *t_dim;
      if (t_modes) target["modes"] = *t_modes;
      if (t_seed) target["seed"] = *t_seed;
      if (!gm_file.empty()) target["path"] = gm_file;
      if (target.empty()) target["name"] = "ring2d";
      json& train_j = j["train"];
      if (train_j.is_null()) train_j = json::object();
      if (!preset.empty()) train_j["preset"] = preset;
      if (!method.empty()) train_j["method"] = method;
      if (pretrain_epochs) train_j["pretrain_epochs"] = *pretrain_epochs;
      if (finetune_epochs) train_j["finetune_epochs"] = *finetune_epochs;
      if (batch_size) train_j["batch_size"] = *batch_size;
      if (pretrain_lr) train_j["pretrain_lr"] = *pretrain_lr;
      if (finetune_lr) train_j["finetune_lr"] = *finetune_lr;
      if (adaann_tol) train_j["adaann_tol"] = *adaann_tol;
      if (anneal_T0) train_j["anneal_T0"] = *anneal_T0;
      if (bins) train_j["architecture"]["bins"] = *bins;
      if (half_width) train_j["architecture"]["half_width"] = *half_width;
      if (seed) j["seed"] = *seed;
      const ExperimentConfig cfg = experiment_from_json(j.dump());
      const std::string fallback = (fs::path("runs") / (to_string(cfg.train.method) + "-" + cfg.target.name + "-seed" +
                                                        std::to_string(cfg.train.seed)))
                                       .string();
      cmd_train(cfg, resolve_output_dir(out, cfg.output_dir, fallback), std::cout);
    } else if (*ev) {
      cmd_evidence(run_dir, temps, n, eval_seed, out_dir_for(run_dir), std::cout);
    } else if (*md) {
      cmd_modes(run_dir, modes_target, modes_n, eval_seed, out_dir_for(run_dir), std::cout);
    } else if (*gr) {
      cmd_grid(run_dir, grid_temps, grid, out_dir_for(run_dir), std::cout);
    } else if (*el) {
      cmd_elbo(run_dir, elbo_n, elbo_T, eval_seed, std::cout);
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace tvi
