#include "tvi/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace tvi {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'T', 'V', 'I', 'F', 'L', 'O', 'W', '\0'};
constexpr std::uint32_t kCheckpointVersion = 1;

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

template <class T>
void write_le(std::ostream& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <class T>
T read_le(std::istream& in, const std::string& path) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw std::runtime_error("checkpoint " + path + ": truncated file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T v;
  std::memcpy(&v, bytes, sizeof(T));
  return v;
}

json architecture_json(const FlowArchitecture& a) {
  return {{"layers", a.layers}, {"hidden_layers", a.hidden_layers}, {"width", a.width},
          {"bins", a.bins},     {"half_width", a.half_width},       {"affine", a.affine}};
}

double finite_mean(const Vector& v) { return v.mean(); }

}  // namespace

std::string to_string(Method method) {
  switch (method) {
    case Method::FlowVat:
      return "flowvat";
    case Method::FlowVatExact:
      return "flowvat_exact";
    case Method::TargetOnly:
      return "target_only";
    case Method::NfVi:
      return "nf_vi";
    case Method::LinearAnneal:
      return "linear_anneal";
    case Method::AdaAnn:
      return "adaann";
  }
  return "?";
}

Method method_from_string(const std::string& name) {
  for (auto m : {Method::FlowVat, Method::FlowVatExact, Method::TargetOnly, Method::NfVi, Method::LinearAnneal,
                 Method::AdaAnn}) {
    if (to_string(m) == name) return m;
  }
  throw std::invalid_argument("unknown method: " + name);
}

bool is_conditional(Method method) {
  return method == Method::FlowVat || method == Method::FlowVatExact || method == Method::TargetOnly;
}

bool is_annealed(Method method) { return method == Method::LinearAnneal || method == Method::AdaAnn; }

ObjectiveMode objective_for(Method method) {
  switch (method) {
    case Method::FlowVat:
      return ObjectiveMode::FlowVatLiteral;
    case Method::FlowVatExact:
      return ObjectiveMode::FlowVatExact;
    case Method::NfVi:
      return ObjectiveMode::Plain;
    case Method::TargetOnly:
    case Method::LinearAnneal:
    case Method::AdaAnn:
      return ObjectiveMode::TargetOnly;
  }
  return ObjectiveMode::Plain;
}

TrainConfig TrainConfig::preset_config(const std::string& name) {
  TrainConfig c;
  if (name == "desk") return c;
  if (name == "paper") {
    c.preset = "paper";
    c.pretrain_epochs = 10000;
    c.finetune_epochs = 5000;
    c.pretrain_lr = 5e-6;
    c.finetune_lr = 1e-6;
    c.elbo_samples = 5000;
    c.architecture.layers = 10;
    c.architecture.hidden_layers = 5;
    c.architecture.width = 1024;
    c.architecture.bins = 16;
    c.architecture.half_width = 4.0;
    return c;
  }
  throw std::invalid_argument("unknown preset: " + name + " (expected desk or paper)");
}

int TrainConfig::resolved_anneal_steps() const {
  if (anneal_steps > 0) return anneal_steps;
  const int blocks = (pretrain_epochs + update_every - 1) / std::max(1, update_every);
  return std::max(1, blocks - 1);
}

FlowArchitecture TrainConfig::resolved_architecture(int dim) const {
  FlowArchitecture a = architecture;
  a.dim = dim;
  a.conditional = is_conditional(method);
  return a;
}

void TrainConfig::validate(int dim) const {
  std::vector<std::string> problems;
  auto need = [&](bool ok, const std::string& msg) {
    if (!ok) problems.push_back(msg);
  };
  need(pretrain_epochs >= 0, "pretrain_epochs must be >= 0");
  need(finetune_epochs >= 0, "finetune_epochs must be >= 0");
  need(pretrain_epochs + finetune_epochs >= 1, "need at least one epoch");
  need(pretrain_lr >= 0.0 && std::isfinite(pretrain_lr), "pretrain_lr must be >= 0");
  need(finetune_lr >= 0.0 && std::isfinite(finetune_lr), "finetune_lr must be >= 0");
  need(batch_size >= 1, "batch_size must be >= 1");
  need(elbo_samples >= 2, "elbo_samples must be >= 2");
  need(update_every >= 1, "update_every must be >= 1");
  need(anneal_steps >= 0, "anneal_steps must be >= 0");
  need(pretrain_T_range[0] >= kTemperatureFloor && pretrain_T_range[0] <= pretrain_T_range[1],
       "pretrain_T_range must satisfy " + fmt(kTemperatureFloor) + " <= lo <= hi");
  need(finetune_T_range[0] >= kTemperatureFloor && finetune_T_range[0] <= finetune_T_range[1],
       "finetune_T_range must satisfy " + fmt(kTemperatureFloor) + " <= lo <= hi");
  need(adamw.beta1 >= 0.0 && adamw.beta1 < 1.0 && adamw.beta2 >= 0.0 && adamw.beta2 < 1.0, "adamw betas must be in [0, 1)");
  need(adamw.eps > 0.0, "adamw.eps must be positive");
  need(adamw.weight_decay >= 0.0, "adamw.weight_decay must be >= 0");
  try {
    tvi::validate(resolved_architecture(dim));
  } catch (const std::invalid_argument& e) {
    problems.push_back(std::string("architecture: ") + e.what());
  }
  if (is_annealed(method)) {
    need(anneal_T0 >= 1.0, "anneal_T0 must be >= 1");
    const int available = pretrain_epochs / std::max(1, update_every) - 1;
    if (method == Method::LinearAnneal) {
      need(resolved_anneal_steps() <= available || anneal_T0 == 1.0,
           "linear_anneal: schedule reaches T=1 after " + std::to_string(resolved_anneal_steps()) + " updates but pretraining allows " +
               std::to_string(std::max(0, available)));
    } else {
      need(adaann_tol >= 0.0, "adaann_tol must be >= 0");
      const int expected = adaann_reference_updates(anneal_T0, adaann_tol, dim);
      need(expected >= 0 && expected <= available,
           "adaann: tol " + fmt(adaann_tol) + " needs about " + (expected < 0 ? std::string("infinitely many") : std::to_string(expected)) +
               " updates to reach T=1 in " + std::to_string(dim) + "d but pretraining allows " + std::to_string(std::max(0, available)) +
               " (raise pretrain_epochs or tol)");
    }
  }
  if (!problems.empty()) {
    std::string msg = "invalid training config:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw std::invalid_argument(msg);
  }
}

std::string train_config_to_json(const TrainConfig& c) {
  json j;
  j["preset"] = c.preset;
  j["method"] = to_string(c.method);
  j["pretrain_epochs"] = c.pretrain_epochs;
  j["finetune_epochs"] = c.finetune_epochs;
  j["pretrain_lr"] = c.pretrain_lr;
  j["finetune_lr"] = c.finetune_lr;
  j["batch_size"] = c.batch_size;
  j["pretrain_T_range"] = c.pretrain_T_range;
  j["finetune_T_range"] = c.finetune_T_range;
  j["anneal_T0"] = c.anneal_T0;
  j["anneal_steps"] = c.anneal_steps;
  j["adaann_tol"] = c.adaann_tol;
  j["update_every"] = c.update_every;
  j["elbo_samples"] = c.elbo_samples;
  j["seed"] = c.seed;
  j["adamw"] = {{"beta1", c.adamw.beta1}, {"beta2", c.adamw.beta2}, {"eps", c.adamw.eps}, {"weight_decay", c.adamw.weight_decay}};
  j["architecture"] = architecture_json(c.architecture);
  return j.dump(2);
}

TrainConfig train_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("training config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw std::invalid_argument("training config must be a JSON object");
  TrainConfig c = TrainConfig::preset_config(j.value("preset", std::string("desk")));
  std::vector<std::string> unknown;
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      const json& v = it.value();
      if (k == "preset") continue;
      if (k == "method") c.method = method_from_string(v.get<std::string>());
      else if (k == "pretrain_epochs") c.pretrain_epochs = v.get<int>();
      else if (k == "finetune_epochs") c.finetune_epochs = v.get<int>();
      else if (k == "pretrain_lr") c.pretrain_lr = v.get<double>();
      else if (k == "finetune_lr") c.finetune_lr = v.get<double>();
      else if (k == "batch_size") c.batch_size = v.get<int>();
      else if (k == "pretrain_T_range") c.pretrain_T_range = v.get<std::array<double, 2>>();
      else if (k == "finetune_T_range") c.finetune_T_range = v.get<std::array<double, 2>>();
      else if (k == "anneal_T0") c.anneal_T0 = v.get<double>();
      else if (k == "anneal_steps") c.anneal_steps = v.get<int>();
      else if (k == "adaann_tol") c.adaann_tol = v.get<double>();
      else if (k == "update_every") c.update_every = v.get<int>();
      else if (k == "elbo_samples") c.elbo_samples = v.get<int>();
      else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "adamw") {
        for (auto a = v.begin(); a != v.end(); ++a) {
          if (a.key() == "beta1") c.adamw.beta1 = a->get<double>();
          else if (a.key() == "beta2") c.adamw.beta2 = a->get<double>();
          else if (a.key() == "eps") c.adamw.eps = a->get<double>();
          else if (a.key() == "weight_decay") c.adamw.weight_decay = a->get<double>();
          else unknown.push_back("adamw." + a.key());
        }
      } else if (k == "architecture") {
        for (auto a = v.begin(); a != v.end(); ++a) {
          if (a.key() == "layers") c.architecture.layers = a->get<int>();
          else if (a.key() == "hidden_layers") c.architecture.hidden_layers = a->get<int>();
          else if (a.key() == "width") c.architecture.width = a->get<int>();
          else if (a.key() == "bins") c.architecture.bins = a->get<int>();
          else if (a.key() == "half_width") c.architecture.half_width = a->get<double>();
          else if (a.key() == "affine") c.architecture.affine = a->get<bool>();
          else unknown.push_back("architecture." + a.key());
        }
      } else {
        unknown.push_back(k);
      }
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("training config: ") + e.what());
  }
  if (!unknown.empty()) {
    std::string msg = "unknown training config keys:";
    for (const auto& k : unknown) msg += " " + k;
    throw std::invalid_argument(msg);
  }
  return c;
}

AdamWState::AdamWState(std::size_t n, AdamWConfig c)
    : m(Vector::Zero(static_cast<Eigen::Index>(n))), v(Vector::Zero(static_cast<Eigen::Index>(n))), cfg(c) {}

void adamw_step(AdamWState& s, Vector& params, const Vector& g, double lr) {
  if (g.size() != params.size() || s.m.size() != params.size()) throw std::invalid_argument("adamw_step: size mismatch");
  if (!g.allFinite()) throw std::domain_error("adamw_step: non-finite gradient");
  ++s.step;
  const double b1 = s.cfg.beta1;
  const double b2 = s.cfg.beta2;
  s.m = b1 * s.m + (1.0 - b1) * g;
  s.v = b2 * s.v + (1.0 - b2) * g.cwiseAbs2();
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(s.step));
  params *= 1.0 - lr * s.cfg.weight_decay;
  params.array() -= lr * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + s.cfg.eps);
}

ElboEstimate estimate_elbo(const FlowModel& model, const TargetModel& target, RngStream& rng, int n, double T) {
  if (n < 2) throw std::invalid_argument("estimate_elbo: n must be >= 2");
  check_temperature(T, "estimate_elbo");
  const FlowSample s = sample(model, rng, n, T);
  const Vector lp = target.log_density(s.thetas);
  double sum = 0.0;
  double sumsq = 0.0;
  int kept = 0;
  for (int i = 0; i < n; ++i) {
    const double v = lp[i] - s.log_probs[i];
    if (!std::isfinite(v)) continue;
    ++kept;
    sum += v;
    sumsq += v * v;
  }
  ElboEstimate e;
  e.n = kept;
  e.T = T;
  e.excluded = n - kept;
  if (e.excluded > 0.01 * n || kept < 2) {
    throw std::domain_error("estimate_elbo: " + std::to_string(e.excluded) + " of " + std::to_string(n) + " samples non-finite");
  }
  e.mean = sum / kept;
  const double var = std::max(0.0, (sumsq - kept * e.mean * e.mean) / (kept - 1));
  e.std_err = std::sqrt(var / kept);
  return e;
}

TrainResult train(const TrainConfig& config, const TargetModel& target, const TrainHooks& hooks) {
  config.validate(target.dim);
  const FlowArchitecture arch = config.resolved_architecture(target.dim);
  const ObjectiveMode mode = objective_for(config.method);
  TrainResult result{FlowModel(arch, config.seed), std::nullopt, {}, {}, {}, -1, false, {}};
  FlowModel& model = result.model;
  AdamWState opt(static_cast<std::size_t>(model.params().values.size()), config.adamw);

  std::optional<TemperatureSchedule> anneal;
  if (config.method == Method::LinearAnneal) {
    anneal = TemperatureSchedule::linear_anneal(config.anneal_T0, config.resolved_anneal_steps(), config.update_every);
  } else if (config.method == Method::AdaAnn) {
    anneal = TemperatureSchedule::adaann(config.anneal_T0, config.adaann_tol, config.update_every);
  }
  auto pretrain_temps = is_conditional(config.method)
                            ? TemperatureSchedule::uniform_range(config.pretrain_T_range[0], config.pretrain_T_range[1])
                            : TemperatureSchedule::constant(1.0);
  auto finetune_temps = is_conditional(config.method)
                            ? TemperatureSchedule::uniform_range(config.finetune_T_range[0], config.finetune_T_range[1])
                            : TemperatureSchedule::constant(1.0);

  const RngStream train_rng(config.seed, 0x7a11ULL);
  const int total = config.pretrain_epochs + config.finetune_epochs;
  result.history.reserve(static_cast<std::size_t>(total));
  Vector last_loglik;
  double last_T = anneal ? anneal->current() : 1.0;
  for (int epoch = 0; epoch < total; ++epoch) {
    const bool pretraining = epoch < config.pretrain_epochs;
    if (epoch == config.pretrain_epochs && config.pretrain_epochs > 0) {
      result.pretrain_model = model;
      if (hooks.on_pretrain_end) hooks.on_pretrain_end(model);
    }
    RngStream rng = train_rng.substream(static_cast<std::uint64_t>(epoch));
    Vector temps;
    if (pretraining && anneal) {
      if (config.method == Method::AdaAnn && anneal->is_update_epoch(epoch) && last_loglik.size() > 0) {
        adaann_step(*anneal, std::span<const double>(last_loglik.data(), static_cast<std::size_t>(last_loglik.size())));
      }
      temps = sample_training_temperatures(*anneal, rng, config.batch_size, epoch);
      if (temps[0] != last_T) {
        result.anneal_trace.push_back(temps[0]);
        last_T = temps[0];
      }
      if (temps[0] == 1.0 && result.anneal_reached_one < 0) result.anneal_reached_one = epoch;
    } else {
      temps = sample_training_temperatures(pretraining ? pretrain_temps : finetune_temps, rng, config.batch_size, epoch);
    }
    const Matrix z = draw_latents(rng, mode, target.dim, temps);
    const double lr = pretraining ? config.pretrain_lr : config.finetune_lr;
    try {
      const LossAndGradient lg = loss_and_gradient(model, target, z, temps, mode);
      if (!std::isfinite(lg.loss)) throw std::domain_error("non-finite loss");
      Vector next = model.params().values;
      adamw_step(opt, next, lg.gradient, lr);
      model.params().values = std::move(next);
      last_loglik = lg.target_log_density;
      result.history.push_back({epoch, finite_mean(temps), lg.loss});
      if (hooks.progress && hooks.progress_every > 0 && epoch % hooks.progress_every == 0) hooks.progress(epoch, lg.loss);
    } catch (const std::exception& e) {
      result.aborted = true;
      result.abort_reason = "epoch " + std::to_string(epoch) + ": " + e.what();
      break;
    }
  }
  if (config.pretrain_epochs > 0 && !result.pretrain_model && !result.aborted) result.pretrain_model = model;
  RngStream elbo_rng(config.seed, 0xe1b0ULL);
  if (!result.aborted) result.elbo = estimate_elbo(model, target, elbo_rng, config.elbo_samples, 1.0);
  return result;
}

void save_checkpoint(const FlowModel& model, const std::string& path) {
  json header;
  const auto& a = model.architecture();
  header["dim"] = a.dim;
  header["conditional"] = a.conditional;
  header["architecture"] = architecture_json(a);
  json perms = json::array();
  for (const auto& layer : model.layers()) perms.push_back(layer.permutation);
  header["permutations"] = perms;
  header["param_count"] = model.params().values.size();
  const std::string h = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  out.write(kMagic, sizeof(kMagic));
  write_le<std::uint32_t>(out, kCheckpointVersion);
  write_le<std::uint64_t>(out, h.size());
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  const Vector& v = model.params().values;
  write_le<std::uint64_t>(out, static_cast<std::uint64_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) write_le<double>(out, v[i]);
  if (!out) throw std::runtime_error("failed writing checkpoint " + path);
}

FlowModel load_checkpoint(const std::string& path, int expected_dim) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  char magic[sizeof(kMagic)];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("checkpoint " + path + ": not a flow checkpoint (bad magic)");
  }
  const auto version = read_le<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint " + path + ": format version " + std::to_string(version) + ", expected " +
                             std::to_string(kCheckpointVersion));
  }
  const auto hlen = read_le<std::uint64_t>(in, path);
  if (hlen > (1u << 24)) throw std::runtime_error("checkpoint " + path + ": corrupt header length");
  std::string h(hlen, '\0');
  if (!in.read(h.data(), static_cast<std::streamsize>(hlen))) throw std::runtime_error("checkpoint " + path + ": truncated header");
  FlowArchitecture a;
  std::vector<std::vector<int>> perms;
  std::uint64_t count = 0;
  try {
    const json header = json::parse(h);
    a.dim = header.at("dim").get<int>();
    a.conditional = header.at("conditional").get<bool>();
    const json& arch = header.at("architecture");
    a.layers = arch.at("layers").get<int>();
    a.hidden_layers = arch.at("hidden_layers").get<int>();
    a.width = arch.at("width").get<int>();
    a.bins = arch.at("bins").get<int>();
    a.half_width = arch.at("half_width").get<double>();
    a.affine = arch.at("affine").get<bool>();
    perms = header.at("permutations").get<std::vector<std::vector<int>>>();
    count = header.at("param_count").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw std::runtime_error("checkpoint " + path + ": corrupt header: " + e.what());
  }
  if (expected_dim >= 0 && a.dim != expected_dim) {
    throw std::invalid_argument("checkpoint " + path + " has dimension " + std::to_string(a.dim) + ", target has " +
                                std::to_string(expected_dim));
  }
  const auto n = read_le<std::uint64_t>(in, path);
  if (n != count) throw std::runtime_error("checkpoint " + path + ": payload size disagrees with header");
  Vector values(static_cast<Eigen::Index>(n));
  for (std::uint64_t i = 0; i < n; ++i) values[static_cast<Eigen::Index>(i)] = read_le<double>(in, path);
  if (in.peek() != std::char_traits<char>::eof()) throw std::runtime_error("checkpoint " + path + ": trailing bytes");
  return FlowModel(a, std::move(perms), values);
}

std::string history_csv(const std::vector<HistoryRow>& history) {
  std::ostringstream os;
  os << "epoch,T_mean,loss\n";
  os << std::setprecision(17);
  for (const auto& r : history) os << r.epoch << "," << r.T_mean << "," << r.loss << "\n";
  return os.str();
}

std::string elbo_json(const ElboEstimate& e) {
  json j{{"mean", e.mean}, {"std_err", e.std_err}, {"n", e.n}, {"T", e.T}, {"excluded", e.excluded}};
  return j.dump(2);
}

}  // namespace tvi
