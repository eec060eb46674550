#include "tvi/targets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <memory>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace tvi {

namespace {

using nlohmann::json;

constexpr int kGmRestarts = 20;

std::string format_point(const double* x, int d) {
  std::ostringstream os;
  os.precision(17);
  os << "[";
  for (int i = 0; i < d; ++i) os << (i ? ", " : "") << x[i];
  os << "]";
  return os.str();
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ln(1 + e^x) without overflow.
double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace

void GmSpec::validate() const {
  if (centers.rows() < 1 || centers.cols() < 1) throw std::invalid_argument("GmSpec: need at least one center");
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw std::invalid_argument("GmSpec: sigma must be positive");
  if (weights.size() != centers.rows()) throw std::invalid_argument("GmSpec: one weight per center required");
  if ((weights.array() < 0.0).any()) throw std::invalid_argument("GmSpec: negative weight");
  if (std::abs(weights.sum() - 1.0) > 1e-12) throw std::invalid_argument("GmSpec: weights must sum to 1");
  if (!centers.allFinite()) throw std::invalid_argument("GmSpec: non-finite center");
  for (Eigen::Index i = 0; i < centers.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < centers.rows(); ++j) {
      if (centers.row(i) == centers.row(j)) throw std::invalid_argument("GmSpec: duplicate centers");
    }
  }
}

void GmGenConfig::validate() const {
  if (K < 1 || d < 1) throw std::invalid_argument("GmGenConfig: K and d must be positive");
  if (!(d_min > 0.0 && d_min < d_max)) throw std::invalid_argument("GmGenConfig: need 0 < d_min < d_max");
  if (M < 1 || max_tries < 1) throw std::invalid_argument("GmGenConfig: M and max_tries must be positive");
  if (!(box_halfwidth > 0.0)) throw std::invalid_argument("GmGenConfig: box_halfwidth must be positive");
}

EightSchoolsData EightSchoolsData::load(const std::string& path) {
  EightSchoolsData data;
  try {
    const json j = json::parse(read_file(path));
    const auto y = j.at("y").get<std::vector<double>>();
    const auto s = j.at("sigma").get<std::vector<double>>();
    if (y.size() != 8 || s.size() != 8) throw std::invalid_argument("expected 8 schools");
    std::copy(y.begin(), y.end(), data.y.begin());
    std::copy(s.begin(), s.end(), data.sigma.begin());
  } catch (const json::exception& e) {
    throw std::runtime_error("eight schools data " + path + ": " + e.what());
  }
  data.validate();
  return data;
}

void EightSchoolsData::validate() const {
  for (int j = 0; j < 8; ++j) {
    if (!std::isfinite(y[static_cast<std::size_t>(j)])) throw std::invalid_argument("eight schools: non-finite y");
    if (!(sigma[static_cast<std::size_t>(j)] > 0.0)) throw std::invalid_argument("eight schools: sigma must be positive");
  }
}

double TargetModel::log_density(const Vector& theta) const {
  if (theta.size() != dim) throw std::invalid_argument(name + ": dimension mismatch");
  return density(theta.data(), nullptr);
}

Vector TargetModel::log_density(const Matrix& thetas) const {
  if (thetas.cols() != dim) throw std::invalid_argument(name + ": dimension mismatch");
  Vector out(thetas.rows());
  Vector row(dim);
  for (Eigen::Index i = 0; i < thetas.rows(); ++i) {
    row = thetas.row(i).transpose();
    out[i] = density(row.data(), nullptr);
  }
  return out;
}

ad::Var log_density(const TargetModel& target, ad::Var theta) {
  const Matrix& x = theta.value();
  if (x.cols() != target.dim) throw std::invalid_argument(target.name + ": dimension mismatch");
  const Eigen::Index n = x.rows();
  const int d = target.dim;
  Matrix value(n, 1);
  auto grads = std::make_shared<Matrix>(n, d);
  Vector row(d);
  Vector g(d);
  for (Eigen::Index i = 0; i < n; ++i) {
    row = x.row(i).transpose();
    const double v = target.density(row.data(), g.data());
    if (!std::isfinite(v) || !g.allFinite()) {
      throw std::domain_error(target.name + ": non-finite log density at theta = " + format_point(row.data(), d));
    }
    value(i, 0) = v;
    grads->row(i) = g.transpose();
  }
  return theta.tape().push("target_log_density", std::move(value), {theta.id()}, [grads](ad::Tape& tp, std::size_t self) {
    const Matrix& up = tp.grad_ref(self);
    tp.accumulate(tp.node(self).inputs[0], (grads->array().colwise() * up.col(0).array()).matrix());
  });
}

GmSpec ring_gm_2d() {
  GmSpec s;
  s.centers.resize(6, 2);
  for (int k = 0; k < 6; ++k) {
    const double a = 2.0 * M_PI * k / 6.0;
    s.centers(k, 0) = 3.0 + 4.0 * std::cos(a);
    s.centers(k, 1) = 3.0 + 4.0 * std::sin(a);
  }
  s.sigma = 0.38;
  s.weights = Vector::Constant(6, 1.0 / 6.0);
  return s;
}

Matrix generate_gm_centers(const GmGenConfig& cfg, RngStream& rng) {
  cfg.validate();
  const double lo = -cfg.box_halfwidth;
  const double hi = cfg.box_halfwidth;
  const auto d = static_cast<std::size_t>(cfg.d);
  const double min_sq = cfg.d_min * cfg.d_min;
  const double max_sq = cfg.d_max * cfg.d_max;
  std::vector<double> centers(static_cast<std::size_t>(cfg.K) * d);  // row-major
  for (std::size_t j = 0; j < d; ++j) centers[j] = rng.uniform(lo, hi);
  int accepted = 1;
  std::vector<double> candidate(d);
  std::vector<double> partial(static_cast<std::size_t>(cfg.K));
  for (int tries = 0; accepted < cfg.K; ++tries) {
    if (tries >= cfg.max_tries) {
      throw std::runtime_error("could not place " + std::to_string(cfg.K) + " centers in " + std::to_string(cfg.max_tries) +
                               " batches (placed " + std::to_string(accepted) + ")");
    }
    for (int i = 0; i < cfg.M && accepted < cfg.K; ++i) {
      // Coordinates are drawn lazily: once the candidate is at least d_max
      // from every accepted center it is rejected without drawing the rest.
      std::fill(partial.begin(), partial.end(), 0.0);
      bool rejected = false;
      for (std::size_t j = 0; j < d && !rejected; ++j) {
        candidate[j] = rng.uniform(lo, hi);
        rejected = true;
        for (int c = 0; c < accepted; ++c) {
          const double r = candidate[j] - centers[static_cast<std::size_t>(c) * d + j];
          partial[static_cast<std::size_t>(c)] += r * r;
          rejected = rejected && partial[static_cast<std::size_t>(c)] >= max_sq;
        }
      }
      if (rejected) continue;
      const double nearest = *std::min_element(partial.begin(), partial.begin() + accepted);
      if (nearest > min_sq && nearest < max_sq) {
        std::copy(candidate.begin(), candidate.end(), centers.begin() + static_cast<std::ptrdiff_t>(accepted * cfg.d));
        ++accepted;
      }
    }
  }
  Matrix out(cfg.K, cfg.d);
  for (int k = 0; k < cfg.K; ++k) {
    for (int j = 0; j < cfg.d; ++j) out(k, j) = centers[static_cast<std::size_t>(k) * d + static_cast<std::size_t>(j)];
  }
  return out;
}

double gm_min_distance(int d) { return std::sqrt(chi2_quantile(d, 0.99)); }
double gm_max_distance(int d) { return std::sqrt(chi2_quantile(d, 0.999)); }

GmInstance make_gm(int d, int K, std::uint64_t seed) {
  if (d < 2) throw std::invalid_argument("make_gm: dimension must be >= 2");
  GmGenConfig cfg;
  cfg.K = K;
  cfg.d = d;
  cfg.d_min = gm_min_distance(d);
  cfg.d_max = gm_max_distance(d);
  cfg.seed = seed;
  GmSpec spec;
  // A badly placed first center (near a corner in high d) can leave no room
  // for the rest; restart on a fresh stream derived from the same seed.
  RngStream rng(seed);
  for (int attempt = 0;; ++attempt) {
    try {
      spec.centers = generate_gm_centers(cfg, rng);
      break;
    } catch (const std::runtime_error&) {
      if (attempt + 1 >= kGmRestarts) throw;
      rng = RngStream(seed).substream(static_cast<std::uint64_t>(attempt + 1));
    }
  }
  spec.sigma = 1.0;
  spec.weights = Vector::Constant(K, 1.0 / K);
  spec.seed = seed;
  spec.d_min = cfg.d_min;
  spec.d_max = cfg.d_max;
  TargetModel target = gm_target(spec, "gm" + std::to_string(d) + "d_seed" + std::to_string(seed));
  return {std::move(spec), std::move(target)};
}

double gm_log_density(const GmSpec& spec, const double* theta, double* grad) {
  const int K = spec.modes();
  const int d = spec.dim();
  const double var = spec.sigma * spec.sigma;
  const double norm = -0.5 * d * (kLog2Pi + std::log(var));
  std::vector<double> terms(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    double sq = 0.0;
    for (int j = 0; j < d; ++j) {
      const double r = theta[j] - spec.centers(k, j);
      sq += r * r;
    }
    terms[static_cast<std::size_t>(k)] = std::log(spec.weights[k]) + norm - 0.5 * sq / var;
  }
  const double lse = log_sum_exp(terms);
  if (grad != nullptr) {
    for (int j = 0; j < d; ++j) grad[j] = 0.0;
    for (int k = 0; k < K; ++k) {
      const double resp = std::exp(terms[static_cast<std::size_t>(k)] - lse);
      for (int j = 0; j < d; ++j) grad[j] += resp * (spec.centers(k, j) - theta[j]) / var;
    }
  }
  return lse;
}

double gm_log_density(const GmSpec& spec, const Vector& theta) {
  if (theta.size() != spec.dim()) throw std::invalid_argument("gm_log_density: dimension mismatch");
  return gm_log_density(spec, theta.data(), nullptr);
}

TargetModel gm_target(const GmSpec& spec, std::string name) {
  spec.validate();
  TargetModel t;
  t.name = std::move(name);
  t.dim = spec.dim();
  t.density = [spec](const double* x, double* g) { return gm_log_density(spec, x, g); };
  t.true_log_evidence = 0.0;
  t.mode_centers = spec.centers;
  t.component_sigma = spec.sigma;
  return t;
}

double eight_schools_log_density(const EightSchoolsData& data, const double* u, double* grad) {
  const double mu = u[0];
  const double log_tau = u[1];
  const double tau = std::exp(log_tau);
  double lp = 0.0;
  double g_mu = 0.0;
  double g_lt = 0.0;
  for (int j = 0; j < 8; ++j) {
    const double eta = u[2 + j];
    const double s = data.sigma[static_cast<std::size_t>(j)];
    const double r = data.y[static_cast<std::size_t>(j)] - mu - tau * eta;
    lp += -0.5 * (kLog2Pi + 2.0 * std::log(s)) - 0.5 * r * r / (s * s);
    lp += -0.5 * kLog2Pi - 0.5 * eta * eta;
    if (grad != nullptr) {
      g_mu += r / (s * s);
      g_lt += r / (s * s) * tau * eta;
      grad[2 + j] = r * tau / (s * s) - eta;
    }
  }
  // mu ~ N(0, 5^2)
  lp += -0.5 * (kLog2Pi + std::log(25.0)) - 0.5 * mu * mu / 25.0;
  // tau ~ half-Cauchy(0, 5); ln(1 + tau^2/25) = softplus(2 log tau - ln 25)
  const double z = 2.0 * log_tau - std::log(25.0);
  lp += std::log(2.0) - std::log(5.0 * M_PI) - softplus(z);
  // dtau/du = tau
  lp += log_tau;
  if (grad != nullptr) {
    grad[0] = g_mu - mu / 25.0;
    const double sig = z > 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    grad[1] = g_lt - 2.0 * sig + 1.0;
  }
  return lp;
}

double eight_schools_log_density(const EightSchoolsData& data, const Vector& u) {
  if (u.size() != 10) throw std::invalid_argument("eight_schools_log_density: expected 10 parameters");
  return eight_schools_log_density(data, u.data(), nullptr);
}

TargetModel eight_schools_target(const EightSchoolsData& data) {
  data.validate();
  TargetModel t;
  t.name = "eight_schools";
  t.dim = 10;
  t.density = [data](const double* u, double* g) { return eight_schools_log_density(data, u, g); };
  return t;
}

TargetModel gaussian_target(const Vector& mean, std::string name) {
  TargetModel t;
  t.name = std::move(name);
  t.dim = static_cast<int>(mean.size());
  t.density = [mean](const double* x, double* g) {
    double sq = 0.0;
    for (Eigen::Index j = 0; j < mean.size(); ++j) {
      const double r = x[j] - mean[j];
      sq += r * r;
      if (g != nullptr) g[j] = -r;
    }
    return -0.5 * static_cast<double>(mean.size()) * kLog2Pi - 0.5 * sq;
  };
  t.true_log_evidence = 0.0;
  t.mode_centers = Matrix(mean.transpose());
  t.component_sigma = 1.0;
  return t;
}

std::string gm_spec_to_json(const GmSpec& spec) {
  json j;
  json centers = json::array();
  for (Eigen::Index k = 0; k < spec.centers.rows(); ++k) {
    std::vector<double> row(static_cast<std::size_t>(spec.centers.cols()));
    for (Eigen::Index c = 0; c < spec.centers.cols(); ++c) row[static_cast<std::size_t>(c)] = spec.centers(k, c);
    centers.push_back(row);
  }
  j["dim"] = spec.dim();
  j["centers"] = centers;
  j["sigma"] = spec.sigma;
  j["weights"] = std::vector<double>(spec.weights.data(), spec.weights.data() + spec.weights.size());
  j["seed"] = spec.seed;
  j["d_min"] = spec.d_min;
  j["d_max"] = spec.d_max;
  return j.dump(2);
}

GmSpec gm_spec_from_json(const std::string& text) {
  GmSpec s;
  try {
    const json j = json::parse(text);
    const auto rows = j.at("centers").get<std::vector<std::vector<double>>>();
    if (rows.empty()) throw std::invalid_argument("GmSpec: no centers");
    const int d = j.at("dim").get<int>();
    s.centers.resize(static_cast<Eigen::Index>(rows.size()), d);
    for (std::size_t k = 0; k < rows.size(); ++k) {
      if (static_cast<int>(rows[k].size()) != d) throw std::invalid_argument("GmSpec: center " + std::to_string(k) + " has wrong length");
      for (int c = 0; c < d; ++c) s.centers(static_cast<Eigen::Index>(k), c) = rows[k][static_cast<std::size_t>(c)];
    }
    s.sigma = j.at("sigma").get<double>();
    const auto w = j.at("weights").get<std::vector<double>>();
    s.weights = Eigen::Map<const Vector>(w.data(), static_cast<Eigen::Index>(w.size()));
    s.seed = j.value("seed", std::uint64_t{0});
    s.d_min = j.value("d_min", 0.0);
    s.d_max = j.value("d_max", 0.0);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("GmSpec JSON: ") + e.what());
  }
  s.validate();
  return s;
}

void save_gm_spec(const GmSpec& spec, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << gm_spec_to_json(spec) << "\n";
}

GmSpec load_gm_spec(const std::string& path) { return gm_spec_from_json(read_file(path)); }

}  // namespace tvi
