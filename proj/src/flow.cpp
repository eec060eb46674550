#include "tvi/flow.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "tvi/spline.hpp"

namespace tvi {

namespace {

constexpr Eigen::Index kChunkRows = 2048;

std::vector<int> iota(int n) {
  std::vector<int> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), 0);
  return v;
}

std::vector<int> invert(const std::vector<int>& perm) {
  std::vector<int> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
  return inv;
}

bool is_identity(const std::vector<int>& perm) {
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] != static_cast<int>(i)) return false;
  }
  return true;
}

void check_temperatures(const Vector& temps, Eigen::Index rows) {
  if (temps.size() != rows) throw std::invalid_argument("flow: one temperature per row required");
  for (Eigen::Index i = 0; i < temps.size(); ++i) {
    if (!(temps[i] > 0.0) || !std::isfinite(temps[i])) throw std::invalid_argument("flow: temperatures must be positive");
  }
}

}  // namespace

void validate(const FlowArchitecture& arch) {
  if (arch.dim < 1) throw std::invalid_argument("flow: dim must be >= 1");
  if (arch.layers < 1) throw std::invalid_argument("flow: need at least one coupling layer");
  if (arch.hidden_layers < 0 || arch.width < 1) throw std::invalid_argument("flow: invalid conditioner shape");
  if (arch.bins < 2) throw std::invalid_argument("flow: spline needs at least 2 bins");
  if (!(arch.half_width > arch.bins * kMinBinWidth)) throw std::invalid_argument("flow: spline interval too small");
}

FlowModel::FlowModel(FlowArchitecture arch, std::uint64_t seed) : arch_(arch) {
  validate(arch_);
  init_permutations(seed);
  build_layout();
  RngStream rng(seed, 0x1a7e5ULL);
  for (const auto& layer : layers_) {
    // Hidden layers only; the output pair (last two segments) stays zero.
    for (std::size_t s = 0; s + 2 < layer.weights.size(); s += 2) {
      auto w = params_.segment(layer.weights[s]);
      auto b = params_.segment(layer.weights[s + 1]);
      const double bound = 1.0 / std::sqrt(static_cast<double>(w.rows()));
      for (Eigen::Index c = 0; c < w.cols(); ++c) {
        for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = rng.uniform(-bound, bound);
      }
      for (Eigen::Index c = 0; c < b.cols(); ++c) b(0, c) = rng.uniform(-bound, bound);
    }
  }
}

FlowModel::FlowModel(FlowArchitecture arch, std::vector<std::vector<int>> permutations, const Vector& values)
    : arch_(arch) {
  validate(arch_);
  if (static_cast<int>(permutations.size()) != arch_.layers) {
    throw std::invalid_argument("flow: permutation count does not match layer count");
  }
  layers_.resize(static_cast<std::size_t>(arch_.layers));
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    auto sorted = permutations[l];
    std::sort(sorted.begin(), sorted.end());
    if (sorted != iota(arch_.dim)) throw std::invalid_argument("flow: invalid permutation in layer " + std::to_string(l));
    layers_[l].permutation = std::move(permutations[l]);
  }
  finalize_permutations();
  build_layout();
  if (static_cast<std::size_t>(values.size()) != params_.layout.total_size()) {
    throw std::invalid_argument("flow: parameter count " + std::to_string(values.size()) + " does not match architecture (" +
                                std::to_string(params_.layout.total_size()) + ")");
  }
  params_.values = values;
}

void FlowModel::init_permutations(std::uint64_t seed) {
  layers_.resize(static_cast<std::size_t>(arch_.layers));
  RngStream rng(seed, 0x9e3779b9ULL);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    auto perm = iota(arch_.dim);
    // A fresh shuffle before each complementary pair; the second layer of a
    // pair keeps the order so the pair transforms every coordinate.
    if (l % 2 == 0) {
      for (int i = arch_.dim - 1; i > 0; --i) {
        const auto j = static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(i + 1));
        std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
      }
    }
    layers_[l].permutation = std::move(perm);
  }
  finalize_permutations();
}

void FlowModel::finalize_permutations() {
  const int d = arch_.dim;
  const int half = d / 2;
  origin_ = iota(d);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    auto& layer = layers_[l];
    layer.pass.clear();
    layer.transformed.clear();
    for (int i = 0; i < d; ++i) {
      const bool first_half = i < half;
      const bool passes = (l % 2 == 0) ? first_half : !first_half;
      if (d == 1) {
        layer.transformed.push_back(i);
      } else if (passes) {
        layer.pass.push_back(i);
      } else {
        layer.transformed.push_back(i);
      }
    }
    std::vector<int> next(origin_.size());
    for (std::size_t i = 0; i < origin_.size(); ++i) next[i] = origin_[static_cast<std::size_t>(layer.permutation[i])];
    origin_ = std::move(next);
  }
  restore_ = invert(origin_);
}

void FlowModel::build_layout() {
  ad::ParamLayout layout;
  const int P = spline_param_count(arch_.bins);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    auto& layer = layers_[l];
    layer.weights.clear();
    int in = static_cast<int>(layer.pass.size()) + 1;
    const int li = static_cast<int>(l);
    for (int h = 0; h < arch_.hidden_layers; ++h) {
      layer.weights.push_back(layout.add("coupling" + std::to_string(l) + ".hidden" + std::to_string(h) + ".weight", li,
                                         "hidden_weight", in, arch_.width));
      layer.weights.push_back(layout.add("coupling" + std::to_string(l) + ".hidden" + std::to_string(h) + ".bias", li,
                                         "hidden_bias", 1, arch_.width));
      in = arch_.width;
    }
    const int out = static_cast<int>(layer.transformed.size()) * P;
    layer.weights.push_back(layout.add("coupling" + std::to_string(l) + ".out.weight", li, "output_weight", in, out));
    layer.weights.push_back(layout.add("coupling" + std::to_string(l) + ".out.bias", li, "output_bias", 1, out));
  }
  const int last = static_cast<int>(layers_.size());
  loc_segment_ = layout.add("affine.loc", last, "affine_loc", 1, arch_.affine ? arch_.dim : 0);
  log_scale_segment_ = layout.add("affine.log_scale", last, "affine_log_scale", 1, arch_.affine ? arch_.dim : 0);
  params_ = ad::ParamVector(std::move(layout));
}

double FlowModel::context(double temperature) const { return arch_.conditional ? std::log(temperature) : 0.0; }

ad::Var FlowModel::conditioner(ad::Tape& tape, const CouplingLayer& layer, ad::Var pass, ad::Var context) const {
  ad::Var a = context;
  if (!layer.pass.empty()) {
    const ad::Var parts[] = {pass, context};
    a = ad::concat_cols(parts);
  }
  const std::size_t hidden_pairs = layer.weights.size() / 2 - 1;
  for (std::size_t h = 0; h < hidden_pairs; ++h) {
    a = ad::silu(ad::linear(a, tape.param(layer.weights[2 * h]), tape.param(layer.weights[2 * h + 1])));
  }
  return ad::linear(a, tape.param(layer.weights[2 * hidden_pairs]), tape.param(layer.weights[2 * hidden_pairs + 1]));
}

FlowModel::TapeMap FlowModel::forward(ad::Tape& tape, ad::Var z, const Vector& temperatures) const {
  if (z.cols() != arch_.dim) throw std::invalid_argument("flow_forward: input dimension mismatch");
  check_temperatures(temperatures, z.rows());
  const Eigen::Index n = z.rows();
  Matrix ctx(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) ctx(i, 0) = context(temperatures[i]);
  ad::Var context_var = tape.constant(std::move(ctx));

  ad::Var h = z;
  ad::Var logdet = tape.constant(Matrix::Zero(n, 1));
  const auto m_cols = [](std::size_t m) { return iota(static_cast<int>(m)); };
  for (const auto& layer : layers_) {
    ad::Var x = is_identity(layer.permutation) ? h : ad::gather_cols(h, layer.permutation);
    ad::Var pass = layer.pass.empty() ? ad::Var{} : ad::gather_cols(x, layer.pass);
    ad::Var trans = layer.pass.empty() ? x : ad::gather_cols(x, layer.transformed);
    ad::Var raw = conditioner(tape, layer, pass, context_var);
    ad::Var spline = rq_spline(trans, raw, arch_.half_width, arch_.bins, false);
    const std::size_t m = layer.transformed.size();
    ad::Var y = ad::gather_cols(spline, m_cols(m));
    logdet = logdet + ad::gather_cols(spline, {static_cast<int>(m)});
    h = layer.pass.empty() ? y : ad::merge_cols(pass, layer.pass, y, layer.transformed);
  }
  if (!is_identity(restore_)) h = ad::gather_cols(h, restore_);
  if (arch_.affine) {
    ad::Var log_scale = tape.param(log_scale_segment_);
    h = h * ad::exp(log_scale) + tape.param(loc_segment_);
    logdet = logdet + ad::sum(log_scale);
  }
  return {h, logdet};
}

FlowModel::TapeMap FlowModel::inverse(ad::Tape& tape, ad::Var theta, const Vector& temperatures) const {
  if (theta.cols() != arch_.dim) throw std::invalid_argument("flow_inverse: input dimension mismatch");
  check_temperatures(temperatures, theta.rows());
  const Eigen::Index n = theta.rows();
  Matrix ctx(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) ctx(i, 0) = context(temperatures[i]);
  ad::Var context_var = tape.constant(std::move(ctx));

  ad::Var h = theta;
  ad::Var logdet = tape.constant(Matrix::Zero(n, 1));
  if (arch_.affine) {
    ad::Var log_scale = tape.param(log_scale_segment_);
    h = (h - tape.param(loc_segment_)) * ad::exp(-log_scale);
    logdet = logdet - ad::sum(log_scale);
  }
  if (!is_identity(origin_)) h = ad::gather_cols(h, origin_);
  const auto m_cols = [](std::size_t m) { return iota(static_cast<int>(m)); };
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
    const auto& layer = *it;
    ad::Var pass = layer.pass.empty() ? ad::Var{} : ad::gather_cols(h, layer.pass);
    ad::Var trans = layer.pass.empty() ? h : ad::gather_cols(h, layer.transformed);
    ad::Var raw = conditioner(tape, layer, pass, context_var);
    ad::Var spline = rq_spline(trans, raw, arch_.half_width, arch_.bins, true);
    const std::size_t m = layer.transformed.size();
    ad::Var x = ad::gather_cols(spline, m_cols(m));
    logdet = logdet + ad::gather_cols(spline, {static_cast<int>(m)});
    ad::Var merged = layer.pass.empty() ? x : ad::merge_cols(pass, layer.pass, x, layer.transformed);
    h = is_identity(layer.permutation) ? merged : ad::gather_cols(merged, invert(layer.permutation));
  }
  return {h, logdet};
}

ad::Var FlowModel::log_prob(ad::Tape& tape, ad::Var theta, const Vector& temperatures) const {
  TapeMap inv = inverse(tape, theta, temperatures);
  const Eigen::Index n = theta.rows();
  const double d = arch_.dim;
  Matrix neg_half_inv_t(n, 1);
  Matrix norm(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    neg_half_inv_t(i, 0) = -0.5 / temperatures[i];
    norm(i, 0) = -0.5 * d * (kLog2Pi + std::log(temperatures[i]));
  }
  ad::Var base = ad::row_sum(ad::square(inv.values)) * tape.constant(std::move(neg_half_inv_t)) + tape.constant(std::move(norm));
  return base + inv.logdet;
}

FlowMap FlowModel::forward(const Matrix& z, const Vector& temperatures) const {
  if (z.cols() != arch_.dim) throw std::invalid_argument("flow_forward: input dimension mismatch");
  if (!z.allFinite()) throw std::invalid_argument("flow_forward: non-finite input");
  check_temperatures(temperatures, z.rows());
  FlowMap out{Matrix(z.rows(), z.cols()), Vector(z.rows())};
  for (Eigen::Index start = 0; start < z.rows(); start += kChunkRows) {
    const Eigen::Index len = std::min(kChunkRows, z.rows() - start);
    ad::Tape tape;
    tape.bind(params_);
    TapeMap m = forward(tape, tape.constant(z.middleRows(start, len)), temperatures.segment(start, len));
    out.values.middleRows(start, len) = m.values.value();
    out.logdet.segment(start, len) = m.logdet.value().col(0);
  }
  return out;
}

FlowMap FlowModel::forward(const Matrix& z, double temperature) const {
  return forward(z, Vector::Constant(z.rows(), temperature));
}

FlowMap FlowModel::inverse(const Matrix& theta, const Vector& temperatures) const {
  if (theta.cols() != arch_.dim) throw std::invalid_argument("flow_inverse: input dimension mismatch");
  if (!theta.allFinite()) throw std::invalid_argument("flow_inverse: non-finite input");
  check_temperatures(temperatures, theta.rows());
  FlowMap out{Matrix(theta.rows(), theta.cols()), Vector(theta.rows())};
  for (Eigen::Index start = 0; start < theta.rows(); start += kChunkRows) {
    const Eigen::Index len = std::min(kChunkRows, theta.rows() - start);
    ad::Tape tape;
    tape.bind(params_);
    TapeMap m = inverse(tape, tape.constant(theta.middleRows(start, len)), temperatures.segment(start, len));
    out.values.middleRows(start, len) = m.values.value();
    out.logdet.segment(start, len) = m.logdet.value().col(0);
  }
  return out;
}

FlowMap FlowModel::inverse(const Matrix& theta, double temperature) const {
  return inverse(theta, Vector::Constant(theta.rows(), temperature));
}

void FlowModel::perturb(RngStream& rng, double scale) {
  for (Eigen::Index i = 0; i < params_.values.size(); ++i) params_.values[i] += scale * rng.normal();
}

void FlowModel::zero_output_layers() {
  for (const auto& layer : layers_) {
    params_.segment(layer.weights[layer.weights.size() - 2]).setZero();
    params_.segment(layer.weights.back()).setZero();
  }
  params_.segment(loc_segment_).setZero();
  params_.segment(log_scale_segment_).setZero();
}

Vector log_prob(const FlowModel& model, const Matrix& theta, const Vector& temperatures) {
  FlowMap inv = model.inverse(theta, temperatures);
  Vector out(theta.rows());
  for (Eigen::Index i = 0; i < theta.rows(); ++i) {
    const auto row = inv.values.row(i);
    const double sq = row.squaredNorm();
    const double t = temperatures[i];
    out[i] = -0.5 * model.dim() * (kLog2Pi + std::log(t)) - 0.5 * sq / t + inv.logdet[i];
  }
  return out;
}

Vector log_prob(const FlowModel& model, const Matrix& theta, double temperature) {
  return log_prob(model, theta, Vector::Constant(theta.rows(), temperature));
}

FlowSample sample(const FlowModel& model, RngStream& rng, int n, double temperature) {
  if (n < 1) throw std::invalid_argument("sample: n must be >= 1");
  if (!(temperature > 0.0)) throw std::invalid_argument("sample: temperature must be positive");
  Matrix z = sample_standard_normal(rng, n, model.dim()) * std::sqrt(temperature);
  FlowMap fwd = model.forward(z, temperature);
  FlowSample out{std::move(fwd.values), Vector(n)};
  for (int i = 0; i < n; ++i) {
    const double sq = z.row(i).squaredNorm();
    out.log_probs[i] = -0.5 * model.dim() * (kLog2Pi + std::log(temperature)) - 0.5 * sq / temperature - fwd.logdet[i];
  }
  return out;
}

}  // namespace tvi
