#include "tvi/diffgraph.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

namespace tvi::ad {

std::size_t ParamLayout::add(std::string name, int layer, std::string role, int rows, int cols) {
  if (rows < 0 || cols < 0) throw std::invalid_argument("ParamLayout: negative shape");
  ParamSegment seg{std::move(name), layer, std::move(role), rows, cols, total_};
  total_ += seg.size();
  segments_.push_back(std::move(seg));
  return segments_.size() - 1;
}

bool ParamLayout::operator==(const ParamLayout& other) const {
  if (total_ != other.total_ || segments_.size() != other.segments_.size()) return false;
  for (std::size_t i = 0; i < segments_.size(); ++i) {
    const auto& a = segments_[i];
    const auto& b = other.segments_[i];
    if (a.name != b.name || a.layer != b.layer || a.role != b.role || a.rows != b.rows || a.cols != b.cols) return false;
  }
  return true;
}

NonFiniteError::NonFiniteError(std::size_t node, std::string op, const std::string& detail)
    : std::runtime_error("non-finite value at node #" + std::to_string(node) + " (" + op + ")" +
                         (detail.empty() ? "" : ": " + detail)),
      node_(node),
      op_(std::move(op)) {}

const Matrix& Var::value() const { return tape_->value(id_); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw std::logic_error("Var::scalar on non-scalar node");
  return v(0, 0);
}

Var Tape::constant(Matrix value) { return push("constant", std::move(value), {}, nullptr); }

Var Tape::constant(double value) { return constant(Matrix::Constant(1, 1, value)); }

Var Tape::variable(Matrix value) { return push("variable", std::move(value), {}, nullptr); }

void Tape::bind(const ParamVector& params) {
  bound_ = &params;
  param_nodes_.assign(params.layout.segments().size(), -1);
}

Var Tape::param(std::size_t segment) {
  if (bound_ == nullptr) throw std::logic_error("Tape::param called without bound parameters");
  if (segment >= param_nodes_.size()) throw std::out_of_range("Tape::param: bad segment index");
  if (param_nodes_[segment] >= 0) return {this, static_cast<std::size_t>(param_nodes_[segment])};
  Var v = push("param", Matrix(bound_->segment(segment)), {}, nullptr);
  nodes_[v.id()].param_segment = static_cast<long>(segment);
  param_nodes_[segment] = static_cast<long>(v.id());
  return v;
}

Var Tape::push(std::string_view op, Matrix value, std::vector<std::size_t> inputs, Backward backward) {
  const std::size_t id = nodes_.size();
  if (check_finite_ && !value.allFinite()) {
    std::ostringstream detail;
    detail << "shape " << value.rows() << "x" << value.cols();
    if (!inputs.empty()) {
      detail << ", inputs";
      for (auto in : inputs) detail << " #" << in << "(" << nodes_[in].op << ")";
    }
    throw NonFiniteError(id, std::string(op), detail.str());
  }
  nodes_.push_back(Node{op, std::move(inputs), std::move(value), std::move(backward), -1});
  return {this, id};
}

Matrix& Tape::grad_ref(std::size_t id) {
  if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
  Matrix& g = grads_[id];
  if (g.size() == 0) g = Matrix::Zero(nodes_[id].value.rows(), nodes_[id].value.cols());
  return g;
}

void Tape::backward(Var out) {
  if (out.value().size() != 1) throw std::invalid_argument("Tape::backward: output must be a 1x1 scalar");
  grads_.clear();
  grads_.resize(nodes_.size());
  grad_ref(out.id())(0, 0) = 1.0;
  for (std::size_t i = out.id() + 1; i-- > 0;) {
    if (!has_grad(i) || !nodes_[i].backward) continue;
    nodes_[i].backward(*this, i);
  }
}

const Matrix& Tape::grad(Var v) const {
  static const Matrix empty;
  if (!has_grad(v.id())) return empty;
  return grads_[v.id()];
}

Vector Tape::param_gradient() const {
  if (bound_ == nullptr) throw std::logic_error("Tape::param_gradient without bound parameters");
  Vector g = Vector::Zero(static_cast<Eigen::Index>(bound_->layout.total_size()));
  for (std::size_t s = 0; s < param_nodes_.size(); ++s) {
    const long id = param_nodes_[s];
    if (id < 0 || !has_grad(static_cast<std::size_t>(id))) continue;
    const auto& seg = bound_->layout.segment(s);
    const Matrix& gm = grads_[static_cast<std::size_t>(id)];
    Eigen::Map<Matrix>(g.data() + seg.offset, seg.rows, seg.cols) = gm;
  }
  return g;
}

namespace {

// Returns m itself when no broadcast is needed, otherwise fills `storage`.
const Matrix& expand(const Matrix& m, Eigen::Index rows, Eigen::Index cols, Matrix& storage) {
  if (m.rows() == rows && m.cols() == cols) return m;
  storage = m.replicate(rows / m.rows(), cols / m.cols());
  return storage;
}

Matrix reduce_to(const Matrix& g, Eigen::Index rows, Eigen::Index cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  if (rows == 1 && cols == 1) return Matrix::Constant(1, 1, g.sum());
  if (rows == 1) return g.colwise().sum();
  return g.rowwise().sum();
}

std::pair<Eigen::Index, Eigen::Index> broadcast_shape(const Matrix& a, const Matrix& b, std::string_view op) {
  auto dim = [&](Eigen::Index x, Eigen::Index y) {
    if (x == y) return x;
    if (x == 1) return y;
    if (y == 1) return x;
    throw std::invalid_argument(std::string(op) + ": incompatible shapes");
  };
  return {dim(a.rows(), b.rows()), dim(a.cols(), b.cols())};
}

Tape& same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw std::invalid_argument("operands live on different tapes");
  return a.tape();
}

template <class F, class DA, class DB>
Var binary(std::string_view op, Var a, Var b, F f, DA da, DB db) {
  Tape& t = same_tape(a, b);
  const auto [r, c] = broadcast_shape(a.value(), b.value(), op);
  Matrix av_copy;
  Matrix bv_copy;
  const Matrix& av = expand(a.value(), r, c, av_copy);
  const Matrix& bv = expand(b.value(), r, c, bv_copy);
  Matrix out = f(av, bv);
  return t.push(op, std::move(out), {a.id(), b.id()}, [da, db](Tape& tp, std::size_t self) {
    const auto& n = tp.node(self);
    const Matrix& g = tp.grad_ref(self);
    const Matrix& ar = tp.value(n.inputs[0]);
    const Matrix& br = tp.value(n.inputs[1]);
    Matrix ae_copy;
    Matrix be_copy;
    const Matrix& ae = expand(ar, g.rows(), g.cols(), ae_copy);
    const Matrix& be = expand(br, g.rows(), g.cols(), be_copy);
    tp.accumulate(n.inputs[0], reduce_to(da(g, ae, be, n.value), ar.rows(), ar.cols()));
    tp.accumulate(n.inputs[1], reduce_to(db(g, ae, be, n.value), br.rows(), br.cols()));
  });
}

// Unary elementwise op; `d` maps (grad_out, input, output) to grad_in.
template <class F, class D>
Var unary(std::string_view op, Var a, F f, D d) {
  Matrix out = f(a.value());
  return a.tape().push(op, std::move(out), {a.id()}, [d](Tape& tp, std::size_t self) {
    const auto& n = tp.node(self);
    const Matrix& g = tp.grad_ref(self);
    tp.accumulate(n.inputs[0], d(g, tp.value(n.inputs[0]), n.value));
  });
}

double stable_softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var add(Var a, Var b) {
  return binary(
      "add", a, b, [](const Matrix& x, const Matrix& y) -> Matrix { return x + y; },
      [](const Matrix& g, const Matrix&, const Matrix&, const Matrix&) -> Matrix { return g; },
      [](const Matrix& g, const Matrix&, const Matrix&, const Matrix&) -> Matrix { return g; });
}

Var sub(Var a, Var b) {
  return binary(
      "sub", a, b, [](const Matrix& x, const Matrix& y) -> Matrix { return x - y; },
      [](const Matrix& g, const Matrix&, const Matrix&, const Matrix&) -> Matrix { return g; },
      [](const Matrix& g, const Matrix&, const Matrix&, const Matrix&) -> Matrix { return -g; });
}

Var mul(Var a, Var b) {
  return binary(
      "mul", a, b, [](const Matrix& x, const Matrix& y) -> Matrix { return x.cwiseProduct(y); },
      [](const Matrix& g, const Matrix&, const Matrix& y, const Matrix&) -> Matrix { return g.cwiseProduct(y); },
      [](const Matrix& g, const Matrix& x, const Matrix&, const Matrix&) -> Matrix { return g.cwiseProduct(x); });
}

Var div(Var a, Var b) {
  return binary(
      "div", a, b, [](const Matrix& x, const Matrix& y) -> Matrix { return x.cwiseQuotient(y); },
      [](const Matrix& g, const Matrix&, const Matrix& y, const Matrix&) -> Matrix { return g.cwiseQuotient(y); },
      [](const Matrix& g, const Matrix&, const Matrix& y, const Matrix& out) -> Matrix {
        return -g.cwiseProduct(out).cwiseQuotient(y);
      });
}

Var neg(Var a) {
  return unary(
      "neg", a, [](const Matrix& x) -> Matrix { return -x; },
      [](const Matrix& g, const Matrix&, const Matrix&) -> Matrix { return -g; });
}

Var scale(Var a, double s) {
  return unary(
      "scale", a, [s](const Matrix& x) -> Matrix { return s * x; },
      [s](const Matrix& g, const Matrix&, const Matrix&) -> Matrix { return s * g; });
}

Var add_scalar(Var a, double s) {
  return unary(
      "add_scalar", a, [s](const Matrix& x) -> Matrix { return x.array() + s; },
      [](const Matrix& g, const Matrix&, const Matrix&) -> Matrix { return g; });
}

Var exp(Var a) {
  return unary(
      "exp", a, [](const Matrix& x) -> Matrix { return x.array().exp(); },
      [](const Matrix& g, const Matrix&, const Matrix& y) -> Matrix { return g.cwiseProduct(y); });
}

Var log(Var a) {
  return unary(
      "log", a, [](const Matrix& x) -> Matrix { return x.array().log(); },
      [](const Matrix& g, const Matrix& x, const Matrix&) -> Matrix { return g.cwiseQuotient(x); });
}

Var tanh(Var a) {
  return unary(
      "tanh", a, [](const Matrix& x) -> Matrix { return x.array().tanh(); },
      [](const Matrix& g, const Matrix&, const Matrix& y) -> Matrix {
        return g.array() * (1.0 - y.array().square());
      });
}

Var sigmoid(Var a) {
  return unary(
      "sigmoid", a, [](const Matrix& x) -> Matrix { return x.unaryExpr(&stable_sigmoid); },
      [](const Matrix& g, const Matrix&, const Matrix& y) -> Matrix { return g.array() * y.array() * (1.0 - y.array()); });
}

Var silu(Var a) {
  // 1 / (1 + e^-x) saturates to 0 or 1 without NaNs, so the vectorised exp is safe here.
  return unary(
      "silu", a,
      [](const Matrix& x) -> Matrix { return x.array() * (1.0 + (-x.array()).exp()).inverse(); },
      [](const Matrix& g, const Matrix& x, const Matrix&) -> Matrix {
        const Eigen::ArrayXXd s = (1.0 + (-x.array()).exp()).inverse();
        return g.array() * (s * (1.0 + x.array() * (1.0 - s)));
      });
}

Var softplus(Var a) {
  return unary(
      "softplus", a, [](const Matrix& x) -> Matrix { return x.unaryExpr(&stable_softplus); },
      [](const Matrix& g, const Matrix& x, const Matrix&) -> Matrix {
        return g.cwiseProduct(x.unaryExpr(&stable_sigmoid));
      });
}

Var square(Var a) {
  return unary(
      "square", a, [](const Matrix& x) -> Matrix { return x.array().square(); },
      [](const Matrix& g, const Matrix& x, const Matrix&) -> Matrix { return 2.0 * g.cwiseProduct(x); });
}

Var pow(Var a, double p) {
  return unary(
      "pow", a, [p](const Matrix& x) -> Matrix { return x.array().pow(p); },
      [p](const Matrix& g, const Matrix& x, const Matrix&) -> Matrix {
        return g.array() * p * x.array().pow(p - 1.0);
      });
}

Var sum(Var a) {
  Matrix out = Matrix::Constant(1, 1, a.value().sum());
  return a.tape().push("sum", std::move(out), {a.id()}, [](Tape& tp, std::size_t self) {
    const auto& n = tp.node(self);
    const double g = tp.grad_ref(self)(0, 0);
    const Matrix& x = tp.value(n.inputs[0]);
    tp.accumulate(n.inputs[0], Matrix::Constant(x.rows(), x.cols(), g));
  });
}

Var mean(Var a) {
  const auto count = static_cast<double>(a.value().size());
  if (count == 0) throw std::invalid_argument("mean of empty node");
  Matrix out = Matrix::Constant(1, 1, a.value().sum() / count);
  return a.tape().push("mean", std::move(out), {a.id()}, [count](Tape& tp, std::size_t self) {
    const auto& n = tp.node(self);
    const double g = tp.grad_ref(self)(0, 0) / count;
    const Matrix& x = tp.value(n.inputs[0]);
    tp.accumulate(n.inputs[0], Matrix::Constant(x.rows(), x.cols(), g));
  });
}

Var row_sum(Var a) {
  Matrix out = a.value().rowwise().sum();
  return a.tape().push("row_sum", std::move(out), {a.id()}, [](Tape& tp, std::size_t self) {
    const auto& n = tp.node(self);
    const Matrix& g = tp.grad_ref(self);
    const Matrix& x = tp.value(n.inputs[0]);
    tp.accumulate(n.inputs[0], g.replicate(1, x.cols()));
  });
}

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimensions differ");
  Matrix out = a.value() * b.value();
  return t.push("matmul", std::move(out), {a.id(), b.id()}, [](Tape& tp, std::size_t self) {
    const auto& n = tp.node(self);
    const Matrix& g = tp.grad_ref(self);
    const Matrix& av = tp.value(n.inputs[0]);
    const Matrix& bv = tp.value(n.inputs[1]);
    tp.grad_ref(n.inputs[0]).noalias() += g * bv.transpose();
    tp.grad_ref(n.inputs[1]).noalias() += av.transpose() * g;
  });
}

Var linear(Var x, Var w, Var b) {
  Tape& t = same_tape(x, w);
  same_tape(x, b);
  if (x.cols() != w.rows()) throw std::invalid_argument("linear: inner dimensions differ");
  if (b.rows() != 1 || b.cols() != w.cols()) throw std::invalid_argument("linear: bias must be 1 x out");
  Matrix out(x.rows(), w.cols());
  out.noalias() = x.value() * w.value();
  out.rowwise() += b.value().row(0);
  return t.push("linear", std::move(out), {x.id(), w.id(), b.id()}, [](Tape& tp, std::size_t self) {
    const auto& n = tp.node(self);
    const Matrix& g = tp.grad_ref(self);
    tp.grad_ref(n.inputs[0]).noalias() += g * tp.value(n.inputs[1]).transpose();
    tp.grad_ref(n.inputs[1]).noalias() += tp.value(n.inputs[0]).transpose() * g;
    tp.grad_ref(n.inputs[2]) += g.colwise().sum();
  });
}

Var softmax_rows(Var a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  return a.tape().push("softmax", std::move(out), {a.id()}, [](Tape& tp, std::size_t self) {
    const auto& n = tp.node(self);
    const Matrix& g = tp.grad_ref(self);
    const Matrix& s = n.value;
    Vector dot = g.cwiseProduct(s).rowwise().sum();
    Matrix gi = s.array() * (g.colwise() - dot).array();
    tp.accumulate(n.inputs[0], gi);
  });
}

Var log_sum_exp_rows(Var a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), 1);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    out(r, 0) = m + std::log((x.row(r).array() - m).exp().sum());
  }
  return a.tape().push("log_sum_exp", std::move(out), {a.id()}, [](Tape& tp, std::size_t self) {
    const auto& n = tp.node(self);
    const Matrix& g = tp.grad_ref(self);
    const Matrix& xv = tp.value(n.inputs[0]);
    Matrix w = (xv.colwise() - Vector(n.value.col(0))).array().exp();
    tp.accumulate(n.inputs[0], (w.array().colwise() * g.col(0).array()).matrix());
  });
}

Var gather_cols(Var a, std::vector<int> cols) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) {
    if (cols[j] < 0 || cols[j] >= x.cols()) throw std::out_of_range("gather_cols: column index out of range");
    out.col(static_cast<Eigen::Index>(j)) = x.col(cols[j]);
  }
  return a.tape().push("gather", std::move(out), {a.id()}, [cols = std::move(cols)](Tape& tp, std::size_t self) {
    const auto& n = tp.node(self);
    const Matrix& g = tp.grad_ref(self);
    Matrix& gi = tp.grad_ref(n.inputs[0]);
    for (std::size_t j = 0; j < cols.size(); ++j) gi.col(cols[j]) += g.col(static_cast<Eigen::Index>(j));
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Tape& t = parts.front().tape();
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index total = 0;
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    if (&p.tape() != &t) throw std::invalid_argument("concat_cols: operands live on different tapes");
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row counts differ");
    total += p.cols();
    ids.push_back(p.id());
  }
  Matrix out(rows, total);
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return t.push("concat", std::move(out), std::move(ids), [](Tape& tp, std::size_t self) {
    const auto& n = tp.node(self);
    const Matrix& g = tp.grad_ref(self);
    Eigen::Index offset = 0;
    for (auto in : n.inputs) {
      const Eigen::Index c = tp.value(in).cols();
      tp.accumulate(in, g.middleCols(offset, c));
      offset += c;
    }
  });
}

Var merge_cols(Var a, const std::vector<int>& a_cols, Var b, const std::vector<int>& b_cols) {
  Tape& t = same_tape(a, b);
  if (static_cast<Eigen::Index>(a_cols.size()) != a.cols() || static_cast<Eigen::Index>(b_cols.size()) != b.cols()) {
    throw std::invalid_argument("merge_cols: index lists do not match operand widths");
  }
  if (a.rows() != b.rows()) throw std::invalid_argument("merge_cols: row counts differ");
  const auto total = static_cast<Eigen::Index>(a_cols.size() + b_cols.size());
  Matrix out(a.rows(), total);
  std::vector<char> seen(static_cast<std::size_t>(total), 0);
  auto place = [&](const Matrix& src, const std::vector<int>& idx) {
    for (std::size_t j = 0; j < idx.size(); ++j) {
      if (idx[j] < 0 || idx[j] >= total || seen[static_cast<std::size_t>(idx[j])]) {
        throw std::invalid_argument("merge_cols: index lists must partition the output columns");
      }
      seen[static_cast<std::size_t>(idx[j])] = 1;
      out.col(idx[j]) = src.col(static_cast<Eigen::Index>(j));
    }
  };
  place(a.value(), a_cols);
  place(b.value(), b_cols);
  return t.push("scatter", std::move(out), {a.id(), b.id()}, [a_cols, b_cols](Tape& tp, std::size_t self) {
    const auto& n = tp.node(self);
    const Matrix& g = tp.grad_ref(self);
    Matrix& ga = tp.grad_ref(n.inputs[0]);
    for (std::size_t j = 0; j < a_cols.size(); ++j) ga.col(static_cast<Eigen::Index>(j)) += g.col(a_cols[j]);
    Matrix& gb = tp.grad_ref(n.inputs[1]);
    for (std::size_t j = 0; j < b_cols.size(); ++j) gb.col(static_cast<Eigen::Index>(j)) += g.col(b_cols[j]);
  });
}

namespace {

using UnaryFn = Var (*)(Var);
using BinaryFn = Var (*)(Var, Var);

const std::map<std::string, UnaryFn, std::less<>>& unary_registry() {
  static const std::map<std::string, UnaryFn, std::less<>> reg = {
      {"neg", &neg},         {"exp", &exp},         {"log", &log},   {"tanh", &tanh},
      {"sigmoid", &sigmoid}, {"silu", &silu},       {"softplus", &softplus},
      {"square", &square},   {"sum", &sum},         {"mean", &mean}, {"row_sum", &row_sum},
      {"softmax", &softmax_rows}, {"log_sum_exp", &log_sum_exp_rows},
  };
  return reg;
}

const std::map<std::string, BinaryFn, std::less<>>& binary_registry() {
  static const std::map<std::string, BinaryFn, std::less<>> reg = {
      {"add", &add}, {"sub", &sub}, {"mul", &mul}, {"div", &div}, {"matmul", &matmul},
  };
  return reg;
}

}  // namespace

Var apply(std::string_view primitive, std::span<const Var> inputs) {
  if (auto it = unary_registry().find(primitive); it != unary_registry().end()) {
    if (inputs.size() != 1) throw std::invalid_argument(std::string(primitive) + " takes one input");
    return it->second(inputs[0]);
  }
  if (auto it = binary_registry().find(primitive); it != binary_registry().end()) {
    if (inputs.size() != 2) throw std::invalid_argument(std::string(primitive) + " takes two inputs");
    return it->second(inputs[0], inputs[1]);
  }
  throw std::invalid_argument("unregistered primitive: " + std::string(primitive));
}

const std::vector<std::string>& registered_primitives() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& [k, v] : unary_registry()) out.push_back(k);
    for (const auto& [k, v] : binary_registry()) out.push_back(k);
    out.emplace_back("pow");
    out.emplace_back("gather");
    out.emplace_back("concat");
    out.emplace_back("scatter");
    out.emplace_back("rq_spline");
    std::sort(out.begin(), out.end());
    return out;
  }();
  return names;
}

ValueAndGradient evaluate_with_gradient(const ParamVector& params, const std::function<Var(Tape&)>& objective) {
  Tape tape;
  tape.bind(params);
  Var out = objective(tape);
  if (out.value().size() != 1) throw std::invalid_argument("objective must return a 1x1 scalar");
  tape.backward(out);
  return {out.scalar(), tape.param_gradient()};
}

ValueAndGradient batched_forward(const ParamVector& params, const Matrix& batch,
                                 const std::function<Var(Tape&, Var batch)>& per_sample) {
  if (batch.rows() == 0) throw std::invalid_argument("batched_forward: empty batch");
  return evaluate_with_gradient(params, [&](Tape& t) {
    Var values = per_sample(t, t.constant(batch));
    if (values.rows() != batch.rows() || values.cols() != 1) {
      throw std::invalid_argument("batched_forward: per-sample objective must return one value per row");
    }
    return mean(values);
  });
}

}  // namespace tvi::ad
