#pragma once

// Reverse-mode differentiation over dense matrix-valued nodes.
//
// A Tape records every operation eagerly (values are computed as nodes are
// pushed) together with a backward closure. Shapes follow "batch rows x
// feature columns"; elementwise binary ops broadcast a 1 x c row, an r x 1
// column, or a 1 x 1 scalar against the other operand.

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tvi/mathcore.hpp"

namespace tvi::ad {

struct ParamSegment {
  std::string name;
  int layer = 0;
  std::string role;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;
  std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
};

/// Ordered description of how a flat parameter vector splits into tensors.
class ParamLayout {
 public:
  std::size_t add(std::string name, int layer, std::string role, int rows, int cols);
  const std::vector<ParamSegment>& segments() const { return segments_; }
  const ParamSegment& segment(std::size_t i) const { return segments_.at(i); }
  std::size_t total_size() const { return total_; }
  bool operator==(const ParamLayout& other) const;

 private:
  std::vector<ParamSegment> segments_;
  std::size_t total_ = 0;
};

/// Flat parameters plus their layout. Segments are stored column-major.
struct ParamVector {
  ParamLayout layout;
  Vector values;

  explicit ParamVector(ParamLayout l = {}) : layout(std::move(l)), values(Vector::Zero(static_cast<Eigen::Index>(layout.total_size()))) {}

  Eigen::Map<Matrix> segment(std::size_t i) {
    const auto& s = layout.segment(i);
    return {values.data() + s.offset, s.rows, s.cols};
  }
  Eigen::Map<const Matrix> segment(std::size_t i) const {
    const auto& s = layout.segment(i);
    return {values.data() + s.offset, s.rows, s.cols};
  }
};

/// Raised when a node produces NaN or Inf; carries the node id and op name.
class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(std::size_t node, std::string op, const std::string& detail);
  std::size_t node() const { return node_; }
  const std::string& op() const { return op_; }

 private:
  std::size_t node_;
  std::string op_;
};

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  struct Node {
    std::string_view op;
    std::vector<std::size_t> inputs;
    Matrix value;
    Backward backward;
    long param_segment = -1;
  };

  explicit Tape(bool check_finite = true) : check_finite_(check_finite) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var constant(double value);
  /// Leaf whose gradient can be read back with grad().
  Var variable(Matrix value);

  /// Parameters become leaves tied to the flat gradient.
  void bind(const ParamVector& params);
  Var param(std::size_t segment);

  Var push(std::string_view op, Matrix value, std::vector<std::size_t> inputs, Backward backward);

  const Node& node(std::size_t id) const { return nodes_[id]; }
  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  std::size_t size() const { return nodes_.size(); }

  /// Seeds d(out)/d(out) = 1 and runs the backward sweep. `out` must be 1 x 1.
  void backward(Var out);
  const Matrix& grad(Var v) const;
  /// Gradient w.r.t. the bound ParamVector (zeros for unused segments).
  Vector param_gradient() const;

  /// Accumulate into the gradient of node `id` (allocated on first use).
  template <class Expr>
  void accumulate(std::size_t id, const Expr& g) {
    Matrix& dst = grad_ref(id);
    dst += g;
  }
  Matrix& grad_ref(std::size_t id);
  bool has_grad(std::size_t id) const { return id < grads_.size() && grads_[id].size() > 0; }

 private:
  bool check_finite_;
  std::vector<Node> nodes_;
  std::vector<Matrix> grads_;
  const ParamVector* bound_ = nullptr;
  std::vector<long> param_nodes_;
};

// Elementwise with broadcasting.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var exp(Var a);
Var log(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
Var silu(Var a);
Var softplus(Var a);
Var square(Var a);
Var pow(Var a, double p);

// Reductions.
Var sum(Var a);
Var mean(Var a);
Var row_sum(Var a);  // r x c -> r x 1

// Linear algebra and structure.
Var matmul(Var a, Var b);
/// x * w + b with b a 1 x out row broadcast over the batch.
Var linear(Var x, Var w, Var b);
Var softmax_rows(Var a);
Var log_sum_exp_rows(Var a);  // r x c -> r x 1
Var gather_cols(Var a, std::vector<int> cols);
Var concat_cols(std::span<const Var> parts);
/// Scatter: output column a_cols[i] = a(:, i), b_cols[j] = b(:, j).
Var merge_cols(Var a, const std::vector<int>& a_cols, Var b, const std::vector<int>& b_cols);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var a) { return neg(a); }
inline Var operator*(double s, Var a) { return scale(a, s); }
inline Var operator*(Var a, double s) { return scale(a, s); }
inline Var operator+(Var a, double s) { return add_scalar(a, s); }
inline Var operator-(Var a, double s) { return add_scalar(a, -s); }

/// Dispatch a registered primitive by name; unknown names throw
/// std::invalid_argument naming the primitive.
Var apply(std::string_view primitive, std::span<const Var> inputs);
const std::vector<std::string>& registered_primitives();

struct ValueAndGradient {
  double value = 0.0;
  Vector gradient;
};

/// Evaluate a scalar objective of the bound parameters and its gradient.
ValueAndGradient evaluate_with_gradient(const ParamVector& params, const std::function<Var(Tape&)>& objective);

/// Mean of a per-row objective over a batch of latent draws. `per_sample`
/// maps the batch (as a constant node) to an n x 1 column.
ValueAndGradient batched_forward(const ParamVector& params, const Matrix& batch,
                                 const std::function<Var(Tape&, Var batch)>& per_sample);

}  // namespace tvi::ad
