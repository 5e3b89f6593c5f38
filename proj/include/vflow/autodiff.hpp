#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "vflow/error.hpp"
#include "vflow/linalg.hpp"

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// Every operation evaluates eagerly and appends one node to a flat tape; the
// backward pass walks the tape once in reverse creation order, which is a
// valid reverse topological order because nodes only reference earlier nodes.
namespace vflow::ad {

using Tensor = Matrix;

struct ParamId {
  std::size_t index = 0;
  friend bool operator==(const ParamId&, const ParamId&) = default;
};

/// Named trainable tensors. Models register their parameters here and refer
/// to them by id; a tape snapshots the values it reads.
class ParamStore {
 public:
  ParamId add(std::string name, Tensor value);

  std::size_t size() const { return values_.size(); }
  Tensor& value(ParamId id) { return values_.at(id.index); }
  const Tensor& value(ParamId id) const { return values_.at(id.index); }
  const std::string& name(ParamId id) const { return names_.at(id.index); }
  /// Throws IndexOutOfRange when no parameter has this name.
  ParamId find(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::size_t total_elements() const;
  /// Flattened view used by finite-difference checks and optimizers.
  std::vector<double> flatten() const;
  void unflatten(const std::vector<double>& flat);

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
};

/// Gradients for every parameter of a store; unused parameters get zeros.
struct Gradients {
  std::vector<Tensor> by_param;

  const Tensor& operator[](ParamId id) const { return by_param.at(id.index); }
  std::vector<double> flatten() const;
};

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  /// Value of a 1x1 node.
  double scalar() const;
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self, const Tensor& grad_out)>;

  explicit Tape(const ParamStore* params = nullptr) : params_(params) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var constant(double value);
  /// Differentiable leaf not tied to a parameter (inputs under test).
  Var variable(Tensor value);
  /// Leaf holding the current value of a stored parameter. Repeated calls
  /// with the same id return the same node.
  Var param(ParamId id);

  /// Reverse sweep from a 1x1 root. Gradients with respect to every node are
  /// kept and can be read with grad().
  Gradients backward(const Var& root);
  /// Gradient of the last backward() root with respect to v (zeros if v did
  /// not influence it).
  Tensor grad(const Var& v) const;

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  const ParamStore* params() const { return params_; }

  // Building blocks for primitive operations.
  Var push(Tensor value, bool requires_grad, BackwardFn fn);
  void accumulate(std::size_t id, const Tensor& g);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };

  const ParamStore* params_;
  std::deque<Node> nodes_;  // stable addresses: value() references survive later pushes
  std::vector<std::pair<ParamId, std::size_t>> param_nodes_;
};

// Elementwise binary operations broadcast any dimension of extent 1.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);

Var exp(const Var& a);
Var log(const Var& a);
Var sqrt(const Var& a);
Var tanh(const Var& a);
Var abs(const Var& a);
Var square(const Var& a);
Var sigmoid(const Var& a);
Var softplus(const Var& a);
/// x * sigmoid(x).
Var swish(const Var& a);
/// x / (1 + |x|).
Var softsign(const Var& a);

Var sum(const Var& a);
/// R x C -> R x 1.
Var sum_rows(const Var& a);
/// R x C -> 1 x C.
Var sum_cols(const Var& a);
Var mean(const Var& a);

Var matmul(const Var& a, const Var& b);
/// (R x C) times (C x 1).
Var matvec(const Var& m, const Var& v);
/// Inner product of two equally shaped tensors, 1 x 1.
Var dot(const Var& a, const Var& b);
Var transpose(const Var& a);
Var broadcast(const Var& a, Eigen::Index rows, Eigen::Index cols);

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
/// Columns a(:, cols[j]).
Var take_cols(const Var& a, const IndexVector& cols);
/// Rows a(rows[i], :); backward scatter-adds into repeated rows.
Var gather_rows(const Var& a, const IndexVector& rows);
/// One entry per row: a(i, cols[i]); a single-row input is shared by all rows.
Var pick(const Var& a, const IndexVector& cols);

struct MinPositive {
  Var values;         // R x 1
  IndexVector index;  // selected column per row
};
/// Row-wise smallest strictly positive entry; the gradient reaches only the
/// selected entry. Throws NoExit when a row has no positive entry.
MinPositive select_min_positive(const Var& a);

/// Row-wise log-softmax.
Var log_softmax(const Var& a);
/// Row-wise log-sum-exp, R x 1.
Var logsumexp_rows(const Var& a);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator+(const Var& a, double s) { return add_scalar(a, s); }
inline Var operator+(double s, const Var& a) { return add_scalar(a, s); }
inline Var operator-(const Var& a, double s) { return add_scalar(a, -s); }
inline Var operator-(double s, const Var& a) { return add_scalar(neg(a), s); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }
inline Var operator/(const Var& a, double s) { return scale(a, 1.0 / s); }

/// Builds a scalar objective on a fresh tape from the parameter values.
using Objective = std::function<Var(Tape&, const std::vector<Var>& params)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_coordinate = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Central differences against the tape gradient, coordinate by coordinate.
/// Relative error uses max(|analytic|, |numeric|, floor) as denominator so
/// that gradients that are zero up to roundoff do not dominate.
GradCheckReport grad_check(const Objective& f, const std::vector<Tensor>& params, double step,
                           double floor = 1e-6);

/// Same comparison for an objective over a parameter store. Every `stride`-th
/// flattened coordinate is probed; the store is restored before returning.
using StoreObjective = std::function<Var(Tape&)>;
GradCheckReport grad_check(ParamStore& store, const StoreObjective& f, double step,
                           double floor = 1e-6, std::size_t stride = 1);

}  // namespace vflow::ad
