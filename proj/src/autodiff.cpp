#include "vflow/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace vflow::ad {

// ---------------------------------------------------------------- params

ParamId ParamStore::add(std::string name, Tensor value) {
  if (contains(name)) throw Error(Errc::ConfigInvalid, "duplicate parameter name " + name);
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  return ParamId{values_.size() - 1};
}

ParamId ParamStore::find(const std::string& name) const {
  const auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) throw Error(Errc::IndexOutOfRange, "no parameter named " + name);
  return ParamId{static_cast<std::size_t>(it - names_.begin())};
}

bool ParamStore::contains(const std::string& name) const {
  return std::find(names_.begin(), names_.end(), name) != names_.end();
}

std::size_t ParamStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
  return n;
}

std::vector<double> ParamStore::flatten() const {
  std::vector<double> out;
  out.reserve(total_elements());
  for (const auto& v : values_) out.insert(out.end(), v.data(), v.data() + v.size());
  return out;
}

void ParamStore::unflatten(const std::vector<double>& flat) {
  if (flat.size() != total_elements()) throw Error(Errc::ShapeMismatch, "flat parameter size");
  std::size_t pos = 0;
  for (auto& v : values_) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(pos), v.size(), v.data());
    pos += static_cast<std::size_t>(v.size());
  }
}

std::vector<double> Gradients::flatten() const {
  std::vector<double> out;
  for (const auto& g : by_param) out.insert(out.end(), g.data(), g.data() + g.size());
  return out;
}

// ---------------------------------------------------------------- tape

const Tensor& Var::value() const { return tape_->value(id_); }

double Var::scalar() const {
  const auto& v = value();
  if (v.rows() != 1 || v.cols() != 1) throw Error(Errc::ShapeMismatch, "expected a 1x1 value");
  return v(0, 0);
}

Var Tape::push(Tensor value, bool requires_grad, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) { return push(std::move(value), false, nullptr); }

Var Tape::constant(double value) { return constant(Tensor::Constant(1, 1, value)); }

Var Tape::variable(Tensor value) { return push(std::move(value), true, nullptr); }

Var Tape::param(ParamId id) {
  for (const auto& [pid, node] : param_nodes_)
    if (pid == id) return Var(this, node);
  if (params_ == nullptr) throw Error(Errc::IndexOutOfRange, "tape has no parameter store");
  Var v = variable(params_->value(id));
  param_nodes_.emplace_back(id, v.id());
  return v;
}

void Tape::accumulate(std::size_t id, const Tensor& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
  } else {
    n.grad += g;
  }
}

Gradients Tape::backward(const Var& root) {
  const auto& rv = value(root.id());
  if (rv.rows() != 1 || rv.cols() != 1)
    throw Error(Errc::NonScalarRoot, "backward needs a 1x1 root");
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad.resize(0, 0);
  }
  accumulate(root.id(), Tensor::Ones(1, 1));
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.backward) continue;
    // The callback may append to other nodes' gradients but never to its own.
    const Tensor g = n.grad;
    n.backward(*this, i, g);
  }

  Gradients out;
  if (params_ != nullptr) {
    out.by_param.reserve(params_->size());
    for (std::size_t p = 0; p < params_->size(); ++p) {
      const auto& pv = params_->value(ParamId{p});
      out.by_param.push_back(Tensor::Zero(pv.rows(), pv.cols()));
    }
    for (const auto& [pid, node] : param_nodes_)
      if (nodes_[node].has_grad) out.by_param[pid.index] = nodes_[node].grad;
  }
  return out;
}

Tensor Tape::grad(const Var& v) const {
  const Node& n = nodes_[v.id()];
  if (n.has_grad) return n.grad;
  return Tensor::Zero(n.value.rows(), n.value.cols());
}

// ---------------------------------------------------------------- helpers

namespace {

Tape& same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw Error(Errc::ShapeMismatch, "operands live on different tapes");
  return a.tape();
}

Eigen::Index broadcast_dim(Eigen::Index a, Eigen::Index b) {
  if (a == b) return a;
  if (a == 1) return b;
  if (b == 1) return a;
  throw Error(Errc::ShapeMismatch,
              "cannot broadcast extents " + std::to_string(a) + " and " + std::to_string(b));
}

Tensor expand(const Tensor& t, Eigen::Index rows, Eigen::Index cols) {
  if (t.rows() == rows && t.cols() == cols) return t;
  return t.replicate(rows / t.rows(), cols / t.cols());
}

// Sums a broadcast gradient back down to the operand's shape.
Tensor reduce_to(const Tensor& g, Eigen::Index rows, Eigen::Index cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  if (rows == 1 && cols == 1) return Tensor::Constant(1, 1, g.sum());
  if (rows == 1) return g.colwise().sum();
  return g.rowwise().sum();
}

bool any_grad(const Var& a) { return a.tape().requires_grad(a.id()); }
bool any_grad(const Var& a, const Var& b) { return any_grad(a) || any_grad(b); }

template <typename F, typename G>
Var unary(const Var& a, F value_fn, G deriv_fn) {
  Tape& t = a.tape();
  Tensor out = a.value().unaryExpr(value_fn);
  const std::size_t ia = a.id();
  return t.push(std::move(out), any_grad(a), [ia, deriv_fn](Tape& tp, std::size_t, const Tensor& g) {
    const Tensor& x = tp.value(ia);
    tp.accumulate(ia, g.cwiseProduct(x.unaryExpr(deriv_fn)));
  });
}

}  // namespace

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b);
  const auto r = broadcast_dim(a.rows(), b.rows());
  const auto c = broadcast_dim(a.cols(), b.cols());
  Tensor out = expand(a.value(), r, c) + expand(b.value(), r, c);
  const std::size_t ia = a.id(), ib = b.id();
  const auto ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
  return t.push(std::move(out), any_grad(a, b), [=](Tape& tp, std::size_t, const Tensor& g) {
    tp.accumulate(ia, reduce_to(g, ar, ac));
    tp.accumulate(ib, reduce_to(g, br, bc));
  });
}

Var sub(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b);
  const auto r = broadcast_dim(a.rows(), b.rows());
  const auto c = broadcast_dim(a.cols(), b.cols());
  Tensor out = expand(a.value(), r, c) - expand(b.value(), r, c);
  const std::size_t ia = a.id(), ib = b.id();
  const auto ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
  return t.push(std::move(out), any_grad(a, b), [=](Tape& tp, std::size_t, const Tensor& g) {
    tp.accumulate(ia, reduce_to(g, ar, ac));
    tp.accumulate(ib, reduce_to(-g, br, bc));
  });
}

Var mul(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b);
  const auto r = broadcast_dim(a.rows(), b.rows());
  const auto c = broadcast_dim(a.cols(), b.cols());
  Tensor out = expand(a.value(), r, c).cwiseProduct(expand(b.value(), r, c));
  const std::size_t ia = a.id(), ib = b.id();
  const auto ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
  return t.push(std::move(out), any_grad(a, b), [=](Tape& tp, std::size_t, const Tensor& g) {
    if (tp.requires_grad(ia))
      tp.accumulate(ia, reduce_to(g.cwiseProduct(expand(tp.value(ib), r, c)), ar, ac));
    if (tp.requires_grad(ib))
      tp.accumulate(ib, reduce_to(g.cwiseProduct(expand(tp.value(ia), r, c)), br, bc));
  });
}

Var div(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b);
  if ((b.value().array() == 0.0).any()) throw Error(Errc::DivisionByZero, "division by zero");
  const auto r = broadcast_dim(a.rows(), b.rows());
  const auto c = broadcast_dim(a.cols(), b.cols());
  Tensor out = expand(a.value(), r, c).cwiseQuotient(expand(b.value(), r, c));
  const std::size_t ia = a.id(), ib = b.id();
  const auto ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
  return t.push(std::move(out), any_grad(a, b), [=](Tape& tp, std::size_t, const Tensor& g) {
    const Tensor bx = expand(tp.value(ib), r, c);
    const Tensor ga = g.cwiseQuotient(bx);
    if (tp.requires_grad(ia)) tp.accumulate(ia, reduce_to(ga, ar, ac));
    if (tp.requires_grad(ib)) {
      const Tensor ax = expand(tp.value(ia), r, c);
      tp.accumulate(ib, reduce_to(-ga.cwiseProduct(ax).cwiseQuotient(bx), br, bc));
    }
  });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double s) {
  Tape& t = a.tape();
  const std::size_t ia = a.id();
  return t.push(a.value() * s, any_grad(a),
                [ia, s](Tape& tp, std::size_t, const Tensor& g) { tp.accumulate(ia, g * s); });
}

Var add_scalar(const Var& a, double s) {
  Tape& t = a.tape();
  const std::size_t ia = a.id();
  return t.push((a.value().array() + s).matrix(), any_grad(a),
                [ia](Tape& tp, std::size_t, const Tensor& g) { tp.accumulate(ia, g); });
}

Var exp(const Var& a) {
  Tape& t = a.tape();
  const std::size_t ia = a.id();
  return t.push(a.value().array().exp().matrix(), any_grad(a),
                [ia](Tape& tp, std::size_t self, const Tensor& g) {
                  tp.accumulate(ia, g.cwiseProduct(tp.value(self)));
                });
}

Var log(const Var& a) {
  if ((a.value().array() <= 0.0).any())
    throw Error(Errc::LogOfNonPositive, "log of a non-positive value");
  return unary(
      a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Var sqrt(const Var& a) {
  if ((a.value().array() < 0.0).any())
    throw Error(Errc::NegativeInput, "sqrt of a negative value");
  return unary(
      a, [](double x) { return std::sqrt(x); }, [](double x) { return 0.5 / std::sqrt(x); });
}

Var tanh(const Var& a) {
  return unary(
      a, [](double x) { return std::tanh(x); },
      [](double x) {
        const double th = std::tanh(x);
        return 1.0 - th * th;
      });
}

Var abs(const Var& a) {
  return unary(
      a, [](double x) { return std::abs(x); },
      [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var square(const Var& a) {
  return unary(
      a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

namespace {
double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
double softplus_scalar(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}
}  // namespace

Var sigmoid(const Var& a) {
  return unary(a, sigmoid_scalar, [](double x) {
    const double s = sigmoid_scalar(x);
    return s * (1.0 - s);
  });
}

Var softplus(const Var& a) { return unary(a, softplus_scalar, sigmoid_scalar); }

Var swish(const Var& a) {
  return unary(
      a, [](double x) { return x * sigmoid_scalar(x); },
      [](double x) {
        const double s = sigmoid_scalar(x);
        return s + x * s * (1.0 - s);
      });
}

Var softsign(const Var& a) { return a / (abs(a) + 1.0); }

// ---------------------------------------------------------------- reductions

Var sum(const Var& a) {
  Tape& t = a.tape();
  const std::size_t ia = a.id();
  const auto r = a.rows(), c = a.cols();
  return t.push(Tensor::Constant(1, 1, a.value().sum()), any_grad(a),
                [=](Tape& tp, std::size_t, const Tensor& g) { tp.accumulate(ia, Tensor::Constant(r, c, g(0, 0))); });
}

Var sum_rows(const Var& a) {
  Tape& t = a.tape();
  const std::size_t ia = a.id();
  const auto c = a.cols();
  return t.push(a.value().rowwise().sum(), any_grad(a),
                [=](Tape& tp, std::size_t, const Tensor& g) { tp.accumulate(ia, g.replicate(1, c)); });
}

Var sum_cols(const Var& a) {
  Tape& t = a.tape();
  const std::size_t ia = a.id();
  const auto r = a.rows();
  return t.push(a.value().colwise().sum(), any_grad(a),
                [=](Tape& tp, std::size_t, const Tensor& g) { tp.accumulate(ia, g.replicate(r, 1)); });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

// ---------------------------------------------------------------- linear algebra

Var matmul(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b);
  if (a.cols() != b.rows())
    throw Error(Errc::ShapeMismatch, "matmul inner dimensions " + std::to_string(a.cols()) +
                                         " and " + std::to_string(b.rows()));
  Tensor out = a.value() * b.value();
  const std::size_t ia = a.id(), ib = b.id();
  return t.push(std::move(out), any_grad(a, b), [ia, ib](Tape& tp, std::size_t, const Tensor& g) {
    if (tp.requires_grad(ia)) tp.accumulate(ia, g * tp.value(ib).transpose());
    if (tp.requires_grad(ib)) tp.accumulate(ib, tp.value(ia).transpose() * g);
  });
}

Var matvec(const Var& m, const Var& v) {
  if (v.cols() != 1) throw Error(Errc::ShapeMismatch, "matvec expects a column vector");
  return matmul(m, v);
}

Var dot(const Var& a, const Var& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw Error(Errc::ShapeMismatch, "dot expects equally shaped operands");
  return sum(mul(a, b));
}

Var transpose(const Var& a) {
  Tape& t = a.tape();
  const std::size_t ia = a.id();
  return t.push(a.value().transpose(), any_grad(a),
                [ia](Tape& tp, std::size_t, const Tensor& g) { tp.accumulate(ia, g.transpose()); });
}

Var broadcast(const Var& a, Eigen::Index rows, Eigen::Index cols) {
  broadcast_dim(a.rows(), rows);
  broadcast_dim(a.cols(), cols);
  Tape& t = a.tape();
  const std::size_t ia = a.id();
  const auto ar = a.rows(), ac = a.cols();
  return t.push(expand(a.value(), rows, cols), any_grad(a),
                [=](Tape& tp, std::size_t, const Tensor& g) { tp.accumulate(ia, reduce_to(g, ar, ac)); });
}

// ---------------------------------------------------------------- indexing

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows())
    throw Error(Errc::ShapeMismatch, "row slice out of range");
  Tape& t = a.tape();
  const std::size_t ia = a.id();
  const auto r = a.rows(), c = a.cols();
  return t.push(a.value().middleRows(start, count), any_grad(a),
                [=](Tape& tp, std::size_t, const Tensor& g) {
                  Tensor full = Tensor::Zero(r, c);
                  full.middleRows(start, count) = g;
                  tp.accumulate(ia, full);
                });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols())
    throw Error(Errc::ShapeMismatch, "column slice out of range");
  Tape& t = a.tape();
  const std::size_t ia = a.id();
  const auto r = a.rows(), c = a.cols();
  return t.push(a.value().middleCols(start, count), any_grad(a),
                [=](Tape& tp, std::size_t, const Tensor& g) {
                  Tensor full = Tensor::Zero(r, c);
                  full.middleCols(start, count) = g;
                  tp.accumulate(ia, full);
                });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error(Errc::ShapeMismatch, "nothing to concatenate");
  Tape& t = parts.front().tape();
  const auto c = parts.front().cols();
  Eigen::Index r = 0;
  bool grad = false;
  for (const auto& p : parts) {
    if (p.cols() != c) throw Error(Errc::ShapeMismatch, "concat_rows column mismatch");
    r += p.rows();
    grad = grad || any_grad(p);
  }
  Tensor out(r, c);
  std::vector<std::pair<std::size_t, Eigen::Index>> spans;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    spans.emplace_back(p.id(), p.rows());
    at += p.rows();
  }
  return t.push(std::move(out), grad, [spans](Tape& tp, std::size_t, const Tensor& g) {
    Eigen::Index pos = 0;
    for (const auto& [id, n] : spans) {
      if (tp.requires_grad(id)) tp.accumulate(id, g.middleRows(pos, n));
      pos += n;
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error(Errc::ShapeMismatch, "nothing to concatenate");
  Tape& t = parts.front().tape();
  const auto r = parts.front().rows();
  Eigen::Index c = 0;
  bool grad = false;
  for (const auto& p : parts) {
    if (p.rows() != r) throw Error(Errc::ShapeMismatch, "concat_cols row mismatch");
    c += p.cols();
    grad = grad || any_grad(p);
  }
  Tensor out(r, c);
  std::vector<std::pair<std::size_t, Eigen::Index>> spans;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    spans.emplace_back(p.id(), p.cols());
    at += p.cols();
  }
  return t.push(std::move(out), grad, [spans](Tape& tp, std::size_t, const Tensor& g) {
    Eigen::Index pos = 0;
    for (const auto& [id, n] : spans) {
      if (tp.requires_grad(id)) tp.accumulate(id, g.middleCols(pos, n));
      pos += n;
    }
  });
}

Var take_cols(const Var& a, const IndexVector& cols) {
  Tape& t = a.tape();
  const auto r = a.rows(), c = a.cols();
  Tensor out(r, static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) {
    if (cols[j] < 0 || cols[j] >= c) throw Error(Errc::IndexOutOfRange, "take_cols index");
    out.col(static_cast<Eigen::Index>(j)) = a.value().col(cols[j]);
  }
  const std::size_t ia = a.id();
  return t.push(std::move(out), any_grad(a), [=](Tape& tp, std::size_t, const Tensor& g) {
    Tensor full = Tensor::Zero(r, c);
    for (std::size_t j = 0; j < cols.size(); ++j)
      full.col(cols[j]) += g.col(static_cast<Eigen::Index>(j));
    tp.accumulate(ia, full);
  });
}

Var gather_rows(const Var& a, const IndexVector& rows) {
  Tape& t = a.tape();
  const auto r = a.rows(), c = a.cols();
  Tensor out(static_cast<Eigen::Index>(rows.size()), c);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= r) throw Error(Errc::IndexOutOfRange, "gather_rows index");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(rows[i]);
  }
  const std::size_t ia = a.id();
  return t.push(std::move(out), any_grad(a), [=](Tape& tp, std::size_t, const Tensor& g) {
    Tensor full = Tensor::Zero(r, c);
    for (std::size_t i = 0; i < rows.size(); ++i)
      full.row(rows[i]) += g.row(static_cast<Eigen::Index>(i));
    tp.accumulate(ia, full);
  });
}

Var pick(const Var& a, const IndexVector& cols) {
  Tape& t = a.tape();
  const auto r = a.rows(), c = a.cols();
  const auto n = static_cast<Eigen::Index>(cols.size());
  if (r != 1 && r != n) throw Error(Errc::ShapeMismatch, "pick needs one index per row");
  Tensor out(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int j = cols[static_cast<std::size_t>(i)];
    if (j < 0 || j >= c) throw Error(Errc::IndexOutOfRange, "pick index");
    out(i, 0) = a.value()(r == 1 ? 0 : i, j);
  }
  const std::size_t ia = a.id();
  return t.push(std::move(out), any_grad(a), [=](Tape& tp, std::size_t, const Tensor& g) {
    Tensor full = Tensor::Zero(r, c);
    for (Eigen::Index i = 0; i < n; ++i) full(r == 1 ? 0 : i, cols[static_cast<std::size_t>(i)]) += g(i, 0);
    tp.accumulate(ia, full);
  });
}

MinPositive select_min_positive(const Var& a) {
  Tape& t = a.tape();
  const auto r = a.rows(), c = a.cols();
  MinPositive res;
  res.index.assign(static_cast<std::size_t>(r), -1);
  Tensor out(r, 1);
  for (Eigen::Index i = 0; i < r; ++i) {
    double best = std::numeric_limits<double>::infinity();
    int arg = -1;
    for (Eigen::Index j = 0; j < c; ++j) {
      const double v = a.value()(i, j);
      if (v > 0.0 && v < best) {
        best = v;
        arg = static_cast<int>(j);
      }
    }
    if (arg < 0) throw Error(Errc::NoExit, "row without a positive entry");
    out(i, 0) = best;
    res.index[static_cast<std::size_t>(i)] = arg;
  }
  const std::size_t ia = a.id();
  const IndexVector idx = res.index;
  res.values = t.push(std::move(out), any_grad(a), [=](Tape& tp, std::size_t, const Tensor& g) {
    Tensor full = Tensor::Zero(r, c);
    for (Eigen::Index i = 0; i < r; ++i) full(i, idx[static_cast<std::size_t>(i)]) = g(i, 0);
    tp.accumulate(ia, full);
  });
  return res;
}

Var logsumexp_rows(const Var& a) {
  Tape& t = a.tape();
  const Tensor& x = a.value();
  const Vector mx = x.rowwise().maxCoeff();
  Tensor out(x.rows(), 1);
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    out(i, 0) = mx[i] + std::log((x.row(i).array() - mx[i]).exp().sum());
  const std::size_t ia = a.id();
  return t.push(std::move(out), any_grad(a), [ia](Tape& tp, std::size_t self, const Tensor& g) {
    const Tensor& xv = tp.value(ia);
    const Tensor& lse = tp.value(self);
    Tensor soft(xv.rows(), xv.cols());
    for (Eigen::Index i = 0; i < xv.rows(); ++i)
      soft.row(i) = (xv.row(i).array() - lse(i, 0)).exp() * g(i, 0);
    tp.accumulate(ia, soft);
  });
}

Var log_softmax(const Var& a) { return sub(a, logsumexp_rows(a)); }

// ---------------------------------------------------------------- grad check

GradCheckReport grad_check(const Objective& f, const std::vector<Tensor>& params, double step,
                           double floor) {
  auto evaluate = [&](const std::vector<Tensor>& values, std::vector<Tensor>* grads) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(values.size());
    for (const auto& v : values) vars.push_back(tape.variable(v));
    Var out = f(tape, vars);
    const double y = out.scalar();
    if (grads != nullptr) {
      tape.backward(out);
      for (const auto& v : vars) grads->push_back(tape.grad(v));
    }
    return y;
  };

  std::vector<Tensor> analytic;
  evaluate(params, &analytic);

  GradCheckReport report;
  std::vector<Tensor> probe = params;
  std::size_t flat = 0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (Eigen::Index i = 0; i < params[p].size(); ++i, ++flat) {
      const double orig = params[p].data()[i];
      probe[p].data()[i] = orig + step;
      const double up = evaluate(probe, nullptr);
      probe[p].data()[i] = orig - step;
      const double down = evaluate(probe, nullptr);
      probe[p].data()[i] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[p].data()[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > report.max_rel_error || !std::isfinite(rel)) {
        report.max_rel_error = std::isfinite(rel) ? rel : std::numeric_limits<double>::infinity();
        report.worst_coordinate = flat;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

GradCheckReport grad_check(ParamStore& store, const StoreObjective& f, double step, double floor,
                           std::size_t stride) {
  std::vector<double> analytic;
  {
    Tape tape(&store);
    analytic = tape.backward(f(tape)).flatten();
  }
  std::vector<double> flat = store.flatten();
  const std::vector<double> original = flat;
  auto evaluate = [&] {
    store.unflatten(flat);
    Tape tape(&store);
    return f(tape).scalar();
  };

  GradCheckReport report;
  for (std::size_t i = 0; i < flat.size(); i += std::max<std::size_t>(stride, 1)) {
    flat[i] = original[i] + step;
    const double up = evaluate();
    flat[i] = original[i] - step;
    const double down = evaluate();
    flat[i] = original[i];
    const double numeric = (up - down) / (2.0 * step);
    const double a = analytic[i];
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
    if (rel > report.max_rel_error || !std::isfinite(rel)) {
      report.max_rel_error = std::isfinite(rel) ? rel : std::numeric_limits<double>::infinity();
      report.worst_coordinate = i;
      report.analytic = a;
      report.numeric = numeric;
    }
  }
  store.unflatten(original);
  return report;
}

}  // namespace vflow::ad
