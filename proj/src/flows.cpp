#include "vflow/flows.hpp"

#include <cmath>
#include <numbers>
#include <random>

namespace vflow {

using ad::Tape;
using ad::Tensor;
using ad::Var;

Activation parse_activation(const std::string& name) {
  if (name == "swish") return Activation::Swish;
  if (name == "tanh") return Activation::Tanh;
  if (name == "softplus") return Activation::Softplus;
  throw Error(Errc::ConfigInvalid, "unknown activation '" + name + "'");
}

std::string activation_name(Activation a) {
  switch (a) {
    case Activation::Swish: return "swish";
    case Activation::Tanh: return "tanh";
    case Activation::Softplus: return "softplus";
  }
  return "swish";
}

Matrix standard_normal(std::size_t n, int d, Rng& rng) {
  std::normal_distribution<double> normal;
  Matrix out(static_cast<Eigen::Index>(n), d);
  for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = normal(rng);
  return out;
}

// ---------------------------------------------------------------- Mlp

Mlp Mlp::create(ad::ParamStore& store, const std::string& prefix, int in,
                const std::vector<int>& hidden, int out, Activation activation, Rng& rng,
                bool zero_output) {
  Mlp m;
  m.activation_ = activation;
  std::vector<int> sizes{in};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(out);
  std::normal_distribution<double> normal;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const int fan_in = sizes[l];
    const int fan_out = sizes[l + 1];
    Tensor w = Tensor::Zero(fan_in, fan_out);
    const bool last = l + 2 == sizes.size();
    if (!(last && zero_output) && fan_in > 0) {
      const double sd = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = sd * normal(rng);
    }
    const std::string name = prefix + ".layer" + std::to_string(l);
    m.layers_.push_back({store.add(name + ".weight", std::move(w)),
                         store.add(name + ".bias", Tensor::Zero(1, fan_out))});
  }
  return m;
}

Mlp Mlp::find(const ad::ParamStore& store, const std::string& prefix, std::size_t layers,
              Activation activation) {
  Mlp m;
  m.activation_ = activation;
  for (std::size_t l = 0; l < layers; ++l) {
    const std::string name = prefix + ".layer" + std::to_string(l);
    m.layers_.push_back({store.find(name + ".weight"), store.find(name + ".bias")});
  }
  return m;
}

Var Mlp::forward(Tape& tape, const Var& x) const {
  Var h = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    h = ad::matmul(h, tape.param(layers_[l].weight)) + tape.param(layers_[l].bias);
    if (l + 1 == layers_.size()) break;
    switch (activation_) {
      case Activation::Swish: h = ad::swish(h); break;
      case Activation::Tanh: h = ad::tanh(h); break;
      case Activation::Softplus: h = ad::softplus(h); break;
    }
  }
  return h;
}

// ---------------------------------------------------------------- coupling

std::pair<IndexVector, IndexVector> coupling_partition(int dim, int index) {
  IndexVector pass, trans;
  for (int d = 0; d < dim; ++d) {
    bool is_pass = false;
    switch (index % 4) {
      case 0: is_pass = d < dim / 2; break;
      case 1: is_pass = d >= dim / 2; break;
      case 2: is_pass = d % 2 == 1; break;
      case 3: is_pass = d % 2 == 0; break;
    }
    (is_pass ? pass : trans).push_back(d);
  }
  if (trans.empty()) std::swap(pass, trans);
  return {pass, trans};
}

namespace {

void init_partition(int dim, int index, IndexVector& pass, IndexVector& trans,
                    IndexVector& order) {
  std::tie(pass, trans) = coupling_partition(dim, index);
  order.assign(static_cast<std::size_t>(dim), 0);
  int pos = 0;
  for (int d : pass) order[static_cast<std::size_t>(d)] = pos++;
  for (int d : trans) order[static_cast<std::size_t>(d)] = pos++;
}

}  // namespace

AffineCoupling AffineCoupling::create(ad::ParamStore& store, const std::string& prefix, int dim,
                                      int cond_dim, int index, const FlowConfig& config,
                                      Rng& rng) {
  AffineCoupling c;
  c.dim_ = dim;
  c.cond_dim_ = cond_dim;
  c.clamp_ = config.log_scale_clamp;
  init_partition(dim, index, c.pass_, c.trans_, c.order_);
  const int in = static_cast<int>(c.pass_.size()) + cond_dim;
  const int out = 2 * static_cast<int>(c.trans_.size());
  c.net_ = Mlp::create(store, prefix + ".net", in, config.hidden, out, config.activation, rng,
                       /*zero_output=*/true);
  return c;
}

AffineCoupling AffineCoupling::find(const ad::ParamStore& store, const std::string& prefix,
                                    int dim, int cond_dim, int index, const FlowConfig& config) {
  AffineCoupling c;
  c.dim_ = dim;
  c.cond_dim_ = cond_dim;
  c.clamp_ = config.log_scale_clamp;
  init_partition(dim, index, c.pass_, c.trans_, c.order_);
  c.net_ = Mlp::find(store, prefix + ".net", config.hidden.size() + 1, config.activation);
  return c;
}

std::pair<Var, Var> AffineCoupling::shift_and_log_scale(Tape& tape, const Var& pass_cols,
                                                        const Var& cond) const {
  Var input = pass_cols;
  if (cond_dim_ > 0) {
    if (!cond.valid() || cond.cols() != cond_dim_ || cond.rows() != pass_cols.rows())
      throw Error(Errc::ShapeMismatch, "coupling block expects a conditioning input");
    input = ad::concat_cols({pass_cols, cond});
  }
  const Var h = net_.forward(tape, input);
  const auto nt = static_cast<Eigen::Index>(trans_.size());
  if (!h.value().allFinite())
    throw Error(Errc::NonFiniteActivation, "coupling network produced non-finite output");
  const Var raw = ad::slice_cols(h, 0, nt);
  const Var shift = ad::slice_cols(h, nt, nt);
  const Var log_scale = clamp_ * ad::tanh(raw / clamp_);
  return {shift, log_scale};
}

Var AffineCoupling::assemble(const Var& pass_cols, const Var& trans_cols) const {
  return ad::take_cols(ad::concat_cols({pass_cols, trans_cols}), order_);
}

std::pair<Var, Var> AffineCoupling::forward(Tape& tape, const Var& x, const Var& cond) const {
  if (x.cols() != dim_) throw Error(Errc::ShapeMismatch, "coupling input dimension");
  const Var xp = ad::take_cols(x, pass_);
  const auto [shift, log_scale] = shift_and_log_scale(tape, xp, cond);
  const Var yt = ad::take_cols(x, trans_) * ad::exp(log_scale) + shift;
  return {assemble(xp, yt), ad::sum_rows(log_scale)};
}

std::pair<Var, Var> AffineCoupling::inverse(Tape& tape, const Var& y, const Var& cond) const {
  if (y.cols() != dim_) throw Error(Errc::ShapeMismatch, "coupling input dimension");
  const Var yp = ad::take_cols(y, pass_);
  const auto [shift, log_scale] = shift_and_log_scale(tape, yp, cond);
  const Var xt = (ad::take_cols(y, trans_) - shift) * ad::exp(-log_scale);
  return {assemble(yp, xt), -ad::sum_rows(log_scale)};
}

// ---------------------------------------------------------------- base

DiagGaussian DiagGaussian::standard(int dim, double stddev, double dof) {
  if (!(dof >= 0.0) || !std::isfinite(dof)) throw Error(Errc::ConfigInvalid, "base degrees of freedom must be finite and >= 0");
  return {Vector::Zero(dim), Vector::Constant(dim, stddev), dof};
}

Var DiagGaussian::log_prob(Tape& tape, const Var& z) const {
  if (z.cols() != dim()) throw Error(Errc::ShapeMismatch, "base dimension mismatch");
  const Var mu = tape.constant(mean.transpose());
  const Var inv_sd = tape.constant(stddev.cwiseInverse().transpose());
  const Var r2 = ad::sum_rows(ad::square((z - mu) * inv_sd));
  const double D = dim();
  if (dof <= 0.0)
    return -0.5 * r2 + (-stddev.array().log().sum() - 0.5 * D * std::log(2.0 * std::numbers::pi));
  const double norm = std::lgamma(0.5 * (dof + D)) - std::lgamma(0.5 * dof) -
                      0.5 * D * std::log(dof * std::numbers::pi) - stddev.array().log().sum();
  return -0.5 * (dof + D) * ad::log(r2 * (1.0 / dof) + 1.0) + norm;
}

Matrix DiagGaussian::sample(std::size_t n, Rng& rng) const {
  Matrix eps = standard_normal(n, dim(), rng);
  std::chi_squared_distribution<double> chi2(dof > 0.0 ? dof : 1.0);
  for (Eigen::Index i = 0; i < eps.rows(); ++i) {
    // A Student-t row is a Gaussian row over an independent sqrt(chi2 / dof).
    if (dof > 0.0) eps.row(i) *= std::sqrt(dof / chi2(rng));
    eps.row(i) = (eps.row(i).array() * stddev.transpose().array() + mean.transpose().array()).matrix();
  }
  return eps;
}

// ---------------------------------------------------------------- stack

FlowStack FlowStack::create(ad::ParamStore& store, const std::string& prefix, int dim,
                            int cond_dim, const FlowConfig& config, DiagGaussian base, Rng& rng) {
  if (base.dim() != dim) throw Error(Errc::ShapeMismatch, "base dimension mismatch");
  FlowStack s;
  s.dim_ = dim;
  s.cond_dim_ = cond_dim;
  s.base_ = std::move(base);
  for (int b = 0; b < config.blocks; ++b)
    s.blocks_.push_back(AffineCoupling::create(store, prefix + ".block" + std::to_string(b), dim,
                                               cond_dim, b, config, rng));
  return s;
}

FlowStack FlowStack::find(const ad::ParamStore& store, const std::string& prefix, int dim,
                          int cond_dim, const FlowConfig& config, DiagGaussian base) {
  FlowStack s;
  s.dim_ = dim;
  s.cond_dim_ = cond_dim;
  s.base_ = std::move(base);
  for (int b = 0; b < config.blocks; ++b)
    s.blocks_.push_back(AffineCoupling::find(store, prefix + ".block" + std::to_string(b), dim,
                                             cond_dim, b, config));
  return s;
}

std::pair<Var, Var> FlowStack::to_base(Tape& tape, const Var& x, const Var& cond) const {
  Var h = x;
  Var logdet = tape.constant(Tensor::Zero(x.rows(), 1));
  for (std::size_t b = blocks_.size(); b-- > 0;) {
    auto [next, ld] = blocks_[b].inverse(tape, h, cond);
    h = next;
    logdet = logdet + ld;
  }
  return {h, logdet};
}

std::pair<Var, Var> FlowStack::from_base(Tape& tape, const Var& z, const Var& cond) const {
  Var h = z;
  Var logdet = tape.constant(Tensor::Zero(z.rows(), 1));
  for (const auto& block : blocks_) {
    auto [next, ld] = block.forward(tape, h, cond);
    h = next;
    logdet = logdet + ld;
  }
  return {h, logdet};
}

Var FlowStack::log_prob(Tape& tape, const Var& x, const Var& cond) const {
  const auto [z, logdet] = to_base(tape, x, cond);
  return base_.log_prob(tape, z) + logdet;
}

Vector FlowStack::log_prob(const ad::ParamStore& store, const Matrix& x, const Matrix* cond) const {
  Vector out(x.rows());
  for (Eigen::Index start = 0; start < x.rows(); start += kEvalChunk) {
    const auto n = std::min(kEvalChunk, x.rows() - start);
    Tape tape(&store);
    const Var xv = tape.constant(x.middleRows(start, n));
    const Var cv = cond != nullptr ? tape.constant(cond->middleRows(start, n)) : Var{};
    out.segment(start, n) = log_prob(tape, xv, cv).value().col(0);
  }
  return out;
}

Matrix FlowStack::sample(const ad::ParamStore& store, std::size_t n, Rng& rng,
                         const Matrix* cond) const {
  const Matrix z = base_.sample(n, rng);
  Matrix out(z.rows(), z.cols());
  for (Eigen::Index start = 0; start < z.rows(); start += kEvalChunk) {
    const auto m = std::min(kEvalChunk, z.rows() - start);
    Tape tape(&store);
    const Var cv = cond != nullptr ? tape.constant(cond->middleRows(start, m)) : Var{};
    out.middleRows(start, m) = from_base(tape, tape.constant(z.middleRows(start, m)), cv).first.value();
  }
  return out;
}

}  // namespace vflow
