#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "vflow/autodiff.hpp"

namespace vflow {

using Rng = std::mt19937_64;

enum class Activation { Swish, Tanh, Softplus };

Activation parse_activation(const std::string& name);
std::string activation_name(Activation a);

/// Fully connected network; hidden layers use `activation`, the output layer
/// is linear.
class Mlp {
 public:
  Mlp() = default;
  /// When `zero_output` is set the final layer starts at zero so the network
  /// initially outputs exactly zero.
  static Mlp create(ad::ParamStore& store, const std::string& prefix, int in,
                    const std::vector<int>& hidden, int out, Activation activation, Rng& rng,
                    bool zero_output);
  static Mlp find(const ad::ParamStore& store, const std::string& prefix, std::size_t layers,
                  Activation activation);

  ad::Var forward(ad::Tape& tape, const ad::Var& x) const;

 private:
  struct Layer {
    ad::ParamId weight;  // in x out
    ad::ParamId bias;    // 1 x out
  };
  std::vector<Layer> layers_;
  Activation activation_ = Activation::Swish;
};

struct FlowConfig {
  int blocks = 4;
  std::vector<int> hidden = {128, 128};
  Activation activation = Activation::Swish;
  double log_scale_clamp = 5.0;
};

/// Column partition for block `index`, cycling first half, second half, odd
/// indices, even indices as the pass-through set. Returns {pass, transformed};
/// the transformed set is never empty.
std::pair<IndexVector, IndexVector> coupling_partition(int dim, int index);

/// Affine coupling: pass-through columns are copied, the others become
/// x * exp(s) + t with (s, t) predicted from the pass-through columns and an
/// optional conditioning input. s is bounded to (-c, c) by c * tanh(s / c).
class AffineCoupling {
 public:
  AffineCoupling() = default;
  static AffineCoupling create(ad::ParamStore& store, const std::string& prefix, int dim,
                               int cond_dim, int index, const FlowConfig& config, Rng& rng);
  static AffineCoupling find(const ad::ParamStore& store, const std::string& prefix, int dim,
                             int cond_dim, int index, const FlowConfig& config);

  /// Returns (y, log|det dy/dx|) with log-dets as a B x 1 column.
  std::pair<ad::Var, ad::Var> forward(ad::Tape& tape, const ad::Var& x,
                                      const ad::Var& cond = {}) const;
  std::pair<ad::Var, ad::Var> inverse(ad::Tape& tape, const ad::Var& y,
                                      const ad::Var& cond = {}) const;

  const IndexVector& pass() const { return pass_; }
  const IndexVector& transformed() const { return trans_; }

 private:
  std::pair<ad::Var, ad::Var> shift_and_log_scale(ad::Tape& tape, const ad::Var& pass_cols,
                                                  const ad::Var& cond) const;
  ad::Var assemble(const ad::Var& pass_cols, const ad::Var& trans_cols) const;

  int dim_ = 0;
  int cond_dim_ = 0;
  IndexVector pass_;
  IndexVector trans_;
  IndexVector order_;  // inverse permutation of pass ++ trans
  Mlp net_;
  double clamp_ = 5.0;
};

/// Axis-scaled base: a Gaussian, or a multivariate Student-t with `dof`
/// degrees of freedom when dof > 0.
struct DiagGaussian {
  Vector mean;
  Vector stddev;
  double dof = 0.0;

  static DiagGaussian standard(int dim, double stddev = 1.0, double dof = 0.0);
  int dim() const { return static_cast<int>(mean.size()); }
  /// Row-wise log density, B x 1.
  ad::Var log_prob(ad::Tape& tape, const ad::Var& z) const;
  Matrix sample(std::size_t n, Rng& rng) const;
};

/// Composition of coupling blocks over a diagonal Gaussian base. The
/// generative direction runs base -> data through blocks 0..n-1.
class FlowStack {
 public:
  FlowStack() = default;
  static FlowStack create(ad::ParamStore& store, const std::string& prefix, int dim,
                          int cond_dim, const FlowConfig& config, DiagGaussian base, Rng& rng);
  static FlowStack find(const ad::ParamStore& store, const std::string& prefix, int dim,
                        int cond_dim, const FlowConfig& config, DiagGaussian base);

  int dim() const { return dim_; }
  int cond_dim() const { return cond_dim_; }
  std::size_t size() const { return blocks_.size(); }
  const DiagGaussian& base() const { return base_; }
  const AffineCoupling& block(std::size_t i) const { return blocks_.at(i); }

  /// data -> base with the accumulated log-det of that direction.
  std::pair<ad::Var, ad::Var> to_base(ad::Tape& tape, const ad::Var& x,
                                      const ad::Var& cond = {}) const;
  /// base -> data with the accumulated log-det of that direction.
  std::pair<ad::Var, ad::Var> from_base(ad::Tape& tape, const ad::Var& z,
                                        const ad::Var& cond = {}) const;
  /// log N(to_base(x)) + log-det of the data -> base direction.
  ad::Var log_prob(ad::Tape& tape, const ad::Var& x, const ad::Var& cond = {}) const;

  // Tape-free conveniences; evaluation is chunked to bound memory.
  Vector log_prob(const ad::ParamStore& store, const Matrix& x, const Matrix* cond = nullptr) const;
  Matrix sample(const ad::ParamStore& store, std::size_t n, Rng& rng,
                const Matrix* cond = nullptr) const;

 private:
  int dim_ = 0;
  int cond_dim_ = 0;
  std::vector<AffineCoupling> blocks_;
  DiagGaussian base_;
};

/// Rows per chunk for tape-free evaluation.
inline constexpr Eigen::Index kEvalChunk = 4096;

/// Standard normal draws, row-major n x d.
Matrix standard_normal(std::size_t n, int d, Rng& rng);

}  // namespace vflow
