#pragma once

#include <random>
#include <string>
#include <vector>

#include "vflow/data.hpp"
#include "vflow/flows.hpp"
#include "vflow/optim.hpp"
#include "vflow/voronoi_layer.hpp"

namespace vflow {

struct DequantConfig {
  /// Embedding dimension used for every variable without an override.
  int dim = 4;
  /// Optional per-variable embedding dimensions (empty: all `dim`).
  std::vector<int> dims;
  /// Width of the (variable, value) conditioning embedding.
  int embed_dim = 8;
  /// One conditional flow per distinct dimension shared by all variables of
  /// that dimension, or one flow per variable.
  bool shared_flow = true;
  /// Cells per variable: the variable's cardinality, or the largest
  /// cardinality over all variables.
  bool cells_exact = true;
  FlowConfig flow{4, {128, 128}, Activation::Swish, 5.0};
  /// Degrees of freedom of a multivariate Student-t base q(z | y); 0 keeps
  /// the Gaussian. With nu = 1 the radial tail ~ r^-2 survives the softsign
  /// squash as a density that stays positive up to the cell boundary.
  double base_dof = 0.0;
  bool freeze_box = false;
  double anchor_std = 0.5;
  double box_half_width = 4.0;
};

/// Voronoi dequantizer q(x | y): per variable, z ~ N(mu_y, sigma_y), a
/// conditional coupling flow, then the cell map f_y of that variable's
/// tessellation. Value j of a variable always owns cell j.
class DequantModel {
 public:
  DequantModel() = default;
  static DequantModel create(ad::ParamStore& store, const std::vector<int>& cardinalities,
                             const DequantConfig& config, Rng& rng);
  /// Rebinds a model whose parameters already live in `store`.
  static DequantModel find(const ad::ParamStore& store, const std::vector<int>& cardinalities,
                           const DequantConfig& config);

  int num_vars() const { return static_cast<int>(cardinalities_.size()); }
  int total_dim() const { return total_dim_; }
  int dim(int v) const { return dims_.at(static_cast<std::size_t>(v)); }
  int offset(int v) const { return offsets_.at(static_cast<std::size_t>(v)); }
  int num_cells(int v) const { return cells_.at(static_cast<std::size_t>(v)); }
  const std::vector<int>& cardinalities() const { return cardinalities_; }
  const TessellationParams& tessellation(int v) const { return tess_.at(static_cast<std::size_t>(v)); }
  const DequantConfig& config() const { return config_; }

  std::vector<Tessellation> materialize(const ad::ParamStore& store) const;

  /// Standardized base noise (normal, or Student-t when base_dof > 0), one
  /// B x D_v block per variable.
  std::vector<Matrix> draw_noise(std::size_t rows, Rng& rng) const;

  struct Draw {
    ad::Var x;     // B x total_dim
    ad::Var logq;  // B x 1
  };
  /// Reparameterized draw x ~ q(x | y) from fixed noise, with log q(x | y).
  Draw dequantize(ad::Tape& tape, const CodeMatrix& codes, const std::vector<Matrix>& noise) const;

  /// Log density of standardized base noise rows (before mean and scale).
  Vector base_log_density(const Matrix& u) const;

  /// log q(x_v | y_v = y) at rows of `x` (points in R^{D_v}); -inf outside
  /// cell y and on its boundary.
  Vector conditional_log_density(const ad::ParamStore& store, int v, int y, const Matrix& x) const;

  /// Nearest-anchor code of every variable block.
  CodeMatrix quantize(const ad::ParamStore& store, const Matrix& x) const;

  /// Keeps anchors strictly inside their boxes.
  void project(ad::ParamStore& store) const;

 private:
  void build_layout(const std::vector<int>& cardinalities, const DequantConfig& config);

  DequantConfig config_;
  std::vector<int> cardinalities_;
  std::vector<int> cells_;
  std::vector<int> dims_;
  std::vector<int> offsets_;
  std::vector<int> embed_offsets_;
  int total_dim_ = 0;
  std::vector<TessellationParams> tess_;
  std::vector<ad::ParamId> base_mean_;
  std::vector<ad::ParamId> base_log_std_;
  ad::ParamId embed_;
  std::vector<FlowStack> flows_;  // indexed by flow_of_
  std::vector<int> flow_of_;      // variable -> flow
};

/// Flow density p(x) over the concatenated dequantization spaces.
class JointDensity {
 public:
  JointDensity() = default;
  static JointDensity create(ad::ParamStore& store, int dim, const FlowConfig& config, Rng& rng);
  static JointDensity find(const ad::ParamStore& store, int dim, const FlowConfig& config);

  int dim() const { return flow_.dim(); }
  const FlowStack& flow() const { return flow_; }
  ad::Var log_prob(ad::Tape& tape, const ad::Var& x) const { return flow_.log_prob(tape, x); }
  Matrix sample(const ad::ParamStore& store, std::size_t n, Rng& rng) const {
    return flow_.sample(store, n, rng);
  }

 private:
  FlowStack flow_;
};

/// log p(x) - log q(x | y) for one reparameterized draw per row, B x 1.
ad::Var elbo_terms(ad::Tape& tape, const DequantModel& model, const JointDensity& density,
                   const CodeMatrix& codes, const std::vector<Matrix>& noise);

/// Per-example ELBO averaged over `samples` draws.
Vector elbo(const ad::ParamStore& store, const DequantModel& model, const JointDensity& density,
            const CodeMatrix& codes, int samples, Rng& rng);

/// Per-example importance-sampled log-evidence, log mean_s exp(log p - log q).
Vector log_evidence(const ad::ParamStore& store, const DequantModel& model,
                    const JointDensity& density, const CodeMatrix& codes, int samples, Rng& rng);

/// Mean negative ELBO in nats.
double nll_bound(const ad::ParamStore& store, const DequantModel& model,
                 const JointDensity& density, const CodeMatrix& codes, int samples, Rng& rng);

/// Joint maximum-ELBO training of dequantizer and density; one draw per
/// example per step, early stopping on the validation bound.
TrainReport train_dequant(ad::ParamStore& store, const DequantModel& model,
                          const JointDensity& density, const CodeMatrix& train,
                          const CodeMatrix& val, const TrainConfig& config,
                          const std::function<void(const EpochRecord&)>& on_epoch = {});

}  // namespace vflow
