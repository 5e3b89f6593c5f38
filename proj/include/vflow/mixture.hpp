#pragma once

#include <memory>
#include <vector>

#include "vflow/flows.hpp"
#include "vflow/optim.hpp"
#include "vflow/voronoi_layer.hpp"

namespace vflow {

struct MixtureConfig {
  int components = 8;
  int pre_blocks = 0;
  int comp_blocks = 4;
  std::vector<int> hidden{64, 64, 64};
  Activation activation = Activation::Swish;
  double log_scale_clamp = 5.0;
  double base_std = 0.2;
  /// Component base is Student-t with this many degrees of freedom; 0 keeps
  /// it Gaussian. Heavy tails keep density positive up to cell boundaries.
  double base_dof = 0.0;
  int embed_dim = 8;
  bool freeze_box = true;
  /// Box = data bounding box grown by this fraction of its extent per side
  /// (at least 0.5 in absolute terms).
  double box_pad = 0.5;
  std::size_t init_subsample = 2000;
};

/// Rows of a likelihood evaluation that could not be scored.
struct MixtureDiagnostics {
  std::size_t nudged = 0;    // boundary rows moved 1e-9 toward their anchor
  std::size_t rejected = 0;  // rows outside every cell (scored -inf)
};

/// Disjoint mixture: z = pre(x), k = nearest anchor of z, u = f_k^{-1}(z),
/// log p(x) = log p(u | k) + log|det df_k^{-1}| + log p(k) + log|det dpre|.
class MixtureModel {
 public:
  MixtureModel() = default;
  /// Anchors are seeded by k-means++ on (a subsample of) `data`.
  static MixtureModel create(ad::ParamStore& store, const Matrix& data, const MixtureConfig& config,
                             Rng& rng);
  static MixtureModel find(const ad::ParamStore& store, int dim, const MixtureConfig& config);

  int dim() const { return dim_; }
  int num_components() const { return config_.components; }
  const MixtureConfig& config() const { return config_; }
  const TessellationParams& tessellation() const { return tess_; }
  const FlowStack& pre_flow() const { return pre_; }
  const FlowStack& comp_flow() const { return comp_; }

  Vector log_weights(const ad::ParamStore& store) const;
  /// Latent z = pre(x) and log|det dz/dx|.
  std::pair<Matrix, Vector> to_latent(const ad::ParamStore& store, const Matrix& x) const;
  /// Component density log p(u | k) of base-side points u.
  Vector component_log_prob(const ad::ParamStore& store, const Matrix& u, int k) const;

  /// B x 1 log-likelihood on the tape. Rows outside every cell yield -inf.
  ad::Var log_prob(ad::Tape& tape, const ad::Var& x, MixtureDiagnostics* diag = nullptr) const;
  Vector log_prob(const ad::ParamStore& store, const Matrix& x,
                  MixtureDiagnostics* diag = nullptr) const;

  /// Ancestral sampling; `components`, when given, receives each row's k.
  Matrix sample(const ad::ParamStore& store, std::size_t n, Rng& rng,
                IndexVector* components = nullptr) const;

  void project(ad::ParamStore& store) const;

  /// Rows handed to the component flow for each k since the last reset.
  std::vector<std::size_t> component_evaluations() const { return *evals_; }
  void reset_counters() const { std::fill(evals_->begin(), evals_->end(), std::size_t{0}); }

 private:
  MixtureConfig config_;
  int dim_ = 0;
  FlowStack pre_;
  TessellationParams tess_;
  ad::ParamId logits_;
  ad::ParamId embed_;
  FlowStack comp_;
  std::shared_ptr<std::vector<std::size_t>> evals_;
};

/// Up to `k` well-spread seeds (k-means++ D^2 sampling); rows of `points`.
Matrix kmeans_pp(const Matrix& points, int k, Rng& rng);

TrainReport train_mixture(ad::ParamStore& store, const MixtureModel& model, const Matrix& train,
                          const Matrix& val, const TrainConfig& config,
                          const std::function<void(const EpochRecord&)>& on_epoch = {});

/// Plain coupling-flow baseline trained on the same objective.
TrainReport train_flow(ad::ParamStore& store, const FlowStack& flow, const Matrix& train,
                       const Matrix& val, const TrainConfig& config,
                       const std::function<void(const EpochRecord&)>& on_epoch = {});

}  // namespace vflow
