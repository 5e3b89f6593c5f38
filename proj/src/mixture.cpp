#include "vflow/mixture.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace vflow {

using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

constexpr double kNudge = 1e-9;

FlowConfig block_config(const MixtureConfig& c, int blocks) {
  return {blocks, c.hidden, c.activation, c.log_scale_clamp};
}

void validate_config(const MixtureConfig& c) {
  if (c.components < 1) throw Error(Errc::ConfigInvalid, "need at least one component");
  if (c.pre_blocks < 0 || c.comp_blocks < 0) throw Error(Errc::ConfigInvalid, "negative depth");
  if (!(c.base_std > 0.0)) throw Error(Errc::ConfigInvalid, "base std must be positive");
  if (!(c.base_dof >= 0.0) || !std::isfinite(c.base_dof))
    throw Error(Errc::ConfigInvalid, "base degrees of freedom must be finite and >= 0");
  if (c.embed_dim < 1) throw Error(Errc::ConfigInvalid, "embedding width must be positive");
  if (!(c.box_pad >= 0.0)) throw Error(Errc::ConfigInvalid, "box padding must be nonnegative");
}

bool inside(const Tessellation& t, int k, const Vector& z) {
  try {
    inverse(t, k, z);
    return true;
  } catch (const Error& e) {
    if (e.code() != Errc::PointOutsideCell && e.code() != Errc::AlphaOutOfRange) throw;
    return false;
  }
}

Matrix subsample(const Matrix& data, std::size_t limit, Rng& rng) {
  const auto n = static_cast<std::size_t>(data.rows());
  if (n <= limit) return data;
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::shuffle(idx.begin(), idx.end(), rng);
  Matrix out(static_cast<Eigen::Index>(limit), data.cols());
  for (std::size_t i = 0; i < limit; ++i)
    out.row(static_cast<Eigen::Index>(i)) = data.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

}  // namespace

Matrix kmeans_pp(const Matrix& points, int k, Rng& rng) {
  if (points.rows() == 0 || k < 1) throw Error(Errc::ConfigInvalid, "k-means++ needs points and k >= 1");
  Matrix seeds(k, points.cols());
  std::uniform_int_distribution<Eigen::Index> any(0, points.rows() - 1);
  seeds.row(0) = points.row(any(rng));
  Vector d2 = (points.rowwise() - seeds.row(0)).rowwise().squaredNorm();
  for (int j = 1; j < k; ++j) {
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total > 0.0) {
      double r = std::uniform_real_distribution<double>(0.0, total)(rng);
      for (pick = 0; pick + 1 < points.rows(); ++pick) {
        r -= d2[pick];
        if (r < 0.0) break;
      }
    } else {
      pick = any(rng);
    }
    seeds.row(j) = points.row(pick);
    d2 = d2.cwiseMin((points.rowwise() - seeds.row(j)).rowwise().squaredNorm());
  }
  return seeds;
}

MixtureModel MixtureModel::create(ad::ParamStore& store, const Matrix& data,
                                  const MixtureConfig& config, Rng& rng) {
  validate_config(config);
  if (data.rows() == 0) throw Error(Errc::ConfigInvalid, "no data to initialize from");
  if (!data.allFinite()) throw Error(Errc::NonFiniteInput, "training data must be finite");
  MixtureModel m;
  m.config_ = config;
  m.dim_ = static_cast<int>(data.cols());
  const int D = m.dim_, K = config.components;
  m.pre_ = FlowStack::create(store, "mixture.pre", D, 0, block_config(config, config.pre_blocks),
                             DiagGaussian::standard(D), rng);

  // The pre-flow starts as the identity, so latent and data coincide here.
  const Vector lo = data.colwise().minCoeff(), hi = data.colwise().maxCoeff();
  const Vector pad = (config.box_pad * (hi - lo)).cwiseMax(0.5);
  const Vector box_lo = lo - pad, box_hi = hi + pad;
  Matrix anchors = kmeans_pp(subsample(data, config.init_subsample, rng), K, rng);
  std::normal_distribution<double> jitter(0.0, 1e-3);
  for (int k = 1; k < K; ++k) {
    for (int j = 0; j < k; ++j) {
      while ((anchors.row(j) - anchors.row(k)).norm() <= 1e-9)
        for (int d = 0; d < D; ++d) anchors(k, d) += jitter(rng) * (box_hi[d] - box_lo[d]);
    }
  }
  m.tess_ = TessellationParams::create(store, "mixture.tess",
                                       Tessellation(anchors, box_lo, box_hi, Vector::Ones(K)),
                                       config.freeze_box);
  m.logits_ = store.add("mixture.logits", Tensor::Zero(1, K));
  std::normal_distribution<double> normal;
  Tensor embed(K, config.embed_dim);
  for (Eigen::Index i = 0; i < embed.size(); ++i) embed.data()[i] = normal(rng);
  m.embed_ = store.add("mixture.embed", embed);
  m.comp_ = FlowStack::create(store, "mixture.comp", D, config.embed_dim,
                              block_config(config, config.comp_blocks),
                              DiagGaussian::standard(D, config.base_std, config.base_dof), rng);
  m.evals_ = std::make_shared<std::vector<std::size_t>>(static_cast<std::size_t>(K), 0);
  return m;
}

MixtureModel MixtureModel::find(const ad::ParamStore& store, int dim, const MixtureConfig& config) {
  validate_config(config);
  MixtureModel m;
  m.config_ = config;
  m.dim_ = dim;
  m.pre_ = FlowStack::find(store, "mixture.pre", dim, 0, block_config(config, config.pre_blocks),
                           DiagGaussian::standard(dim));
  m.tess_ = TessellationParams::find(store, "mixture.tess", config.freeze_box);
  if (m.tess_.num_cells(store) != config.components || m.tess_.dim(store) != dim)
    throw Error(Errc::CheckpointInvalid, "stored tessellation does not match the configuration");
  m.logits_ = store.find("mixture.logits");
  m.embed_ = store.find("mixture.embed");
  m.comp_ = FlowStack::find(store, "mixture.comp", dim, config.embed_dim,
                            block_config(config, config.comp_blocks),
                            DiagGaussian::standard(dim, config.base_std, config.base_dof));
  m.evals_ = std::make_shared<std::vector<std::size_t>>(static_cast<std::size_t>(config.components), 0);
  return m;
}

Vector MixtureModel::log_weights(const ad::ParamStore& store) const {
  const Vector l = store.value(logits_).row(0).transpose();
  const double m = l.maxCoeff();
  return l.array() - (m + std::log((l.array() - m).exp().sum()));
}

std::pair<Matrix, Vector> MixtureModel::to_latent(const ad::ParamStore& store, const Matrix& x) const {
  Matrix z(x.rows(), x.cols());
  Vector ld(x.rows());
  for (Eigen::Index start = 0; start < x.rows(); start += kEvalChunk) {
    const auto n = std::min<Eigen::Index>(kEvalChunk, x.rows() - start);
    Tape tape(&store);
    const auto [zz, l] = pre_.to_base(tape, tape.constant(x.middleRows(start, n)));
    z.middleRows(start, n) = zz.value();
    ld.segment(start, n) = l.value().col(0);
  }
  return {z, ld};
}

Vector MixtureModel::component_log_prob(const ad::ParamStore& store, const Matrix& u, int k) const {
  if (k < 0 || k >= num_components()) throw Error(Errc::IndexOutOfRange, "no such component");
  const Matrix cond = store.value(embed_).row(k).replicate(u.rows(), 1);
  return comp_.log_prob(store, u, &cond);
}

Var MixtureModel::log_prob(Tape& tape, const Var& x, MixtureDiagnostics* diag) const {
  if (tape.params() == nullptr) throw Error(Errc::ShapeMismatch, "tape needs the parameter store");
  if (x.value().cols() != dim_) throw Error(Errc::ShapeMismatch, "input width mismatch");
  if (!x.value().allFinite()) throw Error(Errc::NonFiniteInput, "mixture input must be finite");
  const ad::ParamStore& store = *tape.params();
  const auto B = x.value().rows();

  Var z = x, ld_pre;
  if (pre_.size() > 0) std::tie(z, ld_pre) = pre_.to_base(tape, x);

  // Cell identification and boundary handling on plain values.
  const Tessellation plain = tess_.materialize(store);
  const Matrix& zv = z.value();
  IndexVector rows, cells;
  Tensor offsets(B, dim_);
  for (Eigen::Index b = 0; b < B; ++b) {
    const Vector p = zv.row(b).transpose();
    const int k = plain.locate(p);
    Vector shift = Vector::Zero(dim_);
    if (!inside(plain, k, p)) {
      const Vector toward = plain.anchor(k) - p;
      shift = kNudge * toward / toward.norm();
      if (!inside(plain, k, p + shift)) {
        if (diag) ++diag->rejected;
        continue;
      }
      if (diag) ++diag->nudged;
    }
    offsets.row(static_cast<Eigen::Index>(rows.size())) = shift.transpose();
    rows.push_back(static_cast<int>(b));
    cells.push_back(k);
  }
  const auto m = static_cast<Eigen::Index>(rows.size());
  const double neg_inf = -std::numeric_limits<double>::infinity();
  if (m == 0) return tape.constant(Tensor::Constant(B, 1, neg_inf));

  const bool all = m == B;
  Var zin = all ? z : ad::gather_rows(z, rows);
  if (!offsets.topRows(m).isZero(0.0)) zin = zin + tape.constant(offsets.topRows(m));
  const TessellationVars vars = TessellationVars::bind(tape, tess_);
  const CellMapBatch inv = cell_inverse(vars, plain, zin, cells);
  const Var cond = ad::gather_rows(tape.param(embed_), cells);
  const Var log_w = ad::transpose(ad::take_cols(ad::log_softmax(tape.param(logits_)), cells));
  Var out = comp_.log_prob(tape, inv.points, cond) + inv.logdet + log_w;
  if (pre_.size() > 0) out = out + (all ? ld_pre : ad::gather_rows(ld_pre, rows));
  for (int k : cells) ++(*evals_)[static_cast<std::size_t>(k)];
  if (all) return out;

  // Scatter back; rejected rows point at a trailing -inf entry.
  IndexVector back(static_cast<std::size_t>(B), static_cast<int>(m));
  for (Eigen::Index i = 0; i < m; ++i) back[static_cast<std::size_t>(rows[static_cast<std::size_t>(i)])] = static_cast<int>(i);
  return ad::gather_rows(ad::concat_rows({out, tape.constant(Tensor::Constant(1, 1, neg_inf))}), back);
}

Vector MixtureModel::log_prob(const ad::ParamStore& store, const Matrix& x,
                              MixtureDiagnostics* diag) const {
  Vector out(x.rows());
  for (Eigen::Index start = 0; start < x.rows(); start += kEvalChunk) {
    const auto n = std::min<Eigen::Index>(kEvalChunk, x.rows() - start);
    Tape tape(&store);
    out.segment(start, n) = log_prob(tape, tape.constant(x.middleRows(start, n)), diag).value().col(0);
  }
  return out;
}

Matrix MixtureModel::sample(const ad::ParamStore& store, std::size_t n, Rng& rng,
                            IndexVector* components) const {
  const Vector w = log_weights(store).array().exp();
  std::discrete_distribution<int> pick(w.data(), w.data() + w.size());
  IndexVector ks(n);
  for (auto& k : ks) k = pick(rng);

  const Tessellation plain = tess_.materialize(store);
  Matrix z(static_cast<Eigen::Index>(n), dim_);
  for (int k = 0; k < num_components(); ++k) {
    std::vector<Eigen::Index> mine;
    for (std::size_t i = 0; i < n; ++i)
      if (ks[i] == k) mine.push_back(static_cast<Eigen::Index>(i));
    if (mine.empty()) continue;
    const Matrix cond = store.value(embed_).row(k).replicate(static_cast<Eigen::Index>(mine.size()), 1);
    const Matrix u = comp_.sample(store, mine.size(), rng, &cond);
    for (std::size_t j = 0; j < mine.size(); ++j)
      z.row(mine[j]) = forward(plain, k, u.row(static_cast<Eigen::Index>(j)).transpose()).point.transpose();
  }
  if (components) *components = ks;
  if (pre_.size() == 0) return z;
  Matrix x(z.rows(), z.cols());
  for (Eigen::Index start = 0; start < z.rows(); start += kEvalChunk) {
    const auto c = std::min<Eigen::Index>(kEvalChunk, z.rows() - start);
    Tape tape(&store);
    x.middleRows(start, c) = pre_.from_base(tape, tape.constant(z.middleRows(start, c))).first.value();
  }
  return x;
}

void MixtureModel::project(ad::ParamStore& store) const { tess_.project(store, 1e-3); }

namespace {

Matrix gather(const Matrix& data, const std::vector<std::size_t>& batch) {
  Matrix out(static_cast<Eigen::Index>(batch.size()), data.cols());
  for (std::size_t i = 0; i < batch.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = data.row(static_cast<Eigen::Index>(batch[i]));
  return out;
}

}  // namespace

TrainReport train_mixture(ad::ParamStore& store, const MixtureModel& model, const Matrix& train,
                          const Matrix& val, const TrainConfig& config,
                          const std::function<void(const EpochRecord&)>& on_epoch) {
  Adam adam(store, config.adam);
  TrainHooks hooks;
  hooks.batch_loss = [&](Tape& tape, const std::vector<std::size_t>& batch, Rng&) {
    return -ad::mean(model.log_prob(tape, tape.constant(gather(train, batch))));
  };
  hooks.validate = [&] { return -model.log_prob(store, val).mean(); };
  hooks.after_step = [&](ad::ParamStore& s) { model.project(s); };
  hooks.on_epoch = on_epoch;
  return train_loop(store, adam, static_cast<std::size_t>(train.rows()), config, hooks);
}

TrainReport train_flow(ad::ParamStore& store, const FlowStack& flow, const Matrix& train,
                       const Matrix& val, const TrainConfig& config,
                       const std::function<void(const EpochRecord&)>& on_epoch) {
  Adam adam(store, config.adam);
  TrainHooks hooks;
  hooks.batch_loss = [&](Tape& tape, const std::vector<std::size_t>& batch, Rng&) {
    return -ad::mean(flow.log_prob(tape, tape.constant(gather(train, batch))));
  };
  hooks.validate = [&] { return -flow.log_prob(store, val).mean(); };
  hooks.on_epoch = on_epoch;
  return train_loop(store, adam, static_cast<std::size_t>(train.rows()), config, hooks);
}

}  // namespace vflow
