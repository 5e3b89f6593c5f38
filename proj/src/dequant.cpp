#include "vflow/dequant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>

namespace vflow {

using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

std::string var_prefix(int v) { return "dequant.v" + std::to_string(v); }

std::string flow_prefix(const DequantConfig& config, int v, int dim) {
  return config.shared_flow ? "dequant.flow.d" + std::to_string(dim) : var_prefix(v) + ".flow";
}

Tessellation initial_tessellation(int K, int D, const DequantConfig& config, Rng& rng) {
  std::normal_distribution<double> normal(0.0, config.anchor_std);
  const double limit = config.box_half_width * 0.999;
  Matrix anchors(K, D);
  for (int k = 0; k < K; ++k) {
    for (;;) {
      for (int d = 0; d < D; ++d) {
        double a;
        do a = normal(rng);
        while (std::abs(a) >= limit);
        anchors(k, d) = a;
      }
      bool distinct = true;
      for (int j = 0; j < k && distinct; ++j)
        distinct = (anchors.row(j) - anchors.row(k)).norm() > 1e-6;
      if (distinct) break;
    }
  }
  return Tessellation(anchors, Vector::Constant(D, -config.box_half_width),
                      Vector::Constant(D, config.box_half_width), Vector::Ones(K));
}

IndexVector column_codes(const CodeMatrix& codes, int v, int limit) {
  IndexVector out(static_cast<std::size_t>(codes.rows()));
  for (Eigen::Index n = 0; n < codes.rows(); ++n) {
    const int c = codes(n, v);
    if (c < 0 || c >= limit)
      throw Error(Errc::IndexOutOfRange, "code " + std::to_string(c) + " of variable " +
                                             std::to_string(v) + " outside its vocabulary");
    out[static_cast<std::size_t>(n)] = c;
  }
  return out;
}

CodeMatrix gather_codes(const CodeMatrix& codes, Eigen::Index start, Eigen::Index n) {
  return codes.middleRows(start, n);
}

}  // namespace

void DequantModel::build_layout(const std::vector<int>& cardinalities, const DequantConfig& config) {
  if (cardinalities.empty()) throw Error(Errc::ConfigInvalid, "no variables to dequantize");
  if (!config.dims.empty() && config.dims.size() != cardinalities.size())
    throw Error(Errc::ConfigInvalid, "per-variable dims must list every variable");
  if (config.embed_dim < 1) throw Error(Errc::ConfigInvalid, "embedding width must be positive");
  if (!(config.base_dof >= 0.0) || !std::isfinite(config.base_dof))
    throw Error(Errc::ConfigInvalid, "base degrees of freedom must be nonnegative");
  config_ = config;
  cardinalities_ = cardinalities;
  const int max_card = *std::max_element(cardinalities.begin(), cardinalities.end());
  int offset = 0, embed_offset = 0;
  for (std::size_t v = 0; v < cardinalities.size(); ++v) {
    if (cardinalities[v] < 1) throw Error(Errc::ConfigInvalid, "empty vocabulary");
    const int D = config.dims.empty() ? config.dim : config.dims[v];
    if (D < 1) throw Error(Errc::ConfigInvalid, "dimension must be positive");
    cells_.push_back(config.cells_exact ? cardinalities[v] : max_card);
    dims_.push_back(D);
    offsets_.push_back(offset);
    embed_offsets_.push_back(embed_offset);
    offset += D;
    embed_offset += cells_.back();
  }
  total_dim_ = offset;
}

DequantModel DequantModel::create(ad::ParamStore& store, const std::vector<int>& cardinalities,
                                  const DequantConfig& config, Rng& rng) {
  DequantModel m;
  m.build_layout(cardinalities, config);
  std::normal_distribution<double> normal;
  int total_cells = 0;
  for (int v = 0; v < m.num_vars(); ++v) {
    const int K = m.num_cells(v), D = m.dim(v);
    m.tess_.push_back(TessellationParams::create(store, var_prefix(v) + ".tess",
                                                 initial_tessellation(K, D, config, rng),
                                                 config.freeze_box));
    m.base_mean_.push_back(store.add(var_prefix(v) + ".base_mean", Tensor::Zero(K, D)));
    m.base_log_std_.push_back(store.add(var_prefix(v) + ".base_log_std", Tensor::Zero(K, D)));
    total_cells += K;
  }
  Tensor embed(total_cells, config.embed_dim);
  for (Eigen::Index i = 0; i < embed.size(); ++i) embed.data()[i] = normal(rng);
  m.embed_ = store.add("dequant.embed", embed);

  std::map<std::string, int> by_prefix;
  for (int v = 0; v < m.num_vars(); ++v) {
    const std::string prefix = flow_prefix(config, v, m.dim(v));
    auto it = by_prefix.find(prefix);
    if (it == by_prefix.end()) {
      it = by_prefix.emplace(prefix, static_cast<int>(m.flows_.size())).first;
      m.flows_.push_back(FlowStack::create(store, prefix, m.dim(v), config.embed_dim, config.flow,
                                           DiagGaussian::standard(m.dim(v)), rng));
    }
    m.flow_of_.push_back(it->second);
  }
  return m;
}

DequantModel DequantModel::find(const ad::ParamStore& store, const std::vector<int>& cardinalities,
                                const DequantConfig& config) {
  DequantModel m;
  m.build_layout(cardinalities, config);
  for (int v = 0; v < m.num_vars(); ++v) {
    m.tess_.push_back(TessellationParams::find(store, var_prefix(v) + ".tess", config.freeze_box));
    m.base_mean_.push_back(store.find(var_prefix(v) + ".base_mean"));
    m.base_log_std_.push_back(store.find(var_prefix(v) + ".base_log_std"));
    if (m.tess_.back().num_cells(store) != m.num_cells(v) || m.tess_.back().dim(store) != m.dim(v))
      throw Error(Errc::CheckpointInvalid, "stored tessellation does not match the layout");
  }
  m.embed_ = store.find("dequant.embed");
  std::map<std::string, int> by_prefix;
  for (int v = 0; v < m.num_vars(); ++v) {
    const std::string prefix = flow_prefix(config, v, m.dim(v));
    auto it = by_prefix.find(prefix);
    if (it == by_prefix.end()) {
      it = by_prefix.emplace(prefix, static_cast<int>(m.flows_.size())).first;
      m.flows_.push_back(FlowStack::find(store, prefix, m.dim(v), config.embed_dim, config.flow,
                                         DiagGaussian::standard(m.dim(v))));
    }
    m.flow_of_.push_back(it->second);
  }
  return m;
}

std::vector<Tessellation> DequantModel::materialize(const ad::ParamStore& store) const {
  std::vector<Tessellation> out;
  for (const auto& t : tess_) out.push_back(t.materialize(store));
  return out;
}

std::vector<Matrix> DequantModel::draw_noise(std::size_t rows, Rng& rng) const {
  std::vector<Matrix> out;
  const double nu = config_.base_dof;
  for (int v = 0; v < num_vars(); ++v) {
    Matrix e = standard_normal(rows, dim(v), rng);
    if (nu > 0.0) {
      std::chi_squared_distribution<double> chi2(nu);
      for (Eigen::Index r = 0; r < e.rows(); ++r) e.row(r) *= std::sqrt(nu / chi2(rng));
    }
    out.push_back(std::move(e));
  }
  return out;
}

Vector DequantModel::base_log_density(const Matrix& u) const {
  const double D = static_cast<double>(u.cols()), nu = config_.base_dof;
  const Vector r2 = u.rowwise().squaredNorm();
  if (nu <= 0.0) return (-0.5 * r2.array() - 0.5 * D * std::log(2.0 * std::numbers::pi)).matrix();
  const double c = std::lgamma(0.5 * (nu + D)) - std::lgamma(0.5 * nu) - 0.5 * D * std::log(nu * std::numbers::pi);
  return (c - 0.5 * (nu + D) * (r2.array() / nu).log1p()).matrix();
}

DequantModel::Draw DequantModel::dequantize(Tape& tape, const CodeMatrix& codes,
                                            const std::vector<Matrix>& noise) const {
  if (codes.cols() != num_vars()) throw Error(Errc::ShapeMismatch, "one code column per variable");
  if (noise.size() != static_cast<std::size_t>(num_vars()))
    throw Error(Errc::ShapeMismatch, "one noise block per variable");
  if (tape.params() == nullptr) throw Error(Errc::ShapeMismatch, "tape needs the parameter store");
  const ad::ParamStore& store = *tape.params();
  const auto B = codes.rows();
  const Var embed = tape.param(embed_);

  // Base draws and conditioning rows per variable.
  std::vector<IndexVector> cells(static_cast<std::size_t>(num_vars()));
  std::vector<Var> z(cells.size()), cond(cells.size()), logq(cells.size());
  for (int v = 0; v < num_vars(); ++v) {
    const auto vi = static_cast<std::size_t>(v);
    if (noise[vi].rows() != B || noise[vi].cols() != dim(v))
      throw Error(Errc::ShapeMismatch, "noise block has the wrong shape");
    cells[vi] = column_codes(codes, v, cardinalities_[vi]);
    const Var eps = tape.constant(noise[vi]);
    const Var log_std = ad::gather_rows(tape.param(base_log_std_[vi]), cells[vi]);
    z[vi] = ad::gather_rows(tape.param(base_mean_[vi]), cells[vi]) + ad::exp(log_std) * eps;
    logq[vi] = tape.constant(base_log_density(noise[vi])) - ad::sum_rows(log_std);
    IndexVector rows = cells[vi];
    for (int& r : rows) r += embed_offsets_[vi];
    cond[vi] = ad::gather_rows(embed, rows);
  }

  // Conditional flows; variables sharing a flow are stacked into one batch.
  std::vector<Var> moved(cells.size());
  for (std::size_t f = 0; f < flows_.size(); ++f) {
    std::vector<int> members;
    for (int v = 0; v < num_vars(); ++v)
      if (flow_of_[static_cast<std::size_t>(v)] == static_cast<int>(f)) members.push_back(v);
    std::vector<Var> zs, cs;
    for (int v : members) {
      zs.push_back(z[static_cast<std::size_t>(v)]);
      cs.push_back(cond[static_cast<std::size_t>(v)]);
    }
    const auto [out, ld] = flows_[f].from_base(tape, ad::concat_rows(zs), ad::concat_rows(cs));
    for (std::size_t j = 0; j < members.size(); ++j) {
      const auto vi = static_cast<std::size_t>(members[j]);
      const auto start = static_cast<Eigen::Index>(j) * B;
      moved[vi] = ad::slice_rows(out, start, B);
      logq[vi] = logq[vi] - ad::slice_rows(ld, start, B);
    }
  }

  // Cell maps into each value's Voronoi cell.
  std::vector<Var> xs;
  Var total = tape.constant(Tensor::Zero(B, 1));
  for (int v = 0; v < num_vars(); ++v) {
    const auto vi = static_cast<std::size_t>(v);
    const TessellationVars vars = TessellationVars::bind(tape, tess_[vi]);
    const Tessellation plain = tess_[vi].materialize(store);
    const CellMapBatch mapped = cell_forward(vars, plain, moved[vi], cells[vi]);
    xs.push_back(mapped.points);
    total = total + logq[vi] - mapped.logdet;
  }
  return {ad::concat_cols(xs), total};
}

Vector DequantModel::conditional_log_density(const ad::ParamStore& store, int v, int y,
                                             const Matrix& x) const {
  const auto vi = static_cast<std::size_t>(v);
  if (v < 0 || v >= num_vars() || y < 0 || y >= cardinalities_[vi])
    throw Error(Errc::IndexOutOfRange, "no such variable or value");
  if (x.cols() != dim(v)) throw Error(Errc::ShapeMismatch, "point width mismatch");
  const Tessellation t = tess_[vi].materialize(store);
  const double neg_inf = -std::numeric_limits<double>::infinity();
  Vector out = Vector::Constant(x.rows(), neg_inf);
  std::vector<Eigen::Index> rows;
  Matrix pre(x.rows(), dim(v));
  Vector ld_cell(x.rows());
  for (Eigen::Index n = 0; n < x.rows(); ++n) {
    if (t.locate(x.row(n).transpose()) != y) continue;
    try {
      const MapResult r = inverse(t, y, x.row(n).transpose());
      pre.row(static_cast<Eigen::Index>(rows.size())) = r.point.transpose();
      ld_cell[static_cast<Eigen::Index>(rows.size())] = r.logdet;
      rows.push_back(n);
    } catch (const Error& e) {
      if (e.code() != Errc::PointOutsideCell && e.code() != Errc::AlphaOutOfRange) throw;
    }
  }
  const auto m = static_cast<Eigen::Index>(rows.size());
  const Tensor& mean = store.value(base_mean_[vi]);
  const Tensor& log_std = store.value(base_log_std_[vi]);
  const Tensor& embed = store.value(embed_);
  const double log_scale = log_std.row(y).sum();
  for (Eigen::Index start = 0; start < m; start += kEvalChunk) {
    const auto n = std::min<Eigen::Index>(kEvalChunk, m - start);
    Tape tape(&store);
    const Tensor cond = embed.row(embed_offsets_[vi] + y).replicate(n, 1);
    const auto [z, ld] = flows_[static_cast<std::size_t>(flow_of_[vi])].to_base(
        tape, tape.constant(pre.middleRows(start, n)), tape.constant(cond));
    const Matrix u = (z.value().rowwise() - mean.row(y)).array().rowwise() / log_std.row(y).array().exp();
    const Vector base = base_log_density(u);
    for (Eigen::Index i = 0; i < n; ++i)
      out[rows[static_cast<std::size_t>(start + i)]] = base[i] - log_scale + ld.value()(i, 0) + ld_cell[start + i];
  }
  return out;
}

CodeMatrix DequantModel::quantize(const ad::ParamStore& store, const Matrix& x) const {
  if (x.cols() != total_dim_) throw Error(Errc::ShapeMismatch, "dequantized width mismatch");
  CodeMatrix out(x.rows(), num_vars());
  for (int v = 0; v < num_vars(); ++v) {
    const Tessellation t = tess_[static_cast<std::size_t>(v)].materialize(store);
    for (Eigen::Index n = 0; n < x.rows(); ++n)
      out(n, v) = t.locate(x.row(n).segment(offset(v), dim(v)).transpose());
  }
  return out;
}

void DequantModel::project(ad::ParamStore& store) const {
  for (const auto& t : tess_) t.project(store, 1e-3);
}

// ---------------------------------------------------------------- density

JointDensity JointDensity::create(ad::ParamStore& store, int dim, const FlowConfig& config,
                                  Rng& rng) {
  JointDensity d;
  d.flow_ = FlowStack::create(store, "density", dim, 0, config, DiagGaussian::standard(dim), rng);
  return d;
}

JointDensity JointDensity::find(const ad::ParamStore& store, int dim, const FlowConfig& config) {
  JointDensity d;
  d.flow_ = FlowStack::find(store, "density", dim, 0, config, DiagGaussian::standard(dim));
  return d;
}

// ---------------------------------------------------------------- objectives

Var elbo_terms(Tape& tape, const DequantModel& model, const JointDensity& density,
               const CodeMatrix& codes, const std::vector<Matrix>& noise) {
  const DequantModel::Draw d = model.dequantize(tape, codes, noise);
  return density.log_prob(tape, d.x) - d.logq;
}

namespace {

// N x S matrix of single-draw ELBO terms.
Matrix elbo_draws(const ad::ParamStore& store, const DequantModel& model,
                  const JointDensity& density, const CodeMatrix& codes, int samples, Rng& rng) {
  if (samples < 1) throw Error(Errc::ConfigInvalid, "need at least one sample");
  const Eigen::Index chunk = std::max<Eigen::Index>(1, kEvalChunk / model.num_vars());
  Matrix out(codes.rows(), samples);
  for (int s = 0; s < samples; ++s) {
    for (Eigen::Index start = 0; start < codes.rows(); start += chunk) {
      const auto n = std::min(chunk, codes.rows() - start);
      const CodeMatrix part = gather_codes(codes, start, n);
      Tape tape(&store);
      const auto noise = model.draw_noise(static_cast<std::size_t>(n), rng);
      out.block(start, s, n, 1) = elbo_terms(tape, model, density, part, noise).value();
    }
  }
  return out;
}

}  // namespace

Vector elbo(const ad::ParamStore& store, const DequantModel& model, const JointDensity& density,
            const CodeMatrix& codes, int samples, Rng& rng) {
  return elbo_draws(store, model, density, codes, samples, rng).rowwise().mean();
}

Vector log_evidence(const ad::ParamStore& store, const DequantModel& model,
                    const JointDensity& density, const CodeMatrix& codes, int samples, Rng& rng) {
  const Matrix w = elbo_draws(store, model, density, codes, samples, rng);
  Vector out(w.rows());
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    const double m = w.row(i).maxCoeff();
    out[i] = m + std::log((w.row(i).array() - m).exp().mean());
  }
  return out;
}

double nll_bound(const ad::ParamStore& store, const DequantModel& model,
                 const JointDensity& density, const CodeMatrix& codes, int samples, Rng& rng) {
  return -elbo(store, model, density, codes, samples, rng).mean();
}

TrainReport train_dequant(ad::ParamStore& store, const DequantModel& model,
                          const JointDensity& density, const CodeMatrix& train,
                          const CodeMatrix& val, const TrainConfig& config,
                          const std::function<void(const EpochRecord&)>& on_epoch) {
  Adam adam(store, config.adam);
  TrainHooks hooks;
  hooks.batch_loss = [&](Tape& tape, const std::vector<std::size_t>& batch, Rng& rng) {
    CodeMatrix codes(static_cast<Eigen::Index>(batch.size()), train.cols());
    for (std::size_t i = 0; i < batch.size(); ++i)
      codes.row(static_cast<Eigen::Index>(i)) = train.row(static_cast<Eigen::Index>(batch[i]));
    const auto noise = model.draw_noise(batch.size(), rng);
    return -ad::mean(elbo_terms(tape, model, density, codes, noise));
  };
  hooks.validate = [&] {
    // Fixed evaluation noise so successive epochs are compared on equal terms.
    Rng rng(config.seed ^ 0x5eed5eedULL);
    return nll_bound(store, model, density, val, config.eval_samples, rng);
  };
  hooks.after_step = [&](ad::ParamStore& s) { model.project(s); };
  hooks.on_epoch = on_epoch;
  return train_loop(store, adam, static_cast<std::size_t>(train.rows()), config, hooks);
}

}  // namespace vflow
