#include "vflow/voronoi_layer.hpp"

#include <algorithm>
#include <cmath>

namespace vflow {

using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double softplus_inv(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }

}  // namespace

TessellationParams TessellationParams::create(ad::ParamStore& store, const std::string& prefix,
                                              const Tessellation& init, bool freeze_box) {
  const int D = init.dim();
  Tensor center(1, D), half(1, D);
  for (int d = 0; d < D; ++d) {
    center(0, d) = 0.5 * (init.box_lo()[d] + init.box_hi()[d]);
    half(0, d) = softplus_inv(0.5 * (init.box_hi()[d] - init.box_lo()[d]));
  }
  TessellationParams p;
  p.anchors = store.add(prefix + ".anchors", init.anchors());
  p.box_center = store.add(prefix + ".box_center", center);
  p.box_halfwidth = store.add(prefix + ".box_halfwidth", half);
  p.log_scale = store.add(prefix + ".log_scale", init.scales().array().log().matrix());
  p.freeze_box = freeze_box;
  return p;
}

TessellationParams TessellationParams::find(const ad::ParamStore& store, const std::string& prefix,
                                            bool freeze_box) {
  TessellationParams p;
  p.anchors = store.find(prefix + ".anchors");
  p.box_center = store.find(prefix + ".box_center");
  p.box_halfwidth = store.find(prefix + ".box_halfwidth");
  p.log_scale = store.find(prefix + ".log_scale");
  p.freeze_box = freeze_box;
  return p;
}

int TessellationParams::num_cells(const ad::ParamStore& store) const {
  return static_cast<int>(store.value(anchors).rows());
}

int TessellationParams::dim(const ad::ParamStore& store) const {
  return static_cast<int>(store.value(anchors).cols());
}

Tessellation TessellationParams::materialize(const ad::ParamStore& store) const {
  const Tensor& c = store.value(box_center);
  const Tensor& h = store.value(box_halfwidth);
  const int D = dim(store);
  Vector lo(D), hi(D);
  for (int d = 0; d < D; ++d) {
    const double w = softplus(h(0, d));
    lo[d] = c(0, d) - w;
    hi[d] = c(0, d) + w;
  }
  const Tensor& ls = store.value(log_scale);
  return Tessellation(store.value(anchors), lo, hi, ls.col(0).array().exp().matrix());
}

void TessellationParams::project(ad::ParamStore& store, double margin) const {
  const Tensor c = store.value(box_center);
  const Tensor h = store.value(box_halfwidth);
  Tensor& a = store.value(anchors);
  for (Eigen::Index d = 0; d < a.cols(); ++d) {
    const double w = softplus(h(0, d));
    const double m = std::min(margin, 0.25 * w);
    for (Eigen::Index k = 0; k < a.rows(); ++k)
      a(k, d) = std::clamp(a(k, d), c(0, d) - w + m, c(0, d) + w - m);
  }
}

TessellationVars TessellationVars::bind(Tape& tape, const TessellationParams& params) {
  TessellationVars v;
  v.anchors = tape.param(params.anchors);
  Var center = tape.param(params.box_center);
  Var half = tape.param(params.box_halfwidth);
  if (params.freeze_box) {
    center = tape.constant(center.value());
    half = tape.constant(half.value());
  }
  const Var width = ad::softplus(half);
  v.box_lo = center - width;
  v.box_hi = center + width;
  v.scales = ad::exp(tape.param(params.log_scale));
  return v;
}

IndexVector locate_rows(const Tessellation& tess, const Matrix& points) {
  IndexVector out(static_cast<std::size_t>(points.rows()));
  for (Eigen::Index b = 0; b < points.rows(); ++b)
    out[static_cast<std::size_t>(b)] = tess.locate(points.row(b).transpose());
  return out;
}

namespace {

// Per-row choice of binding face, computed from plain values.
struct FaceSelection {
  IndexVector neighbour;  // Voronoi neighbour, or the row's own cell for box faces
  IndexVector axis;       // box axis, 0 for Voronoi faces
  Tensor voronoi_mask;    // B x 1
  Tensor lower_mask;      // B x 1
  Tensor upper_mask;      // B x 1
  Tensor box_normals;     // B x D, +-e_d on box rows
};

FaceSelection select_faces(const Tessellation& plain, const Matrix& directions,
                           const IndexVector& cells) {
  const auto B = directions.rows();
  const auto D = directions.cols();
  FaceSelection s;
  s.neighbour.resize(static_cast<std::size_t>(B));
  s.axis.assign(static_cast<std::size_t>(B), 0);
  s.voronoi_mask = Tensor::Zero(B, 1);
  s.lower_mask = Tensor::Zero(B, 1);
  s.upper_mask = Tensor::Zero(B, 1);
  s.box_normals = Tensor::Zero(B, D);
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto i = static_cast<std::size_t>(b);
    const RayExit exit = ray_exit(plain, cells[i], directions.row(b).transpose());
    switch (exit.active.kind) {
      case ConstraintKind::Voronoi:
        s.neighbour[i] = exit.active.index;
        s.voronoi_mask(b, 0) = 1.0;
        break;
      case ConstraintKind::BoxLower:
        s.neighbour[i] = cells[i];
        s.axis[i] = exit.active.index;
        s.lower_mask(b, 0) = 1.0;
        s.box_normals(b, exit.active.index) = -1.0;
        break;
      case ConstraintKind::BoxUpper:
        s.neighbour[i] = cells[i];
        s.axis[i] = exit.active.index;
        s.upper_mask(b, 0) = 1.0;
        s.box_normals(b, exit.active.index) = 1.0;
        break;
    }
  }
  return s;
}

struct Ray {
  Var lambda;  // B x 1
  Var normal;  // B x D, a_i of the binding face
  Var slope;   // B x 1, a_i^T direction
};

// lambda_i = (b_i - a_i^T x_k) / (a_i^T direction) for the selected face.
Ray exit_along(const TessellationVars& vars, const FaceSelection& s, const Var& xk,
               const Var& direction) {
  Tape& t = xk.tape();
  const Var other = ad::gather_rows(vars.anchors, s.neighbour);
  const Var nd = other - xk;
  const Var vmask = t.constant(s.voronoi_mask);
  const Var xk_axis = ad::pick(xk, s.axis);
  const Var num = vmask * ad::sum_rows(ad::square(nd)) +
                  t.constant(s.upper_mask) * (ad::pick(vars.box_hi, s.axis) - xk_axis) +
                  t.constant(s.lower_mask) * (xk_axis - ad::pick(vars.box_lo, s.axis));
  Ray r;
  r.normal = vmask * (2.0 * nd) + t.constant(s.box_normals);
  r.slope = ad::sum_rows(r.normal * direction);
  r.lambda = num / r.slope;
  return r;
}

// Rank-two log-determinant evaluated row-wise from the radial quantities on
// the R^D side.
Var radial_logdet(const Ray& ray, const Var& direction, const Var& delta, const Var& alpha,
                  const Var& alpha_deriv) {
  const double D = static_cast<double>(direction.cols());
  const Var& lam = ray.lambda;
  const Var c = alpha * lam / delta;
  const Var v1 = -(lam * ray.normal / ray.slope);
  const Var s = ad::sum_rows(v1 * direction);
  const Var dd = ad::sum_rows(direction * direction);
  const Var beta1 = alpha / delta - alpha_deriv / lam;
  const Var beta2 = alpha_deriv - c - beta1 * s;
  const Var w11 = beta1 * s / c;
  const Var w12 = beta2 * s / c;
  const Var w21 = beta1 * dd / c;
  const Var w22 = beta2 * dd / c;
  const Var one_w11 = 1.0 + w11;
  return ad::log(ad::abs(one_w11)) + ad::log(ad::abs(1.0 + w22 - w12 * w21 / one_w11)) +
         D * ad::log(c);
}

void check_batch(const Tessellation& plain, const Var& x, const IndexVector& cells) {
  if (x.cols() != plain.dim()) throw Error(Errc::ShapeMismatch, "batch dimension mismatch");
  if (static_cast<std::size_t>(x.rows()) != cells.size())
    throw Error(Errc::ShapeMismatch, "need one cell index per row");
  if (!x.value().allFinite()) throw Error(Errc::NonFiniteInput, "batch has non-finite entries");
  for (int k : cells) plain.check_index(k);
}

}  // namespace

CellMapBatch cell_forward(const TessellationVars& vars, const Tessellation& plain, const Var& x,
                          const IndexVector& cells) {
  check_batch(plain, x, cells);
  Tape& t = x.tape();
  const auto B = x.rows();
  const auto D = x.cols();

  // Rows at the anchor are evaluated at radius kAnchorEps along a fixed axis.
  Matrix directions(B, D);
  Tensor keep = Tensor::Ones(B, 1);
  Tensor clamp_offset = Tensor::Zero(B, D);
  for (Eigen::Index b = 0; b < B; ++b) {
    const Vector diff = x.value().row(b).transpose() - plain.anchor(cells[static_cast<std::size_t>(b)]);
    const double r = diff.norm();
    if (r <= kAnchorEps) {
      keep(b, 0) = 0.0;
      const Vector dir = r > 0.0 ? Vector(diff / r) : Vector(Vector::Unit(D, 0));
      directions.row(b) = dir.transpose();
      clamp_offset.row(b) = kAnchorEps * dir.transpose();
    } else {
      directions.row(b) = (diff / r).transpose();
    }
  }
  const FaceSelection faces = select_faces(plain, directions, cells);

  const Var xk = ad::gather_rows(vars.anchors, cells);
  const Var keep_v = t.constant(keep);
  const Var diff = (x - xk) * keep_v + t.constant(clamp_offset);
  const Var delta = ad::sqrt(ad::sum_rows(ad::square(diff)));
  const Var direction = diff / delta;
  const Ray ray = exit_along(vars, faces, xk, direction);

  const Var gamma = ad::gather_rows(vars.scales, cells);
  const Var g_rel = gamma * delta / ray.lambda;
  const Var alpha = g_rel / (1.0 + g_rel);
  const Var alpha_deriv = gamma / ad::square(1.0 + g_rel);

  CellMapBatch out;
  out.points = xk + keep_v * (alpha * ray.lambda * direction);
  out.logdet = radial_logdet(ray, direction, delta, alpha, alpha_deriv);
  return out;
}

CellMapBatch cell_inverse(const TessellationVars& vars, const Tessellation& plain, const Var& z,
                          const IndexVector& cells) {
  check_batch(plain, z, cells);
  Tape& t = z.tape();
  const auto B = z.rows();
  const auto D = z.cols();

  Matrix directions(B, D);
  Tensor keep = Tensor::Ones(B, 1);
  std::vector<std::pair<Eigen::Index, Vector>> at_anchor;
  for (Eigen::Index b = 0; b < B; ++b) {
    const int k = cells[static_cast<std::size_t>(b)];
    const Vector diff = z.value().row(b).transpose() - plain.anchor(k);
    const double r = diff.norm();
    const Vector dir = r > 0.0 ? Vector(diff / r) : Vector(Vector::Unit(D, 0));
    directions.row(b) = dir.transpose();
    const RayExit exit = ray_exit(plain, k, dir);
    const double a = r / exit.lambda_star;
    if (a >= 1.0) {
      if (a > 1.0 + 1e-12)
        throw Error(Errc::PointOutsideCell, "row " + std::to_string(b) + " lies outside its cell");
      throw Error(Errc::AlphaOutOfRange, "row " + std::to_string(b) + " lies on its cell boundary");
    }
    if (r <= kAnchorEps) {
      // Place the row where f_k sends radius kAnchorEps so the log-det matches
      // the forward clamp.
      keep(b, 0) = 0.0;
      const double zr =
          squash(kAnchorEps / exit.lambda_star, plain.scales()[k]) * exit.lambda_star;
      at_anchor.emplace_back(b, zr * dir);
    }
  }
  const FaceSelection faces = select_faces(plain, directions, cells);

  Tensor clamp_offset = Tensor::Zero(B, D);
  for (const auto& [b, off] : at_anchor) clamp_offset.row(b) = off.transpose();

  const Var xk = ad::gather_rows(vars.anchors, cells);
  const Var keep_v = t.constant(keep);
  const Var diff = (z - xk) * keep_v + t.constant(clamp_offset);
  const Var radius = ad::sqrt(ad::sum_rows(ad::square(diff)));
  const Var direction = diff / radius;
  const Ray ray = exit_along(vars, faces, xk, direction);

  const Var gamma = ad::gather_rows(vars.scales, cells);
  const Var alpha = radius / ray.lambda;
  const Var one_minus = 1.0 - alpha;
  const Var rel = alpha / (gamma * one_minus);
  const Var delta = rel * ray.lambda;
  const Var alpha_deriv = gamma * ad::square(one_minus);

  CellMapBatch out;
  out.points = xk + keep_v * (delta * direction);
  out.logdet = -radial_logdet(ray, direction, delta, alpha, alpha_deriv);
  return out;
}

}  // namespace vflow
