#include "vflow/tessellation.hpp"

#include <cmath>
#include <string>

namespace vflow {

Tessellation::Tessellation(Matrix anchors, Vector box_lo, Vector box_hi, Vector scales)
    : anchors_(std::move(anchors)),
      box_lo_(std::move(box_lo)),
      box_hi_(std::move(box_hi)),
      scales_(std::move(scales)) {
  const auto K = anchors_.rows();
  const auto D = anchors_.cols();
  if (K < 1 || D < 1) throw Error(Errc::ShapeMismatch, "need at least one anchor and one dimension");
  if (box_lo_.size() != D || box_hi_.size() != D)
    throw Error(Errc::ShapeMismatch, "box bounds must have one entry per dimension");
  if (scales_.size() != K) throw Error(Errc::ShapeMismatch, "need one scale per anchor");
  if (!anchors_.allFinite() || !box_lo_.allFinite() || !box_hi_.allFinite() || !scales_.allFinite())
    throw Error(Errc::NonFiniteInput, "tessellation parameters must be finite");

  for (Eigen::Index k = 0; k < K; ++k) {
    if (!(scales_[k] > 0.0))
      throw Error(Errc::NonPositiveScale, "scale " + std::to_string(k) + " is not positive");
    for (Eigen::Index d = 0; d < D; ++d) {
      const double v = anchors_(k, d);
      if (!(box_lo_[d] < v && v < box_hi_[d]))
        throw Error(Errc::AnchorOutsideBox,
                    "anchor " + std::to_string(k) + " is not strictly inside the box");
    }
  }
  for (Eigen::Index i = 0; i < K; ++i)
    for (Eigen::Index j = i + 1; j < K; ++j)
      if ((anchors_.row(i) - anchors_.row(j)).norm() <= kMinAnchorSeparation)
        throw Error(Errc::DuplicateAnchors,
                    "anchors " + std::to_string(i) + " and " + std::to_string(j) + " coincide");
}

Eigen::Ref<const Vector> Tessellation::anchor(int k) const {
  check_index(k);
  return anchors_.row(k).transpose();
}

void Tessellation::check_index(int k) const {
  if (k < 0 || k >= num_cells())
    throw Error(Errc::IndexOutOfRange, "cell index " + std::to_string(k) + " out of range");
}

std::vector<HalfSpace> Tessellation::cell_constraints(int k) const {
  check_index(k);
  const int K = num_cells();
  const int D = dim();
  std::vector<HalfSpace> out;
  out.reserve(static_cast<std::size_t>(K - 1 + 2 * D));
  const Vector xk = anchors_.row(k).transpose();
  for (int i = 0; i < K; ++i) {
    if (i == k) continue;
    const Vector xi = anchors_.row(i).transpose();
    out.push_back({2.0 * (xi - xk), xi.squaredNorm() - xk.squaredNorm(),
                   {ConstraintKind::Voronoi, i}});
  }
  for (int d = 0; d < D; ++d)
    out.push_back({-Vector::Unit(D, d), -box_lo_[d], {ConstraintKind::BoxLower, d}});
  for (int d = 0; d < D; ++d)
    out.push_back({Vector::Unit(D, d), box_hi_[d], {ConstraintKind::BoxUpper, d}});
  return out;
}

int Tessellation::locate(Eigen::Ref<const Vector> x) const {
  if (x.size() != dim()) throw Error(Errc::ShapeMismatch, "point dimension mismatch");
  int best = 0;
  double best_d2 = (anchors_.row(0).transpose() - x).squaredNorm();
  for (int k = 1; k < num_cells(); ++k) {
    const double d2 = (anchors_.row(k).transpose() - x).squaredNorm();
    if (d2 < best_d2) {
      best_d2 = d2;
      best = k;
    }
  }
  return best;
}

bool Tessellation::contains(int k, Eigen::Ref<const Vector> x) const {
  check_index(k);
  if (x.size() != dim()) throw Error(Errc::ShapeMismatch, "point dimension mismatch");
  // Same half-spaces as cell_constraints(k), evaluated without allocating.
  const auto xk = anchors_.row(k);
  const double xk2 = xk.squaredNorm();
  for (int i = 0; i < num_cells(); ++i) {
    if (i == k) continue;
    const auto xi = anchors_.row(i);
    if (!(2.0 * (xi - xk).dot(x.transpose()) < xi.squaredNorm() - xk2)) return false;
  }
  for (int d = 0; d < dim(); ++d)
    if (!(-x[d] < -box_lo_[d]) || !(x[d] < box_hi_[d])) return false;
  return true;
}

Tessellation new_tessellation(Matrix anchors, Vector box_lo, Vector box_hi, Vector scales) {
  return Tessellation(std::move(anchors), std::move(box_lo), std::move(box_hi), std::move(scales));
}

}  // namespace vflow
