#pragma once

#include <vector>

#include "vflow/error.hpp"
#include "vflow/linalg.hpp"

namespace vflow {

enum class ConstraintKind { Voronoi, BoxLower, BoxUpper };

/// Identifies one face of a cell: the neighbouring anchor for Voronoi faces,
/// the coordinate axis for box faces.
struct ConstraintId {
  ConstraintKind kind = ConstraintKind::Voronoi;
  int index = 0;

  friend bool operator==(const ConstraintId&, const ConstraintId&) = default;
};

/// Open half-space {x : normal^T x < offset}.
struct HalfSpace {
  Vector normal;
  double offset = 0.0;
  ConstraintId id;
};

/// Anchors closer than this are rejected as degenerate.
inline constexpr double kMinAnchorSeparation = 1e-9;

/// A box-bounded Voronoi tessellation. Cell k is the set of points inside the
/// box whose nearest anchor is anchors.row(k); cells are open sets.
class Tessellation {
 public:
  /// Validates shapes, finiteness, anchor separation, strict containment in
  /// the box and positivity of the squash scales.
  Tessellation(Matrix anchors, Vector box_lo, Vector box_hi, Vector scales);

  int num_cells() const { return static_cast<int>(anchors_.rows()); }
  int dim() const { return static_cast<int>(anchors_.cols()); }

  const Matrix& anchors() const { return anchors_; }
  Eigen::Ref<const Vector> anchor(int k) const;
  const Vector& box_lo() const { return box_lo_; }
  const Vector& box_hi() const { return box_hi_; }
  const Vector& scales() const { return scales_; }

  /// (K-1) Voronoi faces in increasing neighbour order, then D lower box
  /// faces, then D upper box faces.
  std::vector<HalfSpace> cell_constraints(int k) const;

  /// Nearest anchor; ties go to the smallest index.
  int locate(Eigen::Ref<const Vector> x) const;

  /// Strict membership in the open cell k.
  bool contains(int k, Eigen::Ref<const Vector> x) const;

  void check_index(int k) const;

 private:
  Matrix anchors_;
  Vector box_lo_;
  Vector box_hi_;
  Vector scales_;
};

Tessellation new_tessellation(Matrix anchors, Vector box_lo, Vector box_hi, Vector scales);

}  // namespace vflow
