#pragma once

#include <string>

#include "vflow/autodiff.hpp"
#include "vflow/cell_map.hpp"
#include "vflow/tessellation.hpp"

namespace vflow {

/// Trainable parameterization of a Tessellation inside a ParamStore:
///   box = center -/+ softplus(raw_halfwidth),  gamma_k = exp(log_scale_k).
struct TessellationParams {
  ad::ParamId anchors;        // K x D
  ad::ParamId box_center;     // 1 x D
  ad::ParamId box_halfwidth;  // 1 x D, pre-softplus
  ad::ParamId log_scale;      // K x 1
  bool freeze_box = false;

  static TessellationParams create(ad::ParamStore& store, const std::string& prefix,
                                   const Tessellation& init, bool freeze_box);
  static TessellationParams find(const ad::ParamStore& store, const std::string& prefix,
                                 bool freeze_box);

  int num_cells(const ad::ParamStore& store) const;
  int dim(const ad::ParamStore& store) const;

  /// Validated plain tessellation from the current parameter values.
  Tessellation materialize(const ad::ParamStore& store) const;

  /// Pulls anchors strictly inside the box (by `margin`) after an update.
  void project(ad::ParamStore& store, double margin) const;
};

/// Tape handles for one tessellation's parameters.
struct TessellationVars {
  ad::Var anchors;  // K x D
  ad::Var box_lo;   // 1 x D
  ad::Var box_hi;   // 1 x D
  ad::Var scales;   // K x 1

  static TessellationVars bind(ad::Tape& tape, const TessellationParams& params);
};

/// Batched result: one row per input point, log-dets as a column.
struct CellMapBatch {
  ad::Var points;  // B x D
  ad::Var logdet;  // B x 1
};

/// Differentiable f_k applied row-wise with cell cells[b] for row b. The
/// binding face of each ray is chosen from `plain` (the same tessellation
/// evaluated without a tape) and then held fixed, so the gradient matches the
/// selected-constraint closed form.
CellMapBatch cell_forward(const TessellationVars& vars, const Tessellation& plain,
                          const ad::Var& x, const IndexVector& cells);

/// Differentiable f_k^{-1}; throws PointOutsideCell / AlphaOutOfRange when a
/// row is not strictly inside its cell.
CellMapBatch cell_inverse(const TessellationVars& vars, const Tessellation& plain,
                          const ad::Var& z, const IndexVector& cells);

/// Nearest-anchor cell for every row of `points`.
IndexVector locate_rows(const Tessellation& tess, const Matrix& points);

}  // namespace vflow
