#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "vflow/cell_map.hpp"
#include "vflow/flows.hpp"
#include "vflow/mixture.hpp"

namespace vflow {

/// Invariant suite on randomized instances. Each check reports the worst
/// observed discrepancy against its tolerance.
struct CheckResult {
  std::string name;
  bool passed = false;
  double worst = 0.0;
  double tolerance = 0.0;
  std::size_t instances = 0;
  double seconds = 0.0;
  std::string detail;
};

/// Closed-form log|det| of a rank-two Jacobian; replaceable so that the
/// suite's sensitivity can itself be tested.
using LogdetFormula = std::function<double(const RankTwoJacobian&)>;

struct CheckOptions {
  std::uint64_t seed = 0;
  /// Multiplies every instance count.
  double effort = 1.0;
  LogdetFormula logdet;  // empty: RankTwoJacobian::logdet
};

namespace check {

/// Random tessellation with an asymmetric box, anchors separated by at least
/// `min_sep` and scales in [e^-1, e].
Tessellation random_tessellation(Rng& rng, int cells, int dim, double min_sep = 1e-2);
/// Point whose offset from anchor k has a random direction and |N(0, sd)| length.
Vector random_input(Rng& rng, const Tessellation& t, int k, double sd = 1.5);
/// lambda* by bisection on the strict membership predicate.
double bisection_exit(const Tessellation& t, int k, const Vector& direction);

CheckResult ray_exit(Rng& rng, std::size_t n, int max_dim = 8, int max_cells = 32,
                     double tol = 1e-8);
CheckResult bijection(Rng& rng, std::size_t n, double tol = 1e-9);
CheckResult logdet_dense(Rng& rng, std::size_t n, int max_dim = 64, double tol = 1e-10,
                         const LogdetFormula& formula = {});
CheckResult logdet_finite_difference(Rng& rng, std::size_t n, int max_dim = 16, double tol = 1e-4,
                                     const LogdetFormula& formula = {});
CheckResult cell_map_gradient(Rng& rng, std::size_t n, double tol = 1e-4);
CheckResult elbo_gradient(Rng& rng, std::size_t n, double tol = 1e-3);
CheckResult mixture_gradient(Rng& rng, std::size_t n, double tol = 1e-3);
CheckResult dequant_support(Rng& rng, std::size_t n);
CheckResult dequant_normalization(Rng& rng, int grid = 400, double tol = 1e-2);
CheckResult mixture_normalization(Rng& rng, int components = 5, int grid = 400, double tol = 1e-2);
CheckResult flow_normalization(Rng& rng, int grid = 400, double tol = 1e-2);
CheckResult mixture_disjoint(Rng& rng, std::size_t n, double tol = 1e-12);

}  // namespace check

/// log sum_k 1[z in V_k] p(z | k) p(k) with membership tested through the
/// cell constraints of every component, not through nearest-anchor lookup.
Vector mixture_log_prob_bruteforce(const ad::ParamStore& store, const MixtureModel& model,
                                   const Matrix& x);

std::vector<CheckResult> run_checks(const CheckOptions& options);

/// Fixed-width pass/fail table.
std::string format_checks(const std::vector<CheckResult>& results);

}  // namespace vflow
