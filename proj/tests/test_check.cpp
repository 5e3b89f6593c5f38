#include <doctest.h>

#include <cmath>

#include "vflow/check.hpp"

using namespace vflow;

namespace {

// log|det| with the sign of the w11 term flipped.
double flipped_w11(const RankTwoJacobian& J) {
  const double D = static_cast<double>(J.u1.size());
  const double w11 = J.v1.dot(J.u1) / J.c, w12 = J.v1.dot(J.u2) / J.c;
  const double w21 = J.v2.dot(J.u1) / J.c, w22 = J.v2.dot(J.u2) / J.c;
  return std::log(std::abs(1.0 - w11)) + std::log(std::abs(1.0 + w22 - w12 * w21 / (1.0 - w11))) +
         D * std::log(J.c);
}

const CheckResult& find(const std::vector<CheckResult>& rs, const std::string& prefix) {
  for (const auto& r : rs)
    if (r.name.rfind(prefix, 0) == 0) return r;
  FAIL("no check named " << prefix);
  return rs.front();
}

}  // namespace

TEST_CASE("invariant suite passes on a reduced run") {
  CheckOptions o;
  o.seed = 3;
  o.effort = 0.25;
  const auto results = run_checks(o);
  CHECK(results.size() == 12);
  for (const auto& r : results) {
    INFO(r.name << " worst " << r.worst);
    CHECK(r.passed);
  }
  const std::string table = format_checks(results);
  CHECK(table.find("FAIL") == std::string::npos);
  CHECK(table.find("PASS") != std::string::npos);
}

TEST_CASE("a sign flip in the log-det formula is caught") {
  CheckOptions o;
  o.seed = 4;
  o.effort = 0.25;
  o.logdet = flipped_w11;
  const auto results = run_checks(o);
  CHECK_FALSE(find(results, "log-det: rank-two formula vs dense").passed);
  CHECK_FALSE(find(results, "log-det: rank-two formula vs finite").passed);
  CHECK(find(results, "bijection").passed);
  CHECK(format_checks(results).find("FAIL") != std::string::npos);
}

TEST_CASE("property: the second rank-one term of the cell-map Jacobian vanishes") {
  // d lambda*/d direction is homogeneous of degree -1, so v1^T d = -lambda* and
  // the coefficient of d d^T cancels; only c I + u1 v1^T remains.
  Rng rng(5);
  for (int i = 0; i < 500; ++i) {
    const int D = std::uniform_int_distribution<int>(1, 12)(rng);
    const int K = std::uniform_int_distribution<int>(2, 16)(rng);
    const Tessellation t = check::random_tessellation(rng, K, D);
    const int k = std::uniform_int_distribution<int>(0, K - 1)(rng);
    const MapResult r = forward(t, k, check::random_input(rng, t, k));
    const RayExit exit = ray_exit(t, k, r.direction);
    const double rel = r.delta / exit.lambda_star;
    const double g = t.scales()[k];
    const RankTwoJacobian J =
        radial_jacobian(exit, r.direction, r.delta, squash(rel, g), squash_deriv(rel, g));
    CHECK(J.u2.norm() <= 1e-9 * std::max({1.0, J.c, J.u1.norm() * J.v1.norm()}));
  }
}
