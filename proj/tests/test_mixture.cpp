#include <doctest.h>

#include <chrono>
#include <cmath>

#include "vflow/check.hpp"
#include "support.hpp"
#include "vflow/data.hpp"
#include "vflow/mixture.hpp"

using namespace vflow;
using ad::Tape;
using ad::Tensor;
using testing::error_code;

namespace {

MixtureConfig small_config(int K, int pre_blocks = 0, int comp_blocks = 2) {
  MixtureConfig c;
  c.components = K;
  c.pre_blocks = pre_blocks;
  c.comp_blocks = comp_blocks;
  c.hidden = {16, 16};
  c.embed_dim = 4;
  return c;
}

void randomize(ad::ParamStore& store, Rng& rng, double sd = 0.2) {
  std::normal_distribution<double> normal;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const std::string& name = store.name(ad::ParamId{i});
    if (name.find(".tess.") != std::string::npos) continue;
    const double s = name == "mixture.logits" ? 2.5 * sd : sd;
    Tensor& t = store.value(ad::ParamId{i});
    for (Eigen::Index j = 0; j < t.size(); ++j) t.data()[j] += s * normal(rng);
  }
}

struct Fixture {
  ad::ParamStore store;
  MixtureModel model;
};

Fixture make(const MixtureConfig& c, std::uint64_t seed, int dim = 2, bool perturb = true) {
  Fixture f;
  Rng rng(seed);
  const Matrix data = standard_normal(500, static_cast<std::size_t>(dim), rng);
  f.model = MixtureModel::create(f.store, data, c, rng);
  if (perturb) randomize(f.store, rng);
  return f;
}

Matrix grid_points(const Vector& lo, const Vector& hi, int grid, double& cell_area) {
  const double hx = (hi[0] - lo[0]) / grid, hy = (hi[1] - lo[1]) / grid;
  cell_area = hx * hy;
  Matrix pts(grid * grid, 2);
  for (int i = 0; i < grid; ++i)
    for (int j = 0; j < grid; ++j) pts.row(i * grid + j) << lo[0] + (i + 0.5) * hx, lo[1] + (j + 0.5) * hy;
  return pts;
}

}  // namespace

TEST_CASE("mixture weights are a distribution") {
  Fixture f = make(small_config(6), 1);
  const Vector w = f.model.log_weights(f.store).array().exp();
  CHECK(std::abs(w.sum() - 1.0) <= 1e-12);
  CHECK((w.array() > 0).all());
}

TEST_CASE("single component reduces to the component density") {
  Fixture f = make(small_config(1), 2);
  Rng rng(3);
  const Tessellation t = f.model.tessellation().materialize(f.store);
  Matrix x(20, 2);
  for (int i = 0; i < 20; ++i) x.row(i) = testing::random_in_box(rng, t).transpose();
  const Vector lp = f.model.log_prob(f.store, x);
  for (int i = 0; i < 20; ++i) {
    const MapResult r = inverse(t, 0, x.row(i).transpose());
    const double expect = f.model.component_log_prob(f.store, r.point.transpose(), 0)[0] + r.logdet;
    CHECK(lp[i] == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("mixture density integrates to one over the box, K=5") {
  Fixture f = make(small_config(5), 4);
  const Tessellation t = f.model.tessellation().materialize(f.store);
  double area = 0.0;
  const Matrix pts = grid_points(t.box_lo(), t.box_hi(), 400, area);
  const Vector lp = f.model.log_prob(f.store, pts);
  CHECK(lp.array().exp().sum() * area == doctest::Approx(1.0).epsilon(1e-2));
}

TEST_CASE("Student-t components keep the mixture normalized and positive at cell boundaries") {
  MixtureConfig c = small_config(4);
  c.base_dof = 1.0;
  Fixture f = make(c, 24);
  const Tessellation t = f.model.tessellation().materialize(f.store);
  double area = 0.0;
  const Matrix pts = grid_points(t.box_lo(), t.box_hi(), 400, area);
  const Vector lp = f.model.log_prob(f.store, pts);
  CHECK(lp.array().exp().sum() * area == doctest::Approx(1.0).epsilon(1e-2));
  // The heavy radial tail survives the squash; a Gaussian base reaches
  // log-densities near -1e18 on this grid.
  CHECK(lp.minCoeff() > -100.0);
}

TEST_CASE("property: Voronoi evaluation equals the brute-force sum over components") {
  Rng rng(5);
  for (int trial = 0; trial < 6; ++trial) {
    const int K = testing::uniform_int(rng, 2, 12), D = testing::uniform_int(rng, 1, 4);
    Fixture f = make(small_config(K, trial % 3, 2), rng(), D);
    const Tessellation t = f.model.tessellation().materialize(f.store);
    Matrix x(400, D);
    for (int i = 0; i < 400; ++i) x.row(i) = testing::random_in_box(rng, t).transpose();
    // With a pre-flow some latents may leave the box; both sides must then agree on -inf.
    const Vector lp = f.model.log_prob(f.store, x);
    const Vector ref = mixture_log_prob_bruteforce(f.store, f.model, x);
    for (int i = 0; i < 400; ++i) {
      if (std::isinf(ref[i])) {
        CHECK(std::isinf(lp[i]));
        continue;
      }
      CHECK(std::abs(lp[i] - ref[i]) <= 1e-12 * std::max(1.0, std::abs(ref[i])));
    }
  }
}

TEST_CASE("each likelihood row touches exactly one component") {
  Fixture f = make(small_config(7), 6);
  Rng rng(7);
  const Tessellation t = f.model.tessellation().materialize(f.store);
  Matrix x(3000, 2);
  for (int i = 0; i < 3000; ++i) x.row(i) = testing::random_in_box(rng, t).transpose();
  f.model.reset_counters();
  f.model.log_prob(f.store, x);
  const auto evals = f.model.component_evaluations();
  std::vector<std::size_t> expect(7, 0);
  for (int k : locate_rows(t, x)) ++expect[static_cast<std::size_t>(k)];
  CHECK(evals == expect);
}

TEST_CASE("sampling") {
  Fixture f = make(small_config(4, 1), 8);
  Rng rng(9);
  const std::size_t n = 100000;
  IndexVector ks;
  const Matrix x = f.model.sample(f.store, n, rng, &ks);
  const Vector w = f.model.log_weights(f.store).array().exp();
  std::vector<double> count(4, 0.0);
  for (int k : ks) count[static_cast<std::size_t>(k)] += 1;
  for (int k = 0; k < 4; ++k) {
    const double sigma = std::sqrt(n * w[k] * (1 - w[k]));
    CHECK(std::abs(count[static_cast<std::size_t>(k)] - n * w[k]) <= 3 * sigma);
  }
  const auto [z, ld] = f.model.to_latent(f.store, x);
  const Tessellation t = f.model.tessellation().materialize(f.store);
  CHECK(locate_rows(t, z) == ks);
  const Vector lp = f.model.log_prob(f.store, x.topRows(5000));
  CHECK(lp.allFinite());

  Rng a(9), b(9);
  CHECK(f.model.sample(f.store, 100, a) == f.model.sample(f.store, 100, b));
}

TEST_CASE("symmetric anchors with uniform weights sample around the anchor centroid") {
  ad::ParamStore store;
  Rng rng(10);
  Matrix data(4, 2);
  data << 1, 1, -1, 1, -1, -1, 1, -1;
  MixtureConfig c = small_config(4, 0, 0);
  c.box_pad = 1.0;
  const MixtureModel m = MixtureModel::create(store, data, c, rng);
  const std::size_t n = 40000;
  const Matrix x = m.sample(store, n, rng);
  const Vector centroid = m.tessellation().materialize(store).anchors().colwise().mean();
  for (int d = 0; d < 2; ++d) {
    const Vector col = x.col(d);
    const double sd = std::sqrt((col.array() - col.mean()).square().sum() / (n - 1));
    CHECK(std::abs(col.mean() - centroid[d]) <= 3 * sd / std::sqrt(double(n)));
  }
}

TEST_CASE("boundary points are nudged and out-of-box points rejected") {
  ad::ParamStore store;
  Rng rng(11);
  Matrix data(2, 2);
  data << -1, 0, 1, 0;
  const MixtureModel m = MixtureModel::create(store, data, small_config(2, 0, 1), rng);
  Matrix x(3, 2);
  x << 0.0, 0.3, 0.5, 0.0, 50.0, 0.0;
  MixtureDiagnostics diag;
  const Vector lp = m.log_prob(store, x, &diag);
  CHECK(std::isfinite(lp[0]));
  CHECK(std::isfinite(lp[1]));
  CHECK(std::isinf(lp[2]));
  CHECK(diag.nudged == 1);
  CHECK(diag.rejected == 1);
  // The nudged point scores exactly as the point moved 1e-9 toward its anchor.
  const Tessellation t = m.tessellation().materialize(store);
  const Vector p = x.row(0).transpose();
  const Vector toward = t.anchor(t.locate(p)) - p;
  const Matrix moved = (p + 1e-9 * toward / toward.norm()).transpose();
  CHECK(lp[0] == m.log_prob(store, moved)[0]);
}

TEST_CASE("frozen-batch gradient matches finite differences") {
  // Trainable box: a frozen box has zero tape gradient but moves the finite differences.
  MixtureConfig c = small_config(3, 1, 1);
  c.freeze_box = false;
  Fixture f = make(c, 12);
  Rng rng(13);
  const Tessellation t = f.model.tessellation().materialize(f.store);
  Matrix x(8, 2);
  for (int i = 0; i < 8; ++i) x.row(i) = (0.5 * testing::random_in_box(rng, t)).transpose();
  const auto report = ad::grad_check(
      f.store, [&](Tape& tape) { return -ad::mean(f.model.log_prob(tape, tape.constant(x))); },
      1e-6, 1e-6, 2);
  CHECK(report.max_rel_error <= 1e-3);
}

TEST_CASE("k-means++ seeds are distinct data rows") {
  Rng rng(14);
  const Matrix pts = standard_normal(300, 3, rng);
  const Matrix s = kmeans_pp(pts, 10, rng);
  for (int i = 0; i < 10; ++i) {
    bool found = false;
    for (int r = 0; r < 300; ++r) found = found || pts.row(r) == s.row(i);
    CHECK(found);
    for (int j = 0; j < i; ++j) CHECK(s.row(i) != s.row(j));
  }
  CHECK(error_code([&] { kmeans_pp(Matrix(0, 2), 3, rng); }) == Errc::ConfigInvalid);
}

TEST_CASE("find rebinds, configuration errors") {
  MixtureConfig c = small_config(3, 1);
  Fixture f = make(c, 15);
  const MixtureModel again = MixtureModel::find(f.store, 2, c);
  Rng rng(16);
  const Matrix x = f.model.sample(f.store, 50, rng);
  CHECK(again.log_prob(f.store, x) == f.model.log_prob(f.store, x));
  c.components = 4;
  CHECK(error_code([&] { MixtureModel::find(f.store, 2, c); }) == Errc::CheckpointInvalid);
  c.components = 0;
  CHECK(error_code([&] { make(c, 1); }) == Errc::ConfigInvalid);
  c.components = 3;
  c.base_dof = -1.0;
  CHECK(error_code([&] { make(c, 1); }) == Errc::ConfigInvalid);
}

TEST_CASE("likelihood cost is nearly flat in K") {
  auto time_for = [](int K) {
    MixtureConfig c = small_config(K, 0, 2);
    c.hidden = {64, 64, 64};
    Fixture f = make(c, 17, 2, false);
    Rng rng(18);
    const Tessellation t = f.model.tessellation().materialize(f.store);
    Matrix x(4096, 2);
    for (int i = 0; i < 4096; ++i) x.row(i) = testing::random_in_box(rng, t).transpose();
    double best = 1e30;
    for (int rep = 0; rep < 3; ++rep) {
      const auto start = std::chrono::steady_clock::now();
      f.model.log_prob(f.store, x);
      best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    }
    return best;
  };
  const double t4 = time_for(4), t64 = time_for(64);
  MESSAGE("K=4 " << t4 << " s, K=64 " << t64 << " s");
  CHECK(t64 <= 1.5 * t4);
}
