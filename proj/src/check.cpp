#include "vflow/check.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>

#include "vflow/dequant.hpp"
#include "vflow/voronoi_layer.hpp"

namespace vflow {

using ad::Tape;
using ad::Tensor;

namespace {

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

Vector random_unit(Rng& rng, int d) {
  std::normal_distribution<double> normal;
  Vector v(d);
  do {
    for (int i = 0; i < d; ++i) v[i] = normal(rng);
  } while (v.norm() < 1e-3);
  return v / v.norm();
}

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

double formula_logdet(const LogdetFormula& f, const RankTwoJacobian& J) {
  return f ? f(J) : J.logdet();
}

RankTwoJacobian rebuild(const Tessellation& t, int k, const MapResult& r) {
  const RayExit exit = ray_exit(t, k, r.direction);
  const double rel = r.delta / exit.lambda_star;
  const double gamma = t.scales()[k];
  return radial_jacobian(exit, r.direction, r.delta, squash(rel, gamma), squash_deriv(rel, gamma));
}

// Perturb every non-tessellation parameter so no block is the identity.
void randomize(ad::ParamStore& store, Rng& rng, double sd) {
  std::normal_distribution<double> normal(0.0, sd);
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (store.name(ad::ParamId{i}).find(".tess.") != std::string::npos) continue;
    Tensor& t = store.value(ad::ParamId{i});
    for (Eigen::Index j = 0; j < t.size(); ++j) t.data()[j] += normal(rng);
  }
}

Matrix grid_points(const Vector& lo, const Vector& hi, int grid, double& area) {
  const double hx = (hi[0] - lo[0]) / grid, hy = (hi[1] - lo[1]) / grid;
  area = hx * hy;
  Matrix pts(static_cast<Eigen::Index>(grid) * grid, 2);
  for (int i = 0; i < grid; ++i)
    for (int j = 0; j < grid; ++j)
      pts.row(static_cast<Eigen::Index>(i) * grid + j) << lo[0] + (i + 0.5) * hx, lo[1] + (j + 0.5) * hy;
  return pts;
}

CodeMatrix random_codes(Rng& rng, const std::vector<int>& cards, Eigen::Index rows) {
  CodeMatrix c(rows, static_cast<Eigen::Index>(cards.size()));
  for (Eigen::Index n = 0; n < rows; ++n)
    for (std::size_t v = 0; v < cards.size(); ++v)
      c(n, static_cast<Eigen::Index>(v)) = uniform_int(rng, 0, cards[v] - 1);
  return c;
}

class Timer {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

CheckResult finish(std::string name, double worst, double tol, std::size_t n, const Timer& timer,
                   std::string detail = {}) {
  CheckResult r;
  r.name = std::move(name);
  r.worst = worst;
  r.tolerance = tol;
  r.passed = std::isfinite(worst) && worst <= tol;
  r.instances = n;
  r.seconds = timer.seconds();
  r.detail = std::move(detail);
  return r;
}

}  // namespace

namespace check {

Tessellation random_tessellation(Rng& rng, int cells, int dim, double min_sep) {
  Vector lo(dim), hi(dim);
  for (int d = 0; d < dim; ++d) {
    lo[d] = -uniform(rng, 1.0, 4.0);
    hi[d] = uniform(rng, 1.0, 4.0);
  }
  Matrix anchors(cells, dim);
  for (int k = 0; k < cells; ++k) {
    // Crowded low-dimensional boxes relax the separation rather than loop.
    for (int attempt = 1;; ++attempt) {
      for (int d = 0; d < dim; ++d) {
        const double margin = 0.05 * (hi[d] - lo[d]);
        anchors(k, d) = uniform(rng, lo[d] + margin, hi[d] - margin);
      }
      const double sep = min_sep / (1 << std::min(attempt / 100, 20));
      bool ok = true;
      for (int j = 0; j < k && ok; ++j) ok = (anchors.row(j) - anchors.row(k)).norm() > sep;
      if (ok) break;
    }
  }
  Vector scales(cells);
  for (int k = 0; k < cells; ++k) scales[k] = std::exp(uniform(rng, -1.0, 1.0));
  return Tessellation(anchors, lo, hi, scales);
}

Vector random_input(Rng& rng, const Tessellation& t, int k, double sd) {
  std::normal_distribution<double> normal(0.0, sd);
  return t.anchor(k) + std::abs(normal(rng)) * random_unit(rng, t.dim());
}

double bisection_exit(const Tessellation& t, int k, const Vector& direction) {
  const Vector xk = t.anchor(k);
  double lo = 0.0, hi = (t.box_hi() - t.box_lo()).norm() * 2.0;
  for (int it = 0; it < 200 && hi - lo > 1e-15 * (1.0 + hi); ++it) {
    const double mid = 0.5 * (lo + hi);
    (t.contains(k, xk + mid * direction) ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

CheckResult ray_exit(Rng& rng, std::size_t n, int max_dim, int max_cells, double tol) {
  const Timer timer;
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int D = uniform_int(rng, 1, max_dim), K = uniform_int(rng, 2, max_cells);
    const Tessellation t = random_tessellation(rng, K, D);
    const int k = uniform_int(rng, 0, K - 1);
    const Vector dir = random_unit(rng, D);
    const double closed = vflow::ray_exit(t, k, dir).lambda_star;
    const double bis = bisection_exit(t, k, dir);
    worst = std::max(worst, std::abs(closed - bis) / (1.0 + closed));
  }
  return finish("ray exit: closed form vs bisection", worst, tol, n, timer);
}

CheckResult bijection(Rng& rng, std::size_t n, double tol) {
  const Timer timer;
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int D = uniform_int(rng, 1, 8), K = uniform_int(rng, 2, 32);
    const Tessellation t = random_tessellation(rng, K, D);
    const int k = uniform_int(rng, 0, K - 1);
    // R^D -> cell -> R^D
    const Vector x = random_input(rng, t, k);
    const MapResult f = forward(t, k, x);
    const MapResult b = inverse(t, k, f.point);
    worst = std::max(worst, (b.point - x).norm() / std::max(1.0, x.norm()));
    worst = std::max(worst, std::abs(f.logdet + b.logdet));
    // cell -> R^D -> cell
    const Vector dir = random_unit(rng, D);
    const double lam = vflow::ray_exit(t, k, dir).lambda_star;
    const Vector z = t.anchor(k) + uniform(rng, 0.0, 0.999) * lam * dir;
    const MapResult zi = inverse(t, k, z);
    const MapResult zf = forward(t, k, zi.point);
    worst = std::max(worst, (zf.point - z).norm() / std::max(1.0, z.norm()));
    worst = std::max(worst, std::abs(zi.logdet + zf.logdet));
  }
  return finish("bijection: round trips and log-det sums", worst, tol, n, timer);
}

CheckResult logdet_dense(Rng& rng, std::size_t n, int max_dim, double tol,
                         const LogdetFormula& formula) {
  const Timer timer;
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int D = uniform_int(rng, 1, max_dim), K = uniform_int(rng, 2, 32);
    const Tessellation t = random_tessellation(rng, K, D);
    const int k = uniform_int(rng, 0, K - 1);
    const MapResult r = forward(t, k, random_input(rng, t, k));
    const RankTwoJacobian J = rebuild(t, k, r);
    const Eigen::PartialPivLU<Matrix> lu(J.dense());
    const double dense = lu.matrixLU().diagonal().array().abs().log().sum();
    worst = std::max(worst, rel_err(formula_logdet(formula, J), dense));
  }
  return finish("log-det: rank-two formula vs dense determinant", worst, tol, n, timer);
}

CheckResult logdet_finite_difference(Rng& rng, std::size_t n, int max_dim, double tol,
                                     const LogdetFormula& formula) {
  const Timer timer;
  double worst = 0.0;
  const double h = 1e-6;
  for (std::size_t i = 0; i < n; ++i) {
    const int D = uniform_int(rng, 1, max_dim), K = uniform_int(rng, 2, 16);
    const Tessellation t = random_tessellation(rng, K, D, 0.3);
    const int k = uniform_int(rng, 0, K - 1);
    const Vector x = random_input(rng, t, k);
    Matrix fd(D, D);
    for (int j = 0; j < D; ++j) {
      Vector xp = x, xm = x;
      xp[j] += h;
      xm[j] -= h;
      fd.col(j) = (forward(t, k, xp).point - forward(t, k, xm).point) / (2.0 * h);
    }
    const Eigen::PartialPivLU<Matrix> lu(fd);
    const double numeric = lu.matrixLU().diagonal().array().abs().log().sum();
    const RankTwoJacobian J = rebuild(t, k, forward(t, k, x));
    worst = std::max(worst, rel_err(formula_logdet(formula, J), numeric));
  }
  return finish("log-det: rank-two formula vs finite differences", worst, tol, n, timer);
}

CheckResult cell_map_gradient(Rng& rng, std::size_t n, double tol) {
  const Timer timer;
  double worst = 0.0;
  std::string detail;
  for (std::size_t i = 0; i < n; ++i) {
    const int D = uniform_int(rng, 1, 5), K = uniform_int(rng, 2, 8);
    const Tessellation t = random_tessellation(rng, K, D, 0.3);
    ad::ParamStore store;
    const TessellationParams params = TessellationParams::create(store, "t", t, false);
    Matrix x(10, D);
    IndexVector cells;
    for (int b = 0; b < 10; ++b) {
      cells.push_back(uniform_int(rng, 0, K - 1));
      x.row(b) = random_input(rng, t, cells.back()).transpose();
    }
    const auto report = ad::grad_check(
        store,
        [&](Tape& tape) {
          const CellMapBatch out = cell_forward(TessellationVars::bind(tape, params),
                                                params.materialize(store), tape.constant(x), cells);
          return ad::sum(out.logdet);
        },
        // Central differences at h = 1e-6 carry roundoff of order
        // eps * |sum logdet| / h, up to ~1e-7; gradients below the floor are
        // compared in absolute terms.
        1e-6, 1e-3);
    if (report.max_rel_error > worst) {
      worst = report.max_rel_error;
      detail = store.name(ad::ParamId{0}) + " coordinate " + std::to_string(report.worst_coordinate) +
               " analytic " + std::to_string(report.analytic) + " numeric " + std::to_string(report.numeric);
    }
  }
  return finish("gradient: cell-map log-det (anchors, box, scales)", worst, tol, n, timer, detail);
}

CheckResult elbo_gradient(Rng& rng, std::size_t n, double tol) {
  const Timer timer;
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<int> cards;
    const int V = uniform_int(rng, 1, 3);
    for (int v = 0; v < V; ++v) cards.push_back(uniform_int(rng, 2, 4));
    DequantConfig c;
    c.dim = uniform_int(rng, 1, 3);
    c.embed_dim = 3;
    c.flow = {1, {8, 8}, Activation::Tanh, 5.0};
    ad::ParamStore store;
    const DequantModel model = DequantModel::create(store, cards, c, rng);
    const JointDensity density =
        JointDensity::create(store, model.total_dim(), {1, {8, 8}, Activation::Tanh, 5.0}, rng);
    randomize(store, rng, 0.2);
    const CodeMatrix codes = random_codes(rng, cards, 6);
    const auto noise = model.draw_noise(6, rng);
    const auto report = ad::grad_check(
        store,
        [&](Tape& tape) { return -ad::mean(elbo_terms(tape, model, density, codes, noise)); },
        1e-6, 1e-6, 3);
    worst = std::max(worst, report.max_rel_error);
  }
  return finish("gradient: frozen-noise ELBO, all parameters", worst, tol, n, timer);
}

CheckResult mixture_gradient(Rng& rng, std::size_t n, double tol) {
  const Timer timer;
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    MixtureConfig c;
    c.components = uniform_int(rng, 2, 5);
    c.pre_blocks = 1;
    c.comp_blocks = 1;
    c.hidden = {8, 8};
    c.embed_dim = 3;
    c.freeze_box = false;
    ad::ParamStore store;
    const Matrix data = standard_normal(200, 2, rng);
    const MixtureModel model = MixtureModel::create(store, data, c, rng);
    randomize(store, rng, 0.2);
    const Matrix x = 0.5 * standard_normal(8, 2, rng);
    const auto report = ad::grad_check(
        store, [&](Tape& tape) { return -ad::mean(model.log_prob(tape, tape.constant(x))); },
        1e-6, 1e-6, 2);
    worst = std::max(worst, report.max_rel_error);
  }
  return finish("gradient: frozen-batch mixture likelihood", worst, tol, n, timer);
}

CheckResult dequant_support(Rng& rng, std::size_t n) {
  const Timer timer;
  std::size_t misses = 0, draws = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<int> cards;
    const int V = uniform_int(rng, 1, 4);
    for (int v = 0; v < V; ++v) cards.push_back(uniform_int(rng, 2, 9));
    DequantConfig c;
    c.dim = uniform_int(rng, 1, 4);
    c.embed_dim = 3;
    c.flow = {2, {8, 8}, Activation::Tanh, 5.0};
    ad::ParamStore store;
    const DequantModel model = DequantModel::create(store, cards, c, rng);
    randomize(store, rng, 0.3);
    const CodeMatrix codes = random_codes(rng, cards, 500);
    Tape tape(&store);
    const auto d = model.dequantize(tape, codes, model.draw_noise(500, rng));
    const CodeMatrix back = model.quantize(store, d.x.value());
    misses += static_cast<std::size_t>((back.array() != codes.array()).count());
    draws += static_cast<std::size_t>(codes.size());
  }
  return finish("support: quantize(dequantize(y)) = y", static_cast<double>(misses), 0.0, draws,
                timer);
}

CheckResult dequant_normalization(Rng& rng, int grid, double tol) {
  const Timer timer;
  DequantConfig c;
  c.dim = 2;
  c.embed_dim = 3;
  c.flow = {2, {12, 12}, Activation::Tanh, 5.0};
  ad::ParamStore store;
  const DequantModel model = DequantModel::create(store, {3}, c, rng);
  randomize(store, rng, 0.2);
  // Anchors on a randomly rotated triangle: nearly coincident anchors make
  // sliver cells that no fixed grid resolves.
  Tensor& anchors = store.value(model.tessellation(0).anchors);
  const double phase = std::uniform_real_distribution<double>(0.0, 2.0 * M_PI)(rng);
  const double radius = std::uniform_real_distribution<double>(0.8, 2.0)(rng);
  for (int y = 0; y < 3; ++y) {
    anchors(y, 0) = radius * std::cos(phase + 2.0 * M_PI * y / 3.0);
    anchors(y, 1) = radius * std::sin(phase + 2.0 * M_PI * y / 3.0);
  }
  const Tessellation t = model.materialize(store)[0];
  double area = 0.0;
  const Matrix pts = grid_points(t.box_lo(), t.box_hi(), grid, area);
  double worst = 0.0;
  for (int y = 0; y < 3; ++y) {
    const double mass = model.conditional_log_density(store, 0, y, pts).array().exp().sum() * area;
    worst = std::max(worst, std::abs(mass - 1.0));
  }
  return finish("normalization: q(x | y) over its cell", worst, tol, 3, timer);
}

CheckResult mixture_normalization(Rng& rng, int components, int grid, double tol) {
  const Timer timer;
  MixtureConfig c;
  c.components = components;
  c.comp_blocks = 2;
  c.hidden = {16, 16};
  c.embed_dim = 4;
  // Wider component base keeps every peak resolvable on the quadrature grid.
  c.base_std = 0.5;
  ad::ParamStore store;
  const MixtureModel model = MixtureModel::create(store, standard_normal(500, 2, rng), c, rng);
  randomize(store, rng, 0.2);
  const Tessellation t = model.tessellation().materialize(store);
  double area = 0.0;
  const Matrix pts = grid_points(t.box_lo(), t.box_hi(), grid, area);
  const double mass = model.log_prob(store, pts).array().exp().sum() * area;
  return finish("normalization: Voronoi mixture over its box", std::abs(mass - 1.0), tol, 1, timer);
}

CheckResult flow_normalization(Rng& rng, int grid, double tol) {
  const Timer timer;
  ad::ParamStore store;
  const FlowStack flow = FlowStack::create(store, "f", 2, 0, {4, {16, 16}, Activation::Tanh, 5.0},
                                           DiagGaussian::standard(2), rng);
  randomize(store, rng, 0.1);
  double area = 0.0;
  const Matrix pts = grid_points(Vector::Constant(2, -8.0), Vector::Constant(2, 8.0), grid, area);
  const double mass = flow.log_prob(store, pts).array().exp().sum() * area;
  return finish("normalization: coupling flow on a grid", std::abs(mass - 1.0), tol, 1, timer);
}

CheckResult mixture_disjoint(Rng& rng, std::size_t n, double tol) {
  const Timer timer;
  double worst = 0.0;
  std::size_t done = 0;
  while (done < n) {
    MixtureConfig c;
    c.components = uniform_int(rng, 2, 16);
    c.pre_blocks = uniform_int(rng, 0, 2);
    c.comp_blocks = 2;
    c.hidden = {16, 16};
    c.embed_dim = 4;
    const int D = uniform_int(rng, 1, 4);
    ad::ParamStore store;
    const MixtureModel model = MixtureModel::create(store, standard_normal(300, static_cast<std::size_t>(D), rng), c, rng);
    randomize(store, rng, 0.2);
    const Matrix raw = 1.2 * standard_normal(1000, static_cast<std::size_t>(D), rng);
    // Off-boundary rows: latent at most 99% of the way from its anchor to the
    // cell boundary along the ray.
    const Matrix z = model.to_latent(store, raw).first;
    const Tessellation t = model.tessellation().materialize(store);
    std::vector<Eigen::Index> keep;
    for (Eigen::Index i = 0; i < raw.rows() && done + keep.size() < n; ++i) {
      const Vector p = z.row(i).transpose();
      const int k = t.locate(p);
      const Vector offset = p - t.anchor(k);
      if (offset.norm() == 0.0) continue;
      const double lam = vflow::ray_exit(t, k, offset / offset.norm()).lambda_star;
      if (offset.norm() <= 0.99 * lam) keep.push_back(i);
    }
    Matrix x(static_cast<Eigen::Index>(keep.size()), D);
    for (std::size_t j = 0; j < keep.size(); ++j) x.row(static_cast<Eigen::Index>(j)) = raw.row(keep[j]);
    const Vector fast = model.log_prob(store, x);
    const Vector slow = mixture_log_prob_bruteforce(store, model, x);
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      worst = std::max(worst, std::abs(fast[i] - slow[i]) / std::max(1.0, std::abs(slow[i])));
    done += keep.size();
  }
  return finish("mixture: nearest-cell vs brute-force sum", worst, tol, n, timer);
}

}  // namespace check

Vector mixture_log_prob_bruteforce(const ad::ParamStore& store, const MixtureModel& model,
                                   const Matrix& x) {
  const auto [z, ld_pre] = model.to_latent(store, x);
  const Tessellation t = model.tessellation().materialize(store);
  const Vector log_w = model.log_weights(store);
  const auto n = x.rows();
  std::vector<std::vector<double>> terms(static_cast<std::size_t>(n));
  for (int k = 0; k < t.num_cells(); ++k) {
    std::vector<Eigen::Index> rows;
    for (Eigen::Index i = 0; i < n; ++i)
      if (t.contains(k, z.row(i).transpose())) rows.push_back(i);
    if (rows.empty()) continue;
    Matrix u(static_cast<Eigen::Index>(rows.size()), z.cols());
    Vector ld(u.rows());
    for (std::size_t j = 0; j < rows.size(); ++j) {
      const MapResult r = inverse(t, k, z.row(rows[j]).transpose());
      u.row(static_cast<Eigen::Index>(j)) = r.point.transpose();
      ld[static_cast<Eigen::Index>(j)] = r.logdet;
    }
    const Vector comp = model.component_log_prob(store, u, k);
    for (std::size_t j = 0; j < rows.size(); ++j) {
      const auto jj = static_cast<Eigen::Index>(j);
      terms[static_cast<std::size_t>(rows[j])].push_back(comp[jj] + ld[jj] + log_w[k]);
    }
  }
  Vector out(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& ts = terms[static_cast<std::size_t>(i)];
    if (ts.empty()) {
      out[i] = -std::numeric_limits<double>::infinity();
      continue;
    }
    const double m = *std::max_element(ts.begin(), ts.end());
    double s = 0.0;
    for (double v : ts) s += std::exp(v - m);
    out[i] = m + std::log(s) + ld_pre[i];
  }
  return out;
}

std::vector<CheckResult> run_checks(const CheckOptions& options) {
  Rng rng(options.seed);
  const auto count = [&](double base) {
    return static_cast<std::size_t>(std::max(1.0, std::round(base * options.effort)));
  };
  std::vector<CheckResult> out;
  out.push_back(check::ray_exit(rng, count(2000)));
  out.push_back(check::bijection(rng, count(2000)));
  out.push_back(check::logdet_dense(rng, count(500), 64, 1e-10, options.logdet));
  out.push_back(check::logdet_finite_difference(rng, count(200), 16, 1e-4, options.logdet));
  out.push_back(check::cell_map_gradient(rng, count(10)));
  out.push_back(check::elbo_gradient(rng, count(3)));
  out.push_back(check::mixture_gradient(rng, count(3)));
  out.push_back(check::dequant_support(rng, count(10)));
  out.push_back(check::dequant_normalization(rng));
  out.push_back(check::mixture_normalization(rng));
  out.push_back(check::flow_normalization(rng));
  out.push_back(check::mixture_disjoint(rng, count(4000)));
  return out;
}

std::string format_checks(const std::vector<CheckResult>& results) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-4s  %-52s %10s %10s %8s %8s\n", "", "check", "worst", "tol",
                "n", "sec");
  out += line;
  for (const auto& r : results) {
    std::snprintf(line, sizeof line, "%-4s  %-52s %10.3g %10.3g %8zu %8.2f\n",
                  r.passed ? "PASS" : "FAIL", r.name.c_str(), r.worst, r.tolerance, r.instances,
                  r.seconds);
    out += line;
  }
  return out;
}

}  // namespace vflow
