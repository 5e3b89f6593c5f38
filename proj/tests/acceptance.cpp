// Acceptance suite. `acceptance N` runs criterion N and prints one line:
//   criterion N: PASS|FAIL  <measurements>  (<seconds> s)
// Without an argument every criterion runs in order. Exit status is 0 only
// when every requested criterion passed.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "vflow/check.hpp"
#include "vflow/cli.hpp"
#include "vflow/error.hpp"

namespace fs = std::filesystem;
using namespace vflow;

namespace {

using Clock = std::chrono::steady_clock;

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

double since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome {
  bool passed = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    passed = passed && ok;
    detail << (detail.tellp() > 0 ? "; " : "") << what << (ok ? "" : " [fail]");
  }
  void require(const CheckResult& r) {
    std::ostringstream s;
    s << r.name << " worst " << r.worst << " <= " << r.tolerance << " over " << r.instances;
    require(r.passed, s.str());
  }
};

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(5);
  s << v;
  return s.str();
}

fs::path config_dir() {
  if (const char* dir = std::getenv("VFLOW_CONFIG_DIR")) return dir;
  return VFLOW_DEFAULT_CONFIG_DIR;
}

cli::Config config(const std::string& name) {
  return cli::load_config((config_dir() / name).string());
}

// ---------------------------------------------------------------- criteria

void criterion1(Outcome& o) {
  Rng rng(101);
  o.require(check::ray_exit(rng, 10000, 8, 32, 1e-8));
}

void criterion2(Outcome& o) {
  Rng rng(102);
  o.require(check::bijection(rng, 10000, 1e-9));
}

void criterion3(Outcome& o) {
  Rng rng(103);
  o.require(check::logdet_dense(rng, 10000, 64, 1e-10));
  o.require(check::logdet_finite_difference(rng, 2000, 16, 1e-4));
}

void criterion4(Outcome& o) {
  Rng rng(104);
  o.require(check::cell_map_gradient(rng, 1000, 1e-4));
  o.require(check::elbo_gradient(rng, 100, 1e-3));
}

void criterion5(Outcome& o) {
  Rng rng(105);
  o.require(check::dequant_normalization(rng, 400, 1e-2));
  o.require(check::mixture_normalization(rng, 5, 400, 1e-2));
}

// Best of several timed log_prob calls on a fixed batch of box points.
double mixture_eval_seconds(int components) {
  MixtureConfig c;
  c.components = components;
  c.pre_blocks = 0;
  c.comp_blocks = 2;
  c.hidden = {64, 64, 64};
  Rng rng(606);
  Matrix data(4 * components + 64, 2);
  for (Eigen::Index i = 0; i < data.rows(); ++i)
    for (int d = 0; d < 2; ++d) data(i, d) = uniform(rng, -3.0, 3.0);
  ad::ParamStore store;
  const MixtureModel model = MixtureModel::create(store, data, c, rng);
  const Tessellation t = model.tessellation().materialize(store);
  Matrix x(4096, 2);
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (int d = 0; d < 2; ++d) x(i, d) = uniform(rng, t.box_lo()[d], t.box_hi()[d]);
  double best = std::numeric_limits<double>::infinity();
  for (int rep = 0; rep < 5; ++rep) {
    const auto start = Clock::now();
    model.log_prob(store, x);
    best = std::min(best, since(start));
  }
  return best;
}

void criterion6(Outcome& o) {
  Rng rng(106);
  o.require(check::mixture_disjoint(rng, 10000, 1e-12));
  const double t4 = mixture_eval_seconds(4);
  const double t64 = mixture_eval_seconds(64);
  o.require(t64 <= 1.5 * t4, "log_prob batch 4096: K=64 " + fmt(t64) + " s <= 1.5 x K=4 " + fmt(t4) + " s");
}

cli::TrainedModel train(const std::string& name, const std::function<void(cli::Config&)>& edit = {}) {
  cli::Config c = config(name);
  if (edit) edit(c);
  cli::TrainedModel t = cli::train_from_config(c);
  if (t.diverged) throw Error(Errc::DivergedLoss, name + ": " + t.failure);
  return t;
}

void criterion7(Outcome& o) {
  {
    // Every row of the exact-proportion table, so the target is its entropy.
    const cli::TrainedModel t = train("toy.cfg");
    const auto& p = t.config.data.probs;
    double entropy = 0.0;
    for (double pj : p) entropy -= pj * std::log(pj);
    Rng rng(707);
    const double bound = nll_bound(t.store, t.dequant, t.density, t.data.table.codes, 64, rng);
    o.require(std::abs(bound - entropy) <= 0.02 && std::abs(entropy - 0.3251) < 5e-5,
              "toy neg ELBO " + fmt(bound) + " within 0.02 of entropy " + fmt(entropy));
  }
  {
    const cli::TrainedModel t = train("checkerboard8.cfg");
    const DiscreteTable fit = t.data.table.subset(t.data.split.train);
    const DiscreteTable test = t.data.table.subset(t.data.split.test);
    Rng rng(708);
    const double bound = nll_bound(t.store, t.dequant, t.density, test.codes, 16, rng);
    const double histogram = marginal_histogram_nll(fit, test);
    o.require(bound <= histogram - 0.1,
              "checkerboard test neg ELBO " + fmt(bound) + " <= histogram " + fmt(histogram) + " - 0.1");
  }
}

Matrix rows_of(const Matrix& points, const std::vector<std::size_t>& index) {
  Matrix out(static_cast<Eigen::Index>(index.size()), points.cols());
  for (std::size_t i = 0; i < index.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = points.row(static_cast<Eigen::Index>(index[i]));
  return out;
}

void criterion8(Outcome& o) {
  {
    const cli::TrainedModel t = train("two_gaussians.cfg");
    const Matrix test = rows_of(t.data.points, t.data.split.test);
    MixtureDiagnostics diag;
    const double nll = -t.mixture.log_prob(t.store, test, &diag).mean();
    const double reference = -generator_log_density(t.config.data.shape, test)->mean();
    o.require(std::abs(nll - reference) <= 0.05,
              "two_gaussians K=2 test NLL " + fmt(nll) + " within 0.05 of generator " + fmt(reference) +
                  " (" + std::to_string(diag.rejected) + " rejected)");
  }
  int wins = 0;
  std::ostringstream pairs;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const cli::TrainedModel t = train("ring8.cfg", [&](cli::Config& c) {
      c.data.seed = seed;
      c.data.split_seed = seed;
      c.train.seed = seed;
    });
    const Matrix fit = rows_of(t.data.points, t.data.split.train);
    const Matrix val = rows_of(t.data.points, t.data.split.val);
    const Matrix test = rows_of(t.data.points, t.data.split.test);
    const double mixture_nll = -t.mixture.log_prob(t.store, test).mean();

    // Same coupling depth along every path, same widths, same optimizer.
    const MixtureConfig& m = t.config.mixture;
    const FlowConfig fc{m.pre_blocks + m.comp_blocks, m.hidden, m.activation, m.log_scale_clamp};
    ad::ParamStore store;
    Rng rng(seed);
    const FlowStack flow = FlowStack::create(store, "flow", 2, 0, fc, DiagGaussian::standard(2), rng);
    train_flow(store, flow, fit, val, t.config.train);
    const double flow_nll = -flow.log_prob(store, test).mean();

    wins += mixture_nll < flow_nll;
    pairs << (seed > 1 ? ", " : "") << fmt(mixture_nll) << " vs " << fmt(flow_nll);
  }
  o.require(wins == 3, "ring8 K=8 beats " + std::to_string(config("ring8.cfg").mixture.pre_blocks +
                                                             config("ring8.cfg").mixture.comp_blocks) +
                           "-block flow on " + std::to_string(wins) + "/3 seeds (" + pairs.str() + ")");
}

void criterion9(Outcome& o) {
  const cli::TrainedModel t = train("nursery.cfg");
  const DiscreteTable test = t.data.table.subset(t.data.split.test);
  Rng rng(909);
  const double bound = nll_bound(t.store, t.dequant, t.density, test.codes, 16, rng);
  o.require(t.data.table.rows() == 12960 && t.data.table.num_vars() == 8 && t.config.dequant.dim == 4,
            "12960 rows, 8 variables, D=4");
  o.require(bound <= 9.6, "Nursery test neg ELBO " + fmt(bound) + " <= 9.6");
}

struct Criterion {
  void (*run)(Outcome&);
  double limit_seconds;
};

const Criterion kCriteria[] = {
    {criterion1, 30},  {criterion2, 10},  {criterion3, 60},   {criterion4, 120},  {criterion5, 60},
    {criterion6, 60},  {criterion7, 900}, {criterion8, 1200}, {criterion9, 7200},
};

bool run_criterion(int n) {
  Outcome o;
  const auto start = Clock::now();
  try {
    kCriteria[n - 1].run(o);
  } catch (const std::exception& e) {
    o.require(false, std::string("error: ") + e.what());
  }
  const double seconds = since(start);
  o.require(seconds < kCriteria[n - 1].limit_seconds,
            "runtime < " + fmt(kCriteria[n - 1].limit_seconds) + " s");
  std::printf("criterion %d: %s  %s  (%.1f s)\n", n, o.passed ? "PASS" : "FAIL", o.detail.str().c_str(),
              seconds);
  std::fflush(stdout);
  return o.passed;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<int> which;
  for (int i = 1; i < argc; ++i) {
    const int n = std::atoi(argv[i]);
    if (n < 1 || n > 9) {
      std::fprintf(stderr, "usage: acceptance [1-9 ...]\n");
      return 2;
    }
    which.push_back(n);
  }
  if (which.empty())
    for (int n = 1; n <= 9; ++n) which.push_back(n);
  bool all = true;
  for (int n : which) all = run_criterion(n) && all;
  return all ? 0 : 1;
}
