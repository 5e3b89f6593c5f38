#include <doctest.h>

#include <cstring>
#include <random>

#include "vflow/autodiff.hpp"

using namespace vflow;
using namespace vflow::ad;

namespace {

Tensor scalar(double v) { return Tensor::Constant(1, 1, v); }

Tensor random_tensor(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double lo = -1.0,
                     double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(r, c);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = u(rng);
  return t;
}

}  // namespace

TEST_CASE("derivatives of elementary expressions") {
  Tape tape;
  const Var x = tape.variable(scalar(3.0));
  tape.backward(square(x));
  CHECK(tape.grad(x)(0, 0) == doctest::Approx(6.0));

  Tape t2;
  const Var y = t2.variable(scalar(-0.7));
  t2.backward(log(exp(y)));
  CHECK(t2.grad(y)(0, 0) == doctest::Approx(1.0).epsilon(1e-15));

  Tape t3;
  Tensor v(1, 3);
  v << -1.0, 2.0, 5.0;
  const Var a = t3.variable(v);
  const MinPositive m = select_min_positive(a);
  CHECK(m.values.scalar() == 2.0);
  CHECK(m.index[0] == 1);
  t3.backward(sum(m.values));
  const Tensor g = t3.grad(a);
  CHECK(g(0, 0) == 0.0);
  CHECK(g(0, 1) == 1.0);
  CHECK(g(0, 2) == 0.0);
}

TEST_CASE("select_min_positive is one-hot per row and rejects rows without a positive entry") {
  std::mt19937_64 rng(1);
  Tape tape;
  Tensor a0 = random_tensor(rng, 20, 7);
  a0.col(3) = a0.col(3).cwiseAbs().array() + 0.01;  // every row has a positive entry
  const Var a = tape.variable(a0);
  const MinPositive m = select_min_positive(a);
  tape.backward(sum(m.values * 3.0));
  const Tensor g = tape.grad(a);
  for (Eigen::Index r = 0; r < 20; ++r) {
    CHECK(g.row(r).cwiseAbs().sum() == doctest::Approx(3.0));
    CHECK(g(r, m.index[r]) == 3.0);
  }
  Tape t2;
  Tensor neg(1, 2);
  neg << -1.0, 0.0;
  try {
    select_min_positive(t2.variable(neg));
    FAIL("expected NoExit");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::NoExit);
  }
}

TEST_CASE("gradient of dot(w, x) with respect to a parameter is x") {
  ParamStore store;
  const ParamId w = store.add("w", Tensor::Constant(4, 1, 0.5));
  const ParamId unused = store.add("unused", Tensor::Ones(2, 2));
  Tensor x(4, 1);
  x << 1.0, -2.0, 3.0, 0.25;
  Tape tape(&store);
  const Gradients g = tape.backward(dot(tape.param(w), tape.constant(x)));
  CHECK((g[w] - x).norm() == 0.0);
  CHECK(g[unused].rows() == 2);
  CHECK(g[unused].norm() == 0.0);
}

TEST_CASE("errors are surfaced with their codes") {
  Tape tape;
  auto code = [](auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      return e.code();
    }
    return Errc::Io;
  };
  const Var m = tape.variable(Tensor::Ones(2, 3));
  CHECK(code([&] { add(m, tape.variable(Tensor::Ones(3, 2))); }) == Errc::ShapeMismatch);
  CHECK(code([&] { matmul(m, m); }) == Errc::ShapeMismatch);
  CHECK(code([&] { log(tape.constant(scalar(0.0))); }) == Errc::LogOfNonPositive);
  CHECK(code([&] { div(m, tape.constant(scalar(0.0))); }) == Errc::DivisionByZero);
  CHECK(code([&] { tape.backward(m); }) == Errc::NonScalarRoot);
}

TEST_CASE("broadcasting, slicing and concatenation route gradients") {
  std::mt19937_64 rng(2);
  const Tensor a0 = random_tensor(rng, 3, 4), b0 = random_tensor(rng, 1, 4),
               c0 = random_tensor(rng, 3, 1);
  const Objective f = [](Tape&, const std::vector<Var>& p) {
    const Var s = p[0] * p[1] + p[2];
    const Var cat = concat_cols({slice_cols(s, 1, 2), p[0]});
    const Var rows = concat_rows({slice_rows(cat, 0, 2), gather_rows(cat, {2, 2, 0})});
    const Var picked = pick(rows, {0, 5, 1, 3, 2});
    return sum(square(picked)) + sum(tanh(take_cols(rows, {3, 0, 3})));
  };
  CHECK(grad_check(f, {a0, b0, c0}, 1e-6).max_rel_error <= 1e-7);
}

TEST_CASE("quadratic form gradient is exact") {
  std::mt19937_64 rng(3);
  const Tensor A = random_tensor(rng, 5, 5), x0 = random_tensor(rng, 5, 1);
  const Objective f = [&A](Tape& t, const std::vector<Var>& p) {
    return dot(p[0], matvec(t.constant(A), p[0]));
  };
  CHECK(grad_check(f, {x0}, 1e-4).max_rel_error <= 1e-8);
}

TEST_CASE("five-op chain and every unary primitive match finite differences") {
  std::mt19937_64 rng(4);
  const Tensor x0 = random_tensor(rng, 3, 2, 0.2, 1.5);
  const Objective chain = [](Tape&, const std::vector<Var>& p) {
    return sum(log(sqrt(exp(p[0]) + 1.0) * tanh(p[0])));
  };
  CHECK(grad_check(chain, {x0}, 1e-5).max_rel_error <= 1e-6);

  const Objective unary = [](Tape&, const std::vector<Var>& p) {
    const Var& x = p[0];
    return sum(sigmoid(x) + softplus(x) * 0.5 + swish(x) - softsign(x) + abs(x) * x +
               square(x) / (1.0 + exp(-x)));
  };
  const Tensor x1 = random_tensor(rng, 4, 3, -2.0, 2.0);
  CHECK(grad_check(unary, {x1}, 1e-5).max_rel_error <= 1e-6);

  const Objective reductions = [](Tape&, const std::vector<Var>& p) {
    const Var ls = log_softmax(p[0]);
    return sum(logsumexp_rows(p[0])) + mean(ls * ls) + sum(sum_rows(p[0]) * sum_rows(p[0])) +
           sum(square(sum_cols(p[0])));
  };
  CHECK(grad_check(reductions, {x1}, 1e-5).max_rel_error <= 1e-6);

  const Tensor w0 = random_tensor(rng, 3, 5), b0 = random_tensor(rng, 4, 5);
  const Objective linear = [](Tape&, const std::vector<Var>& p) {
    const Var h = matmul(p[0], p[1]);
    return sum(square(h - p[2])) + sum(transpose(h) * transpose(p[2])) +
           sum(broadcast(slice_rows(h, 0, 1), 3, 5));
  };
  CHECK(grad_check(linear, {x1, w0, b0}, 1e-5).max_rel_error <= 1e-7);
}

TEST_CASE("property: backward is linear in the root") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    ParamStore store;
    const ParamId p = store.add("p", random_tensor(rng, 3, 3));
    auto f = [&](Tape& t) { return sum(exp(t.param(p)) * t.param(p)); };
    auto g = [&](Tape& t) { return sum(tanh(matmul(t.param(p), t.param(p)))); };
    const double a = 1.7, b = -0.4;
    Tape t1(&store), t2(&store), t3(&store);
    const Tensor gf = t1.backward(f(t1))[p];
    const Tensor gg = t2.backward(g(t2))[p];
    const Tensor gc = t3.backward(a * f(t3) + b * g(t3))[p];
    CHECK((gc - (a * gf + b * gg)).norm() <= 1e-12 * (1.0 + gc.norm()));
  }
}

TEST_CASE("property: identical tapes give bitwise identical gradients") {
  std::mt19937_64 rng(6);
  ParamStore store;
  const ParamId p = store.add("p", random_tensor(rng, 8, 8));
  auto run = [&] {
    Tape t(&store);
    const Var h = softplus(matmul(t.param(p), t.param(p)));
    return t.backward(sum(log_softmax(h)))[p];
  };
  const Tensor g1 = run(), g2 = run();
  CHECK(std::memcmp(g1.data(), g2.data(), sizeof(double) * static_cast<std::size_t>(g1.size())) == 0);
}

TEST_CASE("parameter store flattening round-trips") {
  ParamStore store;
  store.add("a", Tensor::Constant(2, 3, 1.5));
  store.add("b", Tensor::Constant(1, 1, -2.0));
  CHECK(store.total_elements() == 7);
  std::vector<double> flat = store.flatten();
  flat[6] = 4.0;
  store.unflatten(flat);
  CHECK(store.value(store.find("b"))(0, 0) == 4.0);
  CHECK(store.contains("a"));
  CHECK_FALSE(store.contains("c"));
  CHECK_THROWS_AS(store.find("c"), Error);
}
