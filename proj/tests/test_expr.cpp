// Copyright (c) nsmpc contributors
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "nsmpc/expr.hpp"

using namespace nsmpc::expr;

namespace {

FunctionHandle square_fn() {
  GraphBuilder gb({{"x", 1}});
  auto x = gb.var("x", 0);
  return gb.finish({x * x});
}

}  // namespace

TEST_CASE("evaluate basic arithmetic") {
  auto f = square_fn();
  const double x = 3.0;
  CHECK(f({std::span<const double>(&x, 1)})[0] == doctest::Approx(9.0));

  GraphBuilder gb({{"x", 1}, {"y", 1}});
  auto fx = gb.var("x", 0);
  auto fy = gb.var("y", 0);
  auto g = gb.finish({fx * fy + fy});
  const double xv = 2.0, yv = 3.0;
  CHECK(g({std::span<const double>(&xv, 1), std::span<const double>(&yv, 1)})[0] ==
        doctest::Approx(9.0));
}

TEST_CASE("evaluate clipped sqrt") {
  GraphBuilder gb({{"x", 1}});
  auto x = gb.var("x", 0);
  auto f = gb.finish({sqrt(max(gb.constant(1e-6), x))});
  const double xv = -5.0;
  CHECK(f({std::span<const double>(&xv, 1)})[0] == doctest::Approx(1e-3));
}

TEST_CASE("evaluate reports domain errors with the offending node") {
  GraphBuilder gb({{"x", 1}});
  auto f = gb.finish({sqrt(gb.var("x", 0))});
  const double xv = -1.0;
  CHECK_THROWS_AS((void)f({std::span<const double>(&xv, 1)}), ExprError);
  try {
    (void)f({std::span<const double>(&xv, 1)});
  } catch (const ExprError& e) {
    CHECK(e.node >= 0);
  }
}

TEST_CASE("evaluate rejects dimension mismatch") {
  auto f = square_fn();
  std::vector<double> two{1.0, 2.0};
  CHECK_THROWS_AS((void)f({std::span<const double>(two)}), ExprError);
}

TEST_CASE("jacobian of simple functions") {
  auto f = square_fn();
  auto J = jacobian(f);
  const double x = 3.0;
  CHECK(J({std::span<const double>(&x, 1)})[0] == doctest::Approx(6.0));

  GraphBuilder gb({{"x", 1}});
  auto g = gb.finish({sqrt(gb.var("x", 0))});
  auto Jg = jacobian(g);
  const double x4 = 4.0;
  CHECK(Jg({std::span<const double>(&x4, 1)})[0] == doctest::Approx(0.25));
}

TEST_CASE("jacobian of a vector function") {
  GraphBuilder gb({{"v", 2}});
  auto x = gb.var("v", 0);
  auto y = gb.var("v", 1);
  auto f = gb.finish({x * y, x + y});
  auto J = jacobian(f);
  std::vector<double> at{2.0, 3.0};
  auto vals = J({std::span<const double>(at)});
  auto d = dense(J, vals);
  REQUIRE(J.sparse_rows() == 2);
  REQUIRE(J.sparse_cols() == 2);
  CHECK(d[0] == doctest::Approx(3.0));
  CHECK(d[1] == doctest::Approx(2.0));
  CHECK(d[2] == doctest::Approx(1.0));
  CHECK(d[3] == doctest::Approx(1.0));
}

TEST_CASE("max derivative follows the larger argument, left on ties") {
  GraphBuilder gb({{"v", 2}});
  auto a = gb.var("v", 0);
  auto b = gb.var("v", 1);
  auto f = gb.finish({max(a, b)});
  auto J = jacobian(f);
  std::vector<double> lo{1.0, 2.0};
  auto d1 = dense(J, J({std::span<const double>(lo)}));
  CHECK(d1[0] == 0.0);
  CHECK(d1[1] == 1.0);
  std::vector<double> tie{2.0, 2.0};
  auto d2 = dense(J, J({std::span<const double>(tie)}));
  CHECK(d2[0] == 1.0);
  CHECK(d2[1] == 0.0);
}

TEST_CASE("lagrangian hessian examples") {
  {
    auto f = square_fn();
    auto H = lagrangian_hessian(f, FunctionHandle{});
    const double x = 7.0;
    std::vector<double> mult;
    auto vals = H({std::span<const double>(&x, 1), std::span<const double>(mult)});
    auto d = dense(H, vals);
    CHECK(d[0] == doctest::Approx(2.0));
  }
  {
    GraphBuilder gb({{"x", 2}});
    auto f = gb.finish({gb.var("x", 0) * gb.var("x", 1)});
    auto H = lagrangian_hessian(f, FunctionHandle{});
    std::vector<double> at{5.0, -3.0}, mult;
    auto d = dense(H, H({std::span<const double>(at), std::span<const double>(mult)}));
    CHECK(d[0] == 0.0);
    CHECK(d[1] == doctest::Approx(1.0));
    CHECK(d[2] == doctest::Approx(1.0));
    CHECK(d[3] == 0.0);
  }
  {
    // objective x^3 with constraint x^2, multiplier 2 at x=1: 6x + 2*nu = 10
    GraphBuilder gb({{"x", 1}});
    auto x = gb.var("x", 0);
    auto obj = gb.finish({pow(x, 3.0)});
    auto con = gb.finish({x * x});
    auto H = lagrangian_hessian(obj, con);
    const double xv = 1.0, nu = 2.0;
    auto d = dense(H, H({std::span<const double>(&xv, 1), std::span<const double>(&nu, 1)}));
    CHECK(d[0] == doctest::Approx(10.0));
  }
}

TEST_CASE("hessian of a quadratic is constant across points") {
  GraphBuilder gb({{"x", 3}});
  auto x0 = gb.var("x", 0);
  auto x1 = gb.var("x", 1);
  auto x2 = gb.var("x", 2);
  auto f = gb.finish({2.0 * x0 * x0 + x0 * x1 - 3.0 * x1 * x2 + x2 * x2});
  auto H = lagrangian_hessian(f, FunctionHandle{});
  std::mt19937 rng(7);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  std::vector<double> first;
  for (int k = 0; k < 5; ++k) {
    std::vector<double> at{u(rng), u(rng), u(rng)}, mult;
    auto d = dense(H, H({std::span<const double>(at), std::span<const double>(mult)}));
    if (k == 0)
      first = d;
    else
      for (std::size_t i = 0; i < d.size(); ++i) CHECK(d[i] == doctest::Approx(first[i]));
  }
}

namespace {

// Random smooth graph generator: +,-,*,/ (guarded), sqrt (positive args),
// integer powers. Returns the handle; inputs are a single block of dim n.
FunctionHandle random_smooth_graph(std::mt19937& rng, int n, int n_out) {
  GraphBuilder gb({{"x", n}});
  std::uniform_real_distribution<double> cdist(-2.0, 2.0);
  std::vector<Scalar> pool;
  for (int i = 0; i < n; ++i) pool.push_back(gb.var("x", i));
  pool.push_back(gb.constant(cdist(rng)));
  std::uniform_int_distribution<int> opdist(0, 5);
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  const int steps = 12;
  for (int s = 0; s < steps; ++s) {
    pick = std::uniform_int_distribution<std::size_t>(0, pool.size() - 1);
    auto a = pool[pick(rng)];
    auto b = pool[pick(rng)];
    switch (opdist(rng)) {
      case 0: pool.push_back(a + b); break;
      case 1: pool.push_back(a - b); break;
      case 2: pool.push_back(a * b); break;
      case 3: pool.push_back(a / (1.0 + b * b)); break;
      case 4: pool.push_back(sqrt(0.5 + a * a)); break;
      default: pool.push_back(pow(a, 2.0)); break;
    }
  }
  std::vector<Scalar> outs;
  for (int k = 0; k < n_out; ++k) outs.push_back(pool[pool.size() - 1 - std::size_t(k)]);
  return gb.finish(outs);
}

}  // namespace

TEST_CASE("analytic jacobian matches central finite differences on random graphs") {
  std::mt19937 rng(42);
  std::uniform_real_distribution<double> xdist(-1.5, 1.5);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + int(rng() % 3);
    auto f = random_smooth_graph(rng, n, 2);
    auto J = jacobian(f);
    std::vector<double> x(std::size_t(n), 0.0);
    for (auto& v : x) v = xdist(rng);
    auto vals = J({std::span<const double>(x)});
    auto d = dense(J, vals);
    const double h = 1e-6;
    for (int j = 0; j < n; ++j) {
      auto xp = x, xm = x;
      xp[std::size_t(j)] += h;
      xm[std::size_t(j)] -= h;
      auto fp = f({std::span<const double>(xp)});
      auto fm = f({std::span<const double>(xm)});
      for (int r = 0; r < 2; ++r) {
        const double fd = (fp[std::size_t(r)] - fm[std::size_t(r)]) / (2 * h);
        const double ad = d[std::size_t(r * n + j)];
        CHECK(std::abs(ad - fd) <= 1e-6 * std::max(1.0, std::abs(ad)));
      }
    }
  }
}

TEST_CASE("hessian is exactly symmetric by construction") {
  std::mt19937 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    auto f = random_smooth_graph(rng, 3, 1);
    auto H = lagrangian_hessian(f, FunctionHandle{});
    CHECK(H.lower_triangular());
    for (const auto& [r, c] : H.sparsity()) CHECK(r >= c);
  }
}

TEST_CASE("second derivatives agree with finite differences of the gradient") {
  std::mt19937 rng(5);
  std::uniform_real_distribution<double> xdist(-1.0, 1.0);
  for (int trial = 0; trial < 25; ++trial) {
    const int n = 3;
    auto f = random_smooth_graph(rng, n, 1);
    auto J = jacobian(f);
    auto H = lagrangian_hessian(f, FunctionHandle{});
    std::vector<double> x(std::size_t(n), 0.0);
    for (auto& v : x) v = xdist(rng);
    std::vector<double> mult;
    auto hv = H({std::span<const double>(x), std::span<const double>(mult)});
    auto hd = dense(H, hv);
    const double h = 1e-6;
    for (int j = 0; j < n; ++j) {
      auto xp = x, xm = x;
      xp[std::size_t(j)] += h;
      xm[std::size_t(j)] -= h;
      auto gp = dense(J, J({std::span<const double>(xp)}));
      auto gm = dense(J, J({std::span<const double>(xm)}));
      for (int i = 0; i < n; ++i) {
        const double fd = (gp[std::size_t(i)] - gm[std::size_t(i)]) / (2 * h);
        CHECK(hd[std::size_t(i * n + j)] ==
              doctest::Approx(fd).epsilon(1e-5).scale(std::max(1.0, std::abs(fd))));
      }
    }
  }
}

TEST_CASE("evaluation is bit-deterministic") {
  std::mt19937 rng(3);
  auto f = random_smooth_graph(rng, 3, 2);
  std::vector<double> x{0.3, -0.7, 1.1};
  auto a = f({std::span<const double>(x)});
  auto b = f({std::span<const double>(x)});
  CHECK(a[0] == b[0]);
  CHECK(a[1] == b[1]);
}

TEST_CASE("call inlines a handle with substituted arguments") {
  auto sq = square_fn();
  GraphBuilder gb({{"y", 1}});
  auto y = gb.var("y", 0);
  auto outs = gb.call(sq, {{"x", {y + 1.0}}});
  auto f = gb.finish({outs[0]});
  const double yv = 2.0;
  CHECK(f({std::span<const double>(&yv, 1)})[0] == doctest::Approx(9.0));
}

TEST_CASE("dump produces lisp-like text") {
  auto f = square_fn();
  auto s = f.dump();
  CHECK(s.find("(out0") != std::string::npos);
  CHECK(s.find("(var x 0)") != std::string::npos);
}

TEST_CASE("undeclared block or bad index is rejected at build time") {
  GraphBuilder gb({{"x", 2}});
  CHECK_THROWS_AS(gb.var("z", 0), ExprError);
  CHECK_THROWS_AS(gb.var("x", 2), ExprError);
}
