#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "mflab/control.hpp"
#include "mflab/lq.hpp"
#include "support/test_oracles.hpp"

using namespace mflab;
using mflab::testing::random_measure;

namespace {

SolverConfig basic_cfg(int d, double lambda = 1.0, double sigma = 0.0, int M = 64,
                       uint64_t seed = 31) {
  SolverConfig cfg;
  cfg.lambda = lambda;
  cfg.sigma = sigma * Mat::Identity(d, d);
  cfg.M = M;
  cfg.seed = seed;
  cfg.tol = 1e-10;
  return cfg;
}

ControlPath from_bundle(const PathBundle& b, double lambda) {
  ControlPath v;
  v.grid = b.grid;
  v.v.reserve(static_cast<size_t>(b.grid.K));
  for (int k = 0; k < b.grid.K; ++k) {
    LiftedField vk = b.Z[static_cast<size_t>(k)];
    for (int w = 0; w < vk.outcomes(); ++w)
      for (int i = 0; i < vk.atoms(); ++i) vk.at(w, i) *= -1.0 / lambda;
    v.v.push_back(std::move(vk));
  }
  return v;
}

}  // namespace

TEST_CASE("cost basics") {
  auto zero = make_zero_functional(1);
  auto m = make_empirical((Mat(1, 1) << 1.7).finished());
  auto cfg = basic_cfg(1);
  TimeGrid grid{0.0, 1.0, 8};
  auto v0 = zero_control(m, grid);
  CHECK(cost(v0, identity_field(m), m, cfg, *zero, *zero) == doctest::Approx(0.0));

  Vec a(1);
  a << 1.0;
  auto lin = make_linear_functional(a);
  CHECK(cost(v0, identity_field(m), m, cfg, *zero, *lin) == doctest::Approx(1.7));
}

TEST_CASE("gradient equals lambda v for zero costs") {
  std::mt19937 gen(41);
  auto m = random_measure(gen, 4, 1);
  auto zero = make_zero_functional(1);
  auto cfg = basic_cfg(1, 2.5, 0.3, 16);
  TimeGrid grid{0.0, 1.0, 6};
  auto v = random_feedback_control(identity_field(m), m, grid, cfg, 3);
  auto g = cost_gradient(v, identity_field(m), m, cfg, *zero, *zero);
  for (int k = 0; k < grid.K; ++k)
    for (int w = 0; w < v.v[static_cast<size_t>(k)].outcomes(); ++w)
      for (int i = 0; i < m.size(); ++i)
        CHECK(g.gradient.v[static_cast<size_t>(k)](w, i, 0) ==
              doctest::Approx(2.5 * v.v[static_cast<size_t>(k)](w, i, 0)).epsilon(1e-12));
}

TEST_CASE("directional derivative matches the gradient pairing") {
  std::mt19937 gen(42);
  for (int d = 1; d <= 2; ++d) {
    auto m = random_measure(gen, 4, d);
    std::vector<FunctionalPtr> lib = {make_lq_functional(d, 1.0, 0.6),
                                      make_interaction_functional(d, 0.7, 1.4)};
    for (const auto& F : lib) {
      auto cfg = basic_cfg(d, 2.0, 0.4, 48, 7);
      TimeGrid grid{0.0, 1.0, 6};
      auto X0 = identity_field(m);
      auto v = random_feedback_control(X0, m, grid, cfg, 11);
      auto w = random_feedback_control(X0, m, grid, cfg, 12);
      auto g = cost_gradient(v, X0, m, cfg, *F, *F);
      double pairing = 0.0;
      for (int k = 0; k < grid.K; ++k)
        pairing += grid.dt() * inner(g.gradient.v[static_cast<size_t>(k)],
                                     w.v[static_cast<size_t>(k)], m);
      const double eps = 1e-4;
      ControlPath vp = v, vm = v;
      for (int k = 0; k < grid.K; ++k) {
        vp.v[static_cast<size_t>(k)] =
            axpy(eps, w.v[static_cast<size_t>(k)], v.v[static_cast<size_t>(k)]);
        vm.v[static_cast<size_t>(k)] =
            axpy(-eps, w.v[static_cast<size_t>(k)], v.v[static_cast<size_t>(k)]);
      }
      const double fd = (cost(vp, X0, m, cfg, *F, *F) - cost(vm, X0, m, cfg, *F, *F)) /
                        (2.0 * eps);
      INFO(F->name(), " d=", d);
      CHECK(fd == doctest::Approx(pairing)
                      .epsilon(1e-3)
                      .scale(std::max(1.0, std::abs(pairing))));
    }
  }
}

TEST_CASE("gradient vanishes at the forward-backward optimum") {
  std::mt19937 gen(43);
  auto m = random_measure(gen, 5, 1);
  auto F = make_lq_functional(1, 1.0, 0.5);
  auto F_T = make_lq_functional(1, 0.5, 0.2);
  auto cfg = basic_cfg(1, 2.0, 0.4, 128, 19);
  cfg.tol = 1e-11;
  TimeGrid grid{0.0, 1.0, 16};
  auto X0 = identity_field(m);
  auto bundle = solve_first_order(*F, *F_T, X0, m, grid, cfg);
  REQUIRE(bundle.diag.converged);
  auto vhat = from_bundle(bundle, cfg.lambda);
  auto g = cost_gradient(vhat, X0, m, cfg, *F, *F_T);
  CHECK(g.norm < 5e-8);
}

TEST_CASE("minimize: trivial and closed-form cases") {
  auto zero = make_zero_functional(1);
  auto m1 = make_empirical((Mat(1, 1) << 1.0).finished());
  auto cfg = basic_cfg(1, 1.0, 0.0, 1);
  TimeGrid grid{0.0, 1.0, 32};

  auto r0 = minimize(identity_field(m1), m1, grid, cfg, *zero, *zero);
  CHECK(r0.converged);
  CHECK(r0.cost_value == doctest::Approx(0.0));
  CHECK(r0.iterations == 0);

  // J = (1/2) int v^2 + (1/2) y(T)^2 on delta_1: optimal cost 1/(2(1+T))
  auto term = make_lq_functional(1, 1.0, 0.0);
  MinimizeOptions opt;
  opt.tol = 1e-7;
  opt.max_iters = 4000;
  auto r1 = minimize(identity_field(m1), m1, grid, cfg, *zero, *term, opt);
  CHECK(r1.converged);
  CHECK(r1.cost_value == doctest::Approx(0.25).epsilon(2e-3));
}

TEST_CASE("midpoint convexity of the cost") {
  std::mt19937 gen(44);
  auto m = random_measure(gen, 4, 1);
  auto F = make_lq_functional(1, 1.0, 0.4);
  auto cfg = basic_cfg(1, 1.5, 0.3, 32, 5);
  TimeGrid grid{0.0, 1.0, 6};
  auto X0 = identity_field(m);
  for (int rep = 0; rep < 5; ++rep) {
    auto v1 = random_feedback_control(X0, m, grid, cfg, 100 + static_cast<uint64_t>(rep));
    auto v2 = random_feedback_control(X0, m, grid, cfg, 200 + static_cast<uint64_t>(rep));
    ControlPath mid;
    mid.grid = grid;
    mid.v.resize(static_cast<size_t>(grid.K));
    for (int k = 0; k < grid.K; ++k)
      mid.v[static_cast<size_t>(k)] = axpy(
          0.5, v1.v[static_cast<size_t>(k)],
          axpy(0.5, v2.v[static_cast<size_t>(k)],
               LiftedField(1, m.size(), 1, m.id())));
    const double jm = cost(mid, X0, m, cfg, *F, *F);
    const double j1 = cost(v1, X0, m, cfg, *F, *F);
    const double j2 = cost(v2, X0, m, cfg, *F, *F);
    CHECK(jm <= 0.5 * j1 + 0.5 * j2 + 1e-12);
  }
}

TEST_CASE("convexity margin report") {
  std::mt19937 gen(45);
  auto m = random_measure(gen, 4, 1);
  auto zero = make_zero_functional(1);
  auto cfg = basic_cfg(1, 1.5, 0.3, 32, 6);
  TimeGrid grid{0.0, 1.0, 6};
  auto X0 = identity_field(m);
  auto v1 = random_feedback_control(X0, m, grid, cfg, 300);
  auto v2 = random_feedback_control(X0, m, grid, cfg, 301);

  auto same = convexity_check(v1, v1, X0, m, cfg, *zero, *zero);
  CHECK(same.margin == doctest::Approx(0.0));

  // zero costs: gradient difference is lambda dv, so the margin is exactly 0
  auto rep = convexity_check(v1, v2, X0, m, cfg, *zero, *zero);
  CHECK(rep.margin == doctest::Approx(0.0).epsilon(1e-10));

  // quadratic family: margin stays nonnegative
  auto F = make_lq_functional(1, 1.0, 0.5);
  auto repF = convexity_check(v1, v2, X0, m, cfg, *F, *F);
  CHECK(repF.margin >= -1e-10);
}

TEST_CASE("value at the terminal time and for zero costs") {
  std::mt19937 gen(46);
  auto m = random_measure(gen, 5, 1);
  auto F_T = make_lq_functional(1, 0.8, 0.3);
  auto cfg = basic_cfg(1);
  auto rep = value(m, TimeGrid{1.0, 1.0, 0}, cfg, *F_T, *F_T);
  CHECK(rep.V == doctest::Approx(F_T->value(m)));
  for (int i = 0; i < m.size(); ++i)
    CHECK(rep.delta_V[i] == doctest::Approx(F_T->delta(m, m.atom(i))).epsilon(1e-12));

  auto zero = make_zero_functional(1);
  auto rep0 = value(m, TimeGrid{0.0, 1.0, 8}, basic_cfg(1, 1.0, 0.5, 32), *zero, *zero);
  CHECK(rep0.V == doctest::Approx(0.0));
}

TEST_CASE("value matches the riccati oracle") {
  std::mt19937 gen(47);
  auto m = random_measure(gen, 12, 1, false, 0.8, 0.6);
  LQSpec spec;
  spec.q = 1.0;
  spec.q_bar = 0.5;
  spec.q_T = 0.7;
  spec.q_bar_T = 0.2;
  spec.lambda = 2.0;
  spec.sigma = 0.4 * Mat::Identity(1, 1);
  spec.T = 1.0;
  auto ric = riccati_solve(spec);
  auto cfg = basic_cfg(1, spec.lambda, 0.4, 384, 117);
  TimeGrid grid{0.0, 1.0, 32};
  auto rep = value(m, grid, cfg, *spec.running(), *spec.terminal());
  auto oracle = lq_value(spec, ric, m, 0.0);
  CHECK(rep.V == doctest::Approx(oracle.V).epsilon(0.02));
  for (int i = 0; i < m.size(); ++i)
    CHECK(rep.grad_delta_V(i, 0) ==
          doctest::Approx(oracle.grad_delta_V(i, 0)).epsilon(0.05).scale(1.0));
  // normalization of the reported functional derivative
  CHECK(std::abs(m.weights().dot(rep.delta_V)) < 1e-10);
}

TEST_CASE("value invariant under relabeling of equal-weight atoms") {
  Mat pts(4, 1);
  pts << 0.2, -0.4, 1.1, 0.6;
  auto m = make_empirical(pts);
  Mat perm(4, 1);
  perm << 1.1, 0.2, 0.6, -0.4;
  auto mp = make_empirical(perm);
  auto F = make_lq_functional(1, 1.0, 0.5);
  auto cfg = basic_cfg(1, 1.5, 0.4, 64, 9);
  TimeGrid grid{0.0, 1.0, 8};
  auto r1 = value(m, grid, cfg, *F, *F);
  auto r2 = value(mp, grid, cfg, *F, *F);
  CHECK(r1.V == doctest::Approx(r2.V).epsilon(1e-12));
}

TEST_CASE("finite difference of V recovers delta_V") {
  std::mt19937 gen(48);
  auto m = random_measure(gen, 6, 1, true, 0.7, 0.4);
  auto F = make_lq_functional(1, 1.0, 0.5);
  auto F_T = make_lq_functional(1, 0.6, 0.3);
  auto cfg = basic_cfg(1, 2.0, 0.0, 1, 21);
  TimeGrid grid{0.0, 1.0, 24};
  auto base = value(m, grid, cfg, *F, *F_T);

  Vec probe = m.atom(2);
  auto dx = make_empirical(probe.transpose());
  std::vector<double> errs;
  for (double eps : {4e-2, 2e-2, 1e-2}) {
    auto pert = mix(m, dx, eps);
    auto vp = value(pert, grid, cfg, *F, *F_T);
    const double fd = (vp.V - base.V) / eps;
    errs.push_back(std::abs(fd - base.delta_V[2]));
  }
  CHECK(errs[2] < errs[0]);
  const double order = std::log(errs[0] / errs[2]) / std::log(4.0);
  CHECK(order >= 0.9);
}

TEST_CASE("route agreement between descent and the forward-backward solver") {
  std::mt19937 gen(49);
  auto m = random_measure(gen, 4, 1);
  auto F = make_lq_functional(1, 1.0, 0.4);
  auto F_T = make_lq_functional(1, 0.5, 0.0);
  auto cfg = basic_cfg(1, 2.0, 0.3, 64, 33);
  cfg.tol = 1e-11;
  TimeGrid grid{0.0, 1.0, 10};
  auto X0 = identity_field(m);
  auto bundle = solve_first_order(*F, *F_T, X0, m, grid, cfg);
  REQUIRE(bundle.diag.converged);
  const double j_fbsde = cost(from_bundle(bundle, cfg.lambda), X0, m, cfg, *F, *F_T);
  MinimizeOptions opt;
  opt.tol = 1e-6;
  opt.max_iters = 3000;
  auto gd = minimize(X0, m, grid, cfg, *F, *F_T, opt);
  CHECK(gd.converged);
  CHECK(j_fbsde == doctest::Approx(gd.cost_value).epsilon(2e-5));
  CHECK(j_fbsde >= gd.cost_value - 1e-9);
}

TEST_CASE("dpp rows: trivial horizon split and zero costs") {
  std::mt19937 gen(50);
  auto m = random_measure(gen, 3, 1);
  auto zero = make_zero_functional(1);
  auto cfg = basic_cfg(1, 1.0, 0.4, 16, 3);
  TimeGrid grid{0.0, 1.0, 8};
  auto rows0 = dpp_residual(m, grid, cfg, *zero, *zero, {2, 8}, 1 << 20);
  for (const auto& r : rows0) CHECK(r.residual == doctest::Approx(0.0));

  auto F = make_lq_functional(1, 1.0, 0.3);
  auto rows = dpp_residual(m, grid, cfg, *F, *F, {8}, 1 << 20);
  // h = T - t: identical decomposition by construction (no resampling)
  CHECK_FALSE(rows[0].resampled);
  CHECK(rows[0].residual < 1e-9);
}

TEST_CASE("dpp residual small at one step for the quadratic family") {
  std::mt19937 gen(51);
  auto m = random_measure(gen, 4, 1);
  auto F = make_lq_functional(1, 1.0, 0.0);
  auto cfg = basic_cfg(1, 1.5, 0.3, 96, 4);
  TimeGrid grid{0.0, 1.0, 8};
  auto rows = dpp_residual(m, grid, cfg, *F, *F, {1}, 1 << 20);
  CHECK(rows[0].residual < 0.05 * (1.0 + std::abs(rows[0].lhs)));
}

TEST_CASE("time regularity ratios: zero and bounded cases") {
  std::mt19937 gen(52);
  auto m = random_measure(gen, 4, 1);
  auto zero = make_zero_functional(1);
  auto cfg = basic_cfg(1, 1.0, 0.4, 32, 8);
  TimeGrid grid{0.0, 1.0, 8};
  auto rows0 = time_regularity_probe(m, grid, cfg, *zero, *zero, {1, 2, 4});
  for (const auto& r : rows0) {
    CHECK(r.value_ratio == doctest::Approx(0.0));
    CHECK(r.gradient_ratio == doctest::Approx(0.0));
  }

  auto F = make_lq_functional(1, 1.0, 0.4);
  auto rows = time_regularity_probe(m, grid, cfg, *F, *F, {1, 2, 4});
  for (const auto& r : rows) {
    CHECK(r.value_ratio < 10.0);
    CHECK(r.gradient_ratio < 10.0);
  }
}

TEST_CASE("measure compression keeps moments approximately") {
  std::mt19937 gen(53);
  auto m = random_measure(gen, 400, 1);
  CounterRng rng(5);
  auto small = compress_measure(m, 100, rng, 0);
  CHECK(small.size() == 100);
  CHECK(small.mean()[0] == doctest::Approx(m.mean()[0]).epsilon(0.1).scale(1.0));
  auto same = compress_measure(m, 500, rng, 0);
  CHECK(same.size() == m.size());
}
