#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "mflab/fbsde.hpp"
#include "mflab/lq.hpp"
#include "support/test_oracles.hpp"

using namespace mflab;
using mflab::testing::random_measure;

namespace {

SolverConfig basic_cfg(int d, double lambda = 1.0, double sigma = 0.0, int M = 64,
                       uint64_t seed = 17) {
  SolverConfig cfg;
  cfg.lambda = lambda;
  cfg.sigma = sigma * Mat::Identity(d, d);
  cfg.M = M;
  cfg.seed = seed;
  cfg.tol = 1e-10;
  return cfg;
}

}  // namespace

TEST_CASE("regression reproduces polynomial targets exactly") {
  std::mt19937 gen(3);
  auto m = random_measure(gen, 8, 1);
  LiftedField state(32, m.size(), 1, m.id());
  std::normal_distribution<double> dist(0.0, 1.0);
  for (int w = 0; w < 32; ++w)
    for (int i = 0; i < m.size(); ++i) state(w, i, 0) = dist(gen);

  LiftedField targets(32, m.size(), 1, m.id());
  for (int w = 0; w < 32; ++w)
    for (int i = 0; i < m.size(); ++i) targets(w, i, 0) = 3.0 * state(w, i, 0) + 1.0;
  auto rr = regress_conditional(targets, state, m, {1, 1});
  CHECK_FALSE(rr.fallback_mean);
  for (int w = 0; w < 32; ++w)
    for (int i = 0; i < m.size(); ++i)
      CHECK(rr.fitted(w, i, 0) == doctest::Approx(targets(w, i, 0)).epsilon(1e-10));

  // constant targets
  LiftedField ones(32, m.size(), 1, m.id());
  for (int w = 0; w < 32; ++w)
    for (int i = 0; i < m.size(); ++i) ones(w, i, 0) = 4.5;
  auto rc = regress_conditional(ones, state, m, {2, 1});
  CHECK(rc.fitted(5, 3, 0) == doctest::Approx(4.5));

  // prediction at new points
  Vec y(1);
  y << 0.37;
  CHECK(rr.fit.predict(y)[0] == doctest::Approx(3.0 * 0.37 + 1.0).epsilon(1e-10));
}

TEST_CASE("regression of squared state recovers the quadratic coefficients") {
  std::mt19937 gen(4);
  auto m = make_empirical((Mat(1, 1) << 0.0).finished());
  const int M = 4096;
  LiftedField state(M, 1, 1, m.id());
  std::normal_distribution<double> dist(0.0, 1.0);
  for (int w = 0; w < M; ++w) state(w, 0, 0) = dist(gen);
  LiftedField targets(M, 1, 1, m.id());
  for (int w = 0; w < M; ++w) targets(w, 0, 0) = state(w, 0, 0) * state(w, 0, 0);
  auto rr = regress_conditional(targets, state, m, {2, 1});
  // exact fit of an in-span target
  for (int w = 0; w < M; w += 97)
    CHECK(rr.fitted(w, 0, 0) == doctest::Approx(targets(w, 0, 0)).epsilon(1e-8));
}

TEST_CASE("rank-deficient design falls back to the mean") {
  auto m = make_empirical((Mat(2, 1) << 1.0, 1.0).finished());
  LiftedField state(1, 2, 1, m.id());
  state(0, 0, 0) = 1.0;
  state(0, 1, 0) = 1.0;  // zero variance: degree-2 design is singular
  LiftedField targets(4, 2, 1, m.id());
  for (int w = 0; w < 4; ++w)
    for (int i = 0; i < 2; ++i) targets(w, i, 0) = w;
  auto rr = regress_blocks(targets, state, m, {}, {2, 1});
  CHECK(rr.fallback_mean);
  CHECK(rr.fitted(0, 0, 0) == doctest::Approx(1.5));
}

TEST_CASE("zero costs give a pure Brownian flow") {
  std::mt19937 gen(5);
  auto m = random_measure(gen, 4, 1);
  auto zero = make_zero_functional(1);
  auto cfg = basic_cfg(1, 1.0, 0.5, 32);
  TimeGrid grid{0.0, 1.0, 8};
  auto bundle = solve_first_order(*zero, *zero, identity_field(m), m, grid, cfg);
  CHECK(bundle.diag.converged);
  for (int k = 0; k <= 8; ++k) CHECK(bundle.z_norm(m, k) == doctest::Approx(0.0));
  // Y(s) = X0 + sigma (w(s) - w(t)) exactly
  Mat cum = Mat::Zero(32, 1);
  for (int k = 0; k < 8; ++k) {
    cum += bundle.dW[static_cast<size_t>(k)];
    for (int w = 0; w < 32; ++w)
      for (int i = 0; i < 4; ++i)
        CHECK(bundle.Y[static_cast<size_t>(k + 1)](w, i, 0) ==
              doctest::Approx(m.atoms()(i, 0) + 0.5 * cum(w, 0)).epsilon(1e-12));
  }
}

TEST_CASE("deterministic two-point boundary case: q_T=1, sigma=0, delta measure") {
  // Z(s) = Y(T) and Y(T) = c/(1+T-t) in closed form
  auto m = make_empirical((Mat(1, 1) << 2.0).finished());
  auto zero = make_zero_functional(1);
  auto term = make_lq_functional(1, 1.0, 0.0);
  const double T = 1.0;
  auto cfg = basic_cfg(1, 1.0, 0.0);
  cfg.tol = 1e-13;
  TimeGrid grid{0.0, T, 256};
  auto bundle = solve_first_order(*zero, *term, identity_field(m), m, grid, cfg);
  CHECK(bundle.diag.converged);
  const double yT_expected = 2.0 / (1.0 + T);
  CHECK(bundle.Y[256](0, 0, 0) == doctest::Approx(yT_expected).epsilon(5e-3));
  CHECK(bundle.Z[0](0, 0, 0) == doctest::Approx(yT_expected).epsilon(5e-3));
  CHECK(bundle.Z[128](0, 0, 0) == doctest::Approx(bundle.Z[0](0, 0, 0)).epsilon(1e-9));
}

TEST_CASE("riccati fixed point P=1: Z tracks Y pathwise") {
  std::mt19937 gen(6);
  auto m = random_measure(gen, 6, 1);
  auto running = make_lq_functional(1, 1.0, 0.0);
  auto term = make_lq_functional(1, 1.0, 0.0);
  auto cfg = basic_cfg(1, 1.0, 0.4, 128);
  cfg.tol = 1e-11;
  TimeGrid grid{0.0, 1.0, 64};
  auto bundle = solve_first_order(*running, *term, identity_field(m), m, grid, cfg);
  CHECK(bundle.diag.converged);
  // P == 1 makes Z(s) = Y(s) along every path
  for (int k : {0, 16, 32, 64}) {
    const auto& Y = bundle.Y[static_cast<size_t>(k)];
    const auto& Z = bundle.Z[static_cast<size_t>(k)];
    double worst = 0.0;
    for (int w = 0; w < Y.outcomes(); ++w)
      for (int i = 0; i < Y.atoms(); ++i)
        worst = std::max(worst,
                         std::abs(Z(Z.wrap(w), i, 0) - Y(Y.wrap(w), i, 0)));
    CHECK(worst < 0.05);
  }
}

TEST_CASE("picard residuals contract monotonically after warmup") {
  std::mt19937 gen(7);
  auto m = random_measure(gen, 5, 1);
  auto running = make_lq_functional(1, 1.0, 0.5);
  auto term = make_lq_functional(1, 0.5, 0.25);
  auto cfg = basic_cfg(1, 2.0, 0.3, 64);
  cfg.tol = 1e-12;
  TimeGrid grid{0.0, 1.0, 16};
  auto bundle = solve_first_order(*running, *term, identity_field(m), m, grid, cfg);
  CHECK(bundle.diag.converged);
  const auto& hist = bundle.diag.residual_history;
  REQUIRE(hist.size() >= 3);
  for (size_t i = 2; i + 1 < hist.size(); ++i) CHECK(hist[i + 1] <= hist[i] * 1.0001);
  CHECK(bundle.diag.contraction_ratio < 1.0);
}

TEST_CASE("martingale check: regression residuals orthogonal to the basis") {
  std::mt19937 gen(8);
  auto m = random_measure(gen, 4, 1);
  auto running = make_lq_functional(1, 1.0, 0.5);
  auto cfg = basic_cfg(1, 1.5, 0.5, 256);
  TimeGrid grid{0.0, 1.0, 8};
  auto bundle = solve_first_order(*running, *running, identity_field(m), m, grid, cfg);
  CHECK(bundle.diag.converged);
  CHECK(bundle.diag.max_residual_correlation <= 3.0 / std::sqrt(256.0));
}

TEST_CASE("growth bound stable under doubling the initial field") {
  std::mt19937 gen(9);
  auto m = random_measure(gen, 5, 1, false, 1.0, 1.0);
  auto m2 = make_empirical(2.0 * m.atoms(), m.weights());
  auto running = make_lq_functional(1, 1.0, 0.3);
  auto cfg = basic_cfg(1, 1.5, 0.4, 64);
  TimeGrid grid{0.0, 1.0, 16};
  auto b1 = solve_first_order(*running, *running, identity_field(m), m, grid, cfg);
  auto b2 = solve_first_order(*running, *running, identity_field(m2), m2, grid, cfg);
  CHECK(b1.diag.growth_constant < 10.0);
  CHECK(b2.diag.growth_constant < 10.0);
  CHECK(b2.diag.growth_constant < 2.0 * b1.diag.growth_constant + 0.5);
}

TEST_CASE("restart consistency: solving from Y(s) reproduces the tail") {
  std::mt19937 gen(10);
  auto m = random_measure(gen, 4, 1);
  auto running = make_lq_functional(1, 1.0, 0.4);
  auto term = make_lq_functional(1, 0.7, 0.0);
  auto cfg = basic_cfg(1, 1.5, 0.4, 64);
  cfg.tol = 1e-11;
  TimeGrid grid{0.0, 1.0, 16};
  auto bundle = solve_first_order(*running, *term, identity_field(m), m, grid, cfg);
  REQUIRE(bundle.diag.converged);

  const int j = 6;
  auto restarted = solve_first_order(*running, *term, bundle.Y[j], m,
                                     grid.restarted_at(j), cfg);
  REQUIRE(restarted.diag.converged);
  for (int k = j; k <= grid.K; ++k) {
    const auto& a = bundle.Y[static_cast<size_t>(k)];
    const auto& b = restarted.Y[static_cast<size_t>(k - j)];
    double worst = 0.0;
    for (int w = 0; w < a.outcomes(); ++w)
      for (int i = 0; i < a.atoms(); ++i)
        worst = std::max(worst, (a.at(a.wrap(w), i) - b.at(b.wrap(w), i)).norm());
    CHECK(worst < 5e-7);
  }
}

TEST_CASE("x-derivative system: zero costs and the P=1 case") {
  std::mt19937 gen(11);
  auto m = random_measure(gen, 4, 1);
  auto zero = make_zero_functional(1);
  auto cfg = basic_cfg(1, 1.0, 0.3, 32);
  TimeGrid grid{0.0, 1.0, 8};
  auto first = solve_first_order(*zero, *zero, identity_field(m), m, grid, cfg);
  auto xder = solve_x_derivative(first, *zero, *zero, m, cfg);
  for (int k = 0; k <= grid.K; ++k) {
    CHECK(field_norm(xder.Z[static_cast<size_t>(k)], m) == doctest::Approx(0.0));
    CHECK(xder.Y[static_cast<size_t>(k)](0, 0, 0) == doctest::Approx(1.0));
  }

  auto one = make_lq_functional(1, 1.0, 0.0);
  TimeGrid fine{0.0, 1.0, 64};
  auto firstP = solve_first_order(*one, *one, identity_field(m), m, fine, cfg);
  auto xderP = solve_x_derivative(firstP, *one, *one, m, cfg);
  CHECK(xderP.diag.converged);
  // P = 1: calZ(t) = I at every atom, up to O(dt)
  for (int i = 0; i < m.size(); ++i)
    CHECK(xderP.Z[0](0, i, 0) == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("x-derivative output at t is sigma-independent for quadratic costs") {
  std::mt19937 gen(12);
  auto m = random_measure(gen, 4, 1);
  auto running = make_lq_functional(1, 0.8, 0.0);
  TimeGrid grid{0.0, 1.0, 16};
  Vec z_at_t(2);
  int idx = 0;
  for (double sig : {0.2, 0.9}) {
    auto cfg = basic_cfg(1, 1.5, sig, 64);
    auto first = solve_first_order(*running, *running, identity_field(m), m, grid, cfg);
    auto xder = solve_x_derivative(first, *running, *running, m, cfg);
    z_at_t[idx++] = xder.Z[0](0, 1, 0);
  }
  CHECK(z_at_t[0] == doctest::Approx(z_at_t[1]).epsilon(1e-6));
}

TEST_CASE("second-order system basics") {
  std::mt19937 gen(13);
  auto m = random_measure(gen, 4, 1);
  auto one = make_lq_functional(1, 1.0, 0.0);
  auto cfg = basic_cfg(1, 1.0, 0.3, 64);
  TimeGrid grid{0.0, 1.0, 48};
  auto first = solve_first_order(*one, *one, identity_field(m), m, grid, cfg);

  // zero direction stays zero
  LiftedField zero_dir(1, m.size(), 1, m.id());
  auto s0 = solve_second_order(first, zero_dir, *one, *one, m, cfg);
  for (int k = 0; k <= grid.K; ++k)
    CHECK(field_norm(s0.Z[static_cast<size_t>(k)], m) == doctest::Approx(0.0));

  // homogeneity: doubling the direction doubles the output
  CounterRng rng(99);
  auto Xdir = random_normal_field(m, 64, rng, 5);
  auto s1 = solve_second_order(first, Xdir, *one, *one, m, cfg);
  auto Xdir2 = axpy(1.0, Xdir, Xdir);
  auto s2 = solve_second_order(first, Xdir2, *one, *one, m, cfg);
  CHECK(field_norm(s2.Z[0], m) ==
        doctest::Approx(2.0 * field_norm(s1.Z[0], m)).epsilon(1e-6));

  // P = 1 pair: calZ = calY along the solution
  double worst = 0.0;
  for (int k : {0, 24, 48}) {
    const auto& Yk = s1.Y[static_cast<size_t>(k)];
    const auto& Zk = s1.Z[static_cast<size_t>(k)];
    for (int w = 0; w < Yk.outcomes(); ++w)
      for (int i = 0; i < m.size(); ++i)
        worst = std::max(worst, std::abs(Zk(Zk.wrap(w), i, 0) - Yk(Yk.wrap(w), i, 0)));
  }
  CHECK(worst < 0.05);
}

TEST_CASE("measure-derivative systems: vanishing cases and the lq closed form") {
  std::mt19937 gen(14);
  auto m = random_measure(gen, 5, 1, false, 0.8, 0.5);
  Vec probe(1);
  probe << 1.3;
  auto mp = with_zero_weight_atom(m, probe);
  const int pidx = mp.size() - 1;
  TimeGrid grid{0.0, 1.0, 16};

  // linear-in-m data: all sources vanish
  {
    Vec a(1);
    a << 0.7;
    auto lin = make_linear_functional(a);
    auto cfg = basic_cfg(1, 2.0, 0.3, 32);
    auto first = solve_first_order(*lin, *lin, identity_field(mp), mp, grid, cfg);
    auto xder = solve_x_derivative(first, *lin, *lin, mp, cfg);
    auto bars = solve_measure_derivative(first, xder, *lin, *lin, mp, pidx, cfg);
    for (int k = 0; k <= 16; ++k) {
      CHECK(field_norm(bars.bar.Z[static_cast<size_t>(k)], mp) == doctest::Approx(0.0));
      CHECK(field_norm(bars.bar.Y[static_cast<size_t>(k)], mp) == doctest::Approx(0.0));
    }
  }

  // no mean coupling: Zbar vanishes
  {
    auto f = make_lq_functional(1, 1.0, 0.0);
    auto cfg = basic_cfg(1, 2.0, 0.3, 32);
    auto first = solve_first_order(*f, *f, identity_field(mp), mp, grid, cfg);
    auto xder = solve_x_derivative(first, *f, *f, mp, cfg);
    auto bars = solve_measure_derivative(first, xder, *f, *f, mp, pidx, cfg);
    CHECK(field_norm(bars.bar.Z[0], mp) == doctest::Approx(0.0).epsilon(1e-9));
  }

  // mean coupling: Zbar(t, xi, x) = R(t)(x - xbar), xi-independent and affine
  {
    LQSpec spec;
    spec.d = 1;
    spec.q = 1.0;
    spec.q_bar = 0.6;
    spec.q_T = 0.8;
    spec.q_bar_T = 0.4;
    spec.lambda = 2.0;
    spec.sigma = 0.3 * Mat::Identity(1, 1);
    spec.T = 1.0;
    auto ric = riccati_solve(spec);
    auto F = spec.running();
    auto F_T = spec.terminal();
    auto cfg = basic_cfg(1, spec.lambda, 0.3, 128);
    cfg.tol = 1e-11;
    auto first = solve_first_order(*F, *F_T, identity_field(mp), mp, grid, cfg);
    auto xder = solve_x_derivative(first, *F, *F_T, mp, cfg);
    auto bars = solve_measure_derivative(first, xder, *F, *F_T, mp, pidx, cfg);
    const Vec expected = lq_Zbar(ric, mp, 0.0, probe);
    for (int i = 0; i < m.size(); ++i)
      CHECK(bars.bar.Z[0](0, i, 0) == doctest::Approx(expected[0]).epsilon(0.04));
    // second bar system carries no coupling for quadratic costs
    CHECK(field_norm(bars.bar2.Z[0], mp) < 0.02);
  }
}

TEST_CASE("margin validation") {
  auto running = make_lq_functional(1, 1.0, 1.0);  // c = 2, c' = 0
  auto term = make_lq_functional(1, 1.0, 0.0);
  CHECK(validate_margins(*running, *term, 10.0, 1.0));       // both margins hold
  CHECK_FALSE(validate_margins(*running, *term, 2.0, 1.0));  // equation margin fails
  // convexity margin always holds for convex quadratics (c' = 0)
  auto cyl_a = (Mat(1, 1) << 1.0).finished();
  auto cyl = make_cylindrical_functional(1, cyl_a, (Vec(1) << 0.0).finished(),
                                         (Vec(1) << 1.0).finished(),
                                         (Mat(1, 1) << 1.0).finished());
  const double c_prime = cyl->declared_bounds().c_prime;
  CHECK(c_prime > 0.0);
  CHECK_THROWS(validate_margins(*cyl, *cyl, 0.5 * c_prime, 1.0));
}

TEST_CASE("riccati oracle: closed-form check points") {
  LQSpec fixed;
  fixed.q = 1.0;
  fixed.q_T = 1.0;
  fixed.lambda = 1.0;
  fixed.T = 1.0;
  auto ric = riccati_solve(fixed);
  for (double t : {0.0, 0.3, 0.9}) CHECK(ric.P(t) == doctest::Approx(1.0).epsilon(1e-10));

  LQSpec decay;
  decay.q = 0.0;
  decay.q_T = 1.0;
  decay.lambda = 1.0;
  decay.T = 1.0;
  auto ric2 = riccati_solve(decay);
  for (double t : {0.0, 0.5, 1.0})
    CHECK(ric2.P(t) == doctest::Approx(1.0 / (1.0 + decay.T - t)).epsilon(1e-9));

  LQSpec zr;
  zr.q = 0.7;
  zr.q_T = 0.4;
  zr.q_bar = 0.0;
  zr.q_bar_T = 0.0;
  zr.lambda = 1.3;
  zr.T = 0.8;
  auto ric3 = riccati_solve(zr);
  CHECK(ric3.R(0.0) == doctest::Approx(0.0));

  LQSpec blow;
  blow.q = -1e9;  // forces P' to explode backwards
  blow.q_T = 1.0;
  blow.lambda = 1.0;
  blow.T = 1.0;
  CHECK_THROWS_AS((void)riccati_solve(blow), std::domain_error);
}

TEST_CASE("riccati oracle vs fundamental-matrix shooting") {
  // mean system: y' = -z/lambda, z' = -q y, z(T) = q_T y(T) gives z/y = P
  auto shoot = [](double q, double qT, double lambda, double span) {
    const double om = std::sqrt(q / lambda);
    double M00, M01, M10, M11;
    if (q > 0) {
      M00 = std::cosh(om * span);
      M01 = -std::sinh(om * span) / (lambda * om);
      M10 = -q * std::sinh(om * span) / om;
      M11 = std::cosh(om * span);
    } else {
      M00 = 1.0;
      M01 = -span / lambda;
      M10 = 0.0;
      M11 = 1.0;
    }
    return -(M10 - qT * M00) / (M11 - qT * M01);
  };
  for (auto [q, qb, qT, qbT, lambda] :
       std::vector<std::array<double, 5>>{{0.9, 0.0, 0.7, 0.0, 1.4},
                                          {0.3, 0.5, 1.2, 0.2, 2.0},
                                          {0.0, 1.0, 0.0, 0.8, 1.1}}) {
    LQSpec spec;
    spec.q = q;
    spec.q_bar = qb;
    spec.q_T = qT;
    spec.q_bar_T = qbT;
    spec.lambda = lambda;
    spec.T = 1.0;
    auto ric = riccati_solve(spec);
    for (double t : {0.0, 0.42}) {
      CHECK(ric.P(t) == doctest::Approx(shoot(q, qT, lambda, spec.T - t)).epsilon(1e-9));
      CHECK(ric.P(t) + ric.R(t) ==
            doctest::Approx(shoot(q + qb, qT + qbT, lambda, spec.T - t)).epsilon(1e-9));
    }
  }
}

TEST_CASE("first-order solver matches the riccati oracle in z") {
  std::mt19937 gen(15);
  auto m = random_measure(gen, 8, 1, false, 0.7, 0.8);
  LQSpec spec;
  spec.q = 1.0;
  spec.q_bar = 0.5;
  spec.q_T = 0.6;
  spec.q_bar_T = 0.3;
  spec.lambda = 2.0;
  spec.sigma = 0.4 * Mat::Identity(1, 1);
  spec.T = 1.0;
  auto ric = riccati_solve(spec);
  auto cfg = basic_cfg(1, spec.lambda, 0.4, 512, 23);
  cfg.tol = 1e-10;
  TimeGrid grid{0.0, 1.0, 32};
  auto F = spec.running();
  auto F_T = spec.terminal();
  auto bundle = solve_first_order(*F, *F_T, identity_field(m), m, grid, cfg);
  REQUIRE(bundle.diag.converged);
  // Z(t) per starting atom = P(t) x + R(t) xbar
  const double P0 = ric.P(0.0), R0 = ric.R(0.0);
  const double xbar = m.mean()[0];
  for (int i = 0; i < m.size(); ++i) {
    const double expected = P0 * m.atoms()(i, 0) + R0 * xbar;
    CHECK(bundle.Z[0](0, i, 0) == doctest::Approx(expected).epsilon(0.03).scale(1.0));
  }
}
