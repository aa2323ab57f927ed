#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <random>

#include "mflab/measure.hpp"
#include "support/test_oracles.hpp"

using namespace mflab;
using mflab::testing::brute_force_w2;
using mflab::testing::random_measure;

namespace {
Mat points1d(std::initializer_list<double> xs) {
  Mat p(static_cast<int>(xs.size()), 1);
  int i = 0;
  for (double x : xs) p(i++, 0) = x;
  return p;
}
}  // namespace

TEST_CASE("make_empirical defaults and normalization") {
  auto m = make_empirical(points1d({0.0, 1.0}));
  CHECK(m.weights()[0] == doctest::Approx(0.5));
  CHECK(m.weights()[1] == doctest::Approx(0.5));

  Mat p(1, 2);
  p << 2.0, 3.0;
  Vec w(1);
  w << 5.0;
  auto single = make_empirical(p, w);
  CHECK(single.weights()[0] == doctest::Approx(1.0));

  Vec w2(2);
  w2 << 1.0, 3.0;
  auto mm = make_empirical(points1d({0.0, 0.0}), w2);
  CHECK(mm.weights()[0] == doctest::Approx(0.25));
  CHECK(mm.weights()[1] == doctest::Approx(0.75));

  CHECK(std::abs(mm.weights().sum() - 1.0) < 1e-12);
}

TEST_CASE("make_empirical rejects bad input") {
  Mat empty(0, 1);
  CHECK_THROWS(make_empirical(empty));
  Vec w(2);
  w << -0.1, 1.0;
  CHECK_THROWS(make_empirical(points1d({0.0, 1.0}), w));
  Vec wz = Vec::Zero(2);
  CHECK_THROWS(make_empirical(points1d({0.0, 1.0}), wz));
}

TEST_CASE("w2 on forced couplings") {
  auto da = make_empirical(points1d({1.5}));
  auto db = make_empirical(points1d({-2.0}));
  CHECK(w2_distance(da, db) == doctest::Approx(3.5));

  auto m = make_empirical(points1d({0.0, 2.0}));
  CHECK(w2_distance(m, m) == doctest::Approx(0.0));

  auto nu = make_empirical(points1d({1.0, 3.0}));
  CHECK(w2_distance(m, nu) == doctest::Approx(1.0));
  CHECK(brute_force_w2(m, nu) == doctest::Approx(1.0));
}

TEST_CASE("dimension mismatch rejected") {
  auto m1 = make_empirical(points1d({0.0}));
  Mat p(1, 2);
  p << 0.0, 0.0;
  auto m2 = make_empirical(p);
  CHECK_THROWS(w2_distance(m1, m2));
}

TEST_CASE("metric axioms on random pairs") {
  std::mt19937 gen(11);
  for (int rep = 0; rep < 30; ++rep) {
    const int d = 1 + rep % 2;
    auto a = random_measure(gen, 2 + rep % 5, d);
    auto b = random_measure(gen, 3 + rep % 4, d);
    auto c = random_measure(gen, 2 + (rep + 1) % 5, d);
    const double ab = w2_distance(a, b);
    const double ba = w2_distance(b, a);
    const double ac = w2_distance(a, c);
    const double cb = w2_distance(c, b);
    CHECK(ab >= 0.0);
    CHECK(std::abs(ab - ba) < 1e-9);
    CHECK(w2_distance(a, a) < 1e-9);
    CHECK(ab <= ac + cb + 1e-9);
  }
}

TEST_CASE("sorted-quantile route matches transport route in d=1") {
  std::mt19937 gen(22);
  for (int rep = 0; rep < 25; ++rep) {
    const int n = 2 + rep % 31;
    auto a = random_measure(gen, n, 1, rep % 2 == 0);
    auto b = random_measure(gen, n, 1, rep % 2 == 0);
    CHECK(std::abs(w2_sorted_1d(a, b) - w2_transport(a, b)) < 1e-9);
  }
}

TEST_CASE("transport route matches exhaustive enumeration on tiny instances") {
  std::mt19937 gen(33);
  for (int rep = 0; rep < 20; ++rep) {
    const int d = 1 + rep % 2;
    auto a = random_measure(gen, 2 + rep % 3, d);
    auto b = random_measure(gen, 2 + (rep + 1) % 3, d);
    CHECK(w2_transport(a, b) == doctest::Approx(brute_force_w2(a, b)).epsilon(1e-9));
  }
}

TEST_CASE("integrate") {
  auto m = make_empirical(points1d({0.0, 2.0}));
  CHECK(integrate_scalar(m, [](ConstVecRef) { return 1.0; }) == doctest::Approx(1.0));
  CHECK(integrate_scalar(m, [](ConstVecRef x) { return x[0]; }) == doctest::Approx(1.0));
  CHECK(integrate_scalar(m, [](ConstVecRef x) { return x.squaredNorm(); }) ==
        doctest::Approx(2.0));
  CHECK_THROWS(integrate_scalar(m, [](ConstVecRef x) { return 1.0 / x[0]; }));
}

TEST_CASE("csv round trip") {
  std::mt19937 gen(44);
  auto m = random_measure(gen, 7, 2);
  const std::string path = "measure_roundtrip_test.csv";
  save_measure_csv(m, path);
  auto loaded = load_measure_csv(path);
  CHECK((loaded.atoms() - m.atoms()).cwiseAbs().maxCoeff() < 1e-14);
  CHECK((loaded.weights() - m.weights()).cwiseAbs().maxCoeff() < 1e-14);
  std::remove(path.c_str());
}

TEST_CASE("mix and zero-weight atoms") {
  auto m = make_empirical(points1d({0.0}));
  auto mp = make_empirical(points1d({1.0}));
  auto mixed = mix(m, mp, 0.25);
  CHECK(mixed.size() == 2);
  CHECK(mixed.weights()[0] == doctest::Approx(0.75));
  CHECK(mixed.weights()[1] == doctest::Approx(0.25));

  Vec probe(1);
  probe << 9.0;
  auto aug = with_zero_weight_atom(m, probe);
  CHECK(aug.size() == 2);
  CHECK(aug.weights()[1] == 0.0);
  CHECK(aug.mean()[0] == doctest::Approx(0.0));
}
