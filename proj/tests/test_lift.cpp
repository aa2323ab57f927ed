#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <random>

#include "mflab/lift.hpp"
#include "support/test_oracles.hpp"

using namespace mflab;
using mflab::testing::random_measure;

namespace {

LiftedField random_field(std::mt19937& gen, const EmpiricalMeasure& m, int M) {
  std::normal_distribution<double> dist(0.0, 1.0);
  LiftedField X(M, m.size(), m.dim(), m.id());
  for (int w = 0; w < M; ++w)
    for (int i = 0; i < m.size(); ++i)
      for (int c = 0; c < m.dim(); ++c) X(w, i, c) = dist(gen);
  return X;
}

// multiset equality of weighted atom clouds
bool same_cloud(const EmpiricalMeasure& a, const EmpiricalMeasure& b) {
  if (a.size() != b.size() || a.dim() != b.dim()) return false;
  auto key = [](const EmpiricalMeasure& m) {
    std::vector<std::pair<std::vector<double>, double>> rows;
    for (int i = 0; i < m.size(); ++i) {
      std::vector<double> r(static_cast<size_t>(m.dim()));
      for (int c = 0; c < m.dim(); ++c) r[static_cast<size_t>(c)] = m.atoms()(i, c);
      rows.emplace_back(r, m.weights()[i]);
    }
    std::sort(rows.begin(), rows.end());
    return rows;
  };
  auto ra = key(a), rb = key(b);
  for (size_t i = 0; i < ra.size(); ++i) {
    for (size_t c = 0; c < ra[i].first.size(); ++c)
      if (std::abs(ra[i].first[c] - rb[i].first[c]) > 1e-12) return false;
    if (std::abs(ra[i].second - rb[i].second) > 1e-12) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("inner product basics") {
  std::mt19937 gen(5);
  auto m = random_measure(gen, 6, 2);
  auto zero = constant_field(m, Vec::Zero(2));
  auto Y = random_field(gen, m, 4);
  CHECK(inner(zero, Y, m) == doctest::Approx(0.0));

  Vec e1(2);
  e1 << 1.0, 0.0;
  auto E = constant_field(m, e1);
  CHECK(inner(E, E, m) == doctest::Approx(1.0));

  auto m1 = make_empirical((Mat(2, 1) << 0.0, 2.0).finished());
  auto X = identity_field(m1);
  CHECK(inner(X, X, m1) == doctest::Approx(2.0));
}

TEST_CASE("inner rejects measure mismatch") {
  std::mt19937 gen(6);
  auto m1 = random_measure(gen, 4, 1);
  auto m2 = random_measure(gen, 4, 1);
  auto X = identity_field(m1);
  auto Y = identity_field(m2);
  CHECK_THROWS(inner(X, Y, m1));
}

TEST_CASE("tensor push-forwards") {
  auto m = make_empirical((Mat(2, 1) << 0.0, 1.0).finished());

  auto X = identity_field(m);
  CHECK(same_cloud(tensor(X, m), m));

  Vec a(1);
  a << 4.0;
  auto C = constant_field(m, a);
  auto pushed = tensor(C, m);
  for (int i = 0; i < pushed.size(); ++i)
    CHECK(pushed.atoms()(i, 0) == doctest::Approx(4.0));

  auto D = field_from_function(m, [](ConstVecRef x) { return Vec(2.0 * x); });
  auto doubled = tensor(D, m);
  CHECK(same_cloud(doubled, make_empirical((Mat(2, 1) << 0.0, 2.0).finished())));
}

TEST_CASE("compose basics") {
  auto m = make_empirical((Mat(2, 1) << 0.0, 1.0).finished());
  auto Y = field_from_function(m, [](ConstVecRef x) { return Vec(2.0 * x); });
  FieldFunction shift = [](int, ConstVecRef y) { return Vec(y.array() + 1.0); };
  auto Z = compose(shift, Y);
  CHECK(Z(0, 0, 0) == doctest::Approx(1.0));
  CHECK(Z(0, 1, 0) == doctest::Approx(3.0));

  FieldFunction ident = [](int, ConstVecRef y) { return Vec(y); };
  auto same = compose(ident, Y);
  CHECK(same(0, 1, 0) == doctest::Approx(Y(0, 1, 0)));
}

TEST_CASE("push-forward associativity (X o Y) tensor m == X tensor (Y tensor m)") {
  std::mt19937 gen(7);
  for (int rep = 0; rep < 10; ++rep) {
    const int d = 1 + rep % 2;
    auto m = random_measure(gen, 2 + rep % 4, d);
    auto Y = random_field(gen, m, 1 + rep % 3);
    Mat A = Mat::Random(d, d);
    Vec b = Vec::Random(d);
    FieldFunction X = [&](int, ConstVecRef y) { return Vec(A * y + b); };

    auto lhs = tensor(compose(X, Y), m);
    auto inner_m = tensor(Y, m);
    LiftedField Xinner(1, inner_m.size(), d, inner_m.id());
    for (int i = 0; i < inner_m.size(); ++i) Xinner.at(0, i) = A * inner_m.atom(i) + b;
    auto rhs = tensor(Xinner, inner_m);
    CHECK(same_cloud(lhs, rhs));
  }
}

TEST_CASE("lift is 1-Lipschitz into W2") {
  std::mt19937 gen(8);
  for (int rep = 0; rep < 15; ++rep) {
    const int d = 1 + rep % 2;
    auto m = random_measure(gen, 2 + rep % 4, d);
    const int M = 1 + rep % 3;
    auto X = random_field(gen, m, M);
    auto Y = random_field(gen, m, M);
    const double w2 = w2_distance(tensor(X, m), tensor(Y, m));
    const double dist = field_norm(axpy(-1.0, Y, X), m);
    CHECK(w2 <= dist + 1e-9);
  }
}

TEST_CASE("Cauchy-Schwarz") {
  std::mt19937 gen(9);
  for (int rep = 0; rep < 15; ++rep) {
    auto m = random_measure(gen, 3 + rep % 4, 1 + rep % 2);
    auto X = random_field(gen, m, 2);
    auto Y = random_field(gen, m, 2);
    CHECK(std::abs(inner(X, Y, m)) <=
          field_norm(X, m) * field_norm(Y, m) + 1e-12);
  }
}

TEST_CASE("gaussian probe sanity") {
  CounterRng rng(123);
  auto m = make_empirical((Mat(2, 2) << 0, 0, 1, 1).finished());
  auto probe = GaussianProbe::draw(4096, 2, rng, 0);
  CHECK(probe.plausible());
  auto N = probe_field(probe, m);
  CHECK(N.outcomes() == 4096);
  CHECK(N(5, 0, 0) == doctest::Approx(N(5, 1, 0)));
}

TEST_CASE("deterministic replay of counter rng") {
  CounterRng a(77), b(77), c(78);
  CHECK(a.normal(Stream::kBrownian, 1, 2, 3) == b.normal(Stream::kBrownian, 1, 2, 3));
  CHECK(a.normal(Stream::kBrownian, 1, 2, 3) != c.normal(Stream::kBrownian, 1, 2, 3));
  CHECK(a.normal(Stream::kBrownian, 1, 2, 3) != a.normal(Stream::kField, 1, 2, 3));
  // moments of the stream
  double s = 0, s2 = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double z = a.normal(Stream::kField, 9, static_cast<uint64_t>(i), 0);
    s += z;
    s2 += z * z;
  }
  CHECK(std::abs(s / n) < 3.0 / std::sqrt(static_cast<double>(n)));
  CHECK(std::abs(s2 / n - 1.0) < 5.0 / std::sqrt(static_cast<double>(n)));
}
