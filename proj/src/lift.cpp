#include "mflab/lift.hpp"

#include <cmath>
#include <fstream>

namespace mflab {

LiftedField field_from_function(const EmpiricalMeasure& m,
                                const std::function<Vec(ConstVecRef)>& f) {
  LiftedField X(1, m.size(), m.dim(), m.id());
  for (int i = 0; i < m.size(); ++i) {
    Vec fi = f(m.atom(i));
    require(fi.size() == m.dim(), "field function dimension mismatch");
    X.at(0, i) = fi;
  }
  require(X.all_finite(), "non-finite field value");
  return X;
}

LiftedField identity_field(const EmpiricalMeasure& m) {
  return field_from_function(m, [](ConstVecRef x) { return Vec(x); });
}

LiftedField constant_field(const EmpiricalMeasure& m, ConstVecRef a) {
  LiftedField X(1, m.size(), m.dim(), m.id());
  for (int i = 0; i < m.size(); ++i) X.at(0, i) = a;
  return X;
}

LiftedField random_normal_field(const EmpiricalMeasure& m, int outcomes,
                                const CounterRng& rng, uint64_t slot) {
  LiftedField X(outcomes, m.size(), m.dim(), m.id());
  for (int w = 0; w < outcomes; ++w)
    for (int i = 0; i < m.size(); ++i)
      for (int c = 0; c < m.dim(); ++c)
        X(w, i, c) = rng.normal(Stream::kField, slot,
                                static_cast<uint64_t>(w) * m.size() + i, c);
  return X;
}

double inner(const LiftedField& X, const LiftedField& Y, const EmpiricalMeasure& m) {
  require(X.measure_tag() == Y.measure_tag() && X.measure_tag() == m.id(),
          "inner: measure mismatch");
  require(X.atoms() == m.size() && Y.atoms() == m.size(), "inner: atom count mismatch");
  require(X.comps() == Y.comps(), "inner: component mismatch");
  require(X.outcomes() == Y.outcomes() || X.outcomes() == 1 || Y.outcomes() == 1,
          "inner: outcome counts not broadcastable");
  const int M = std::max(X.outcomes(), Y.outcomes());
  double acc = 0.0;
  for (int w = 0; w < M; ++w)
    for (int i = 0; i < m.size(); ++i)
      acc += m.weights()[i] * X.at(X.wrap(w), i).dot(Y.at(Y.wrap(w), i));
  return acc / M;
}

double field_norm(const LiftedField& X, const EmpiricalMeasure& m) {
  return std::sqrt(std::max(0.0, inner(X, X, m)));
}

LiftedField axpy(double a, const LiftedField& X, const LiftedField& Y) {
  require(X.measure_tag() == Y.measure_tag(), "axpy: measure mismatch");
  require(X.comps() == Y.comps() && X.atoms() == Y.atoms(), "axpy: shape mismatch");
  const int M = std::max(X.outcomes(), Y.outcomes());
  LiftedField Z(M, X.atoms(), X.comps(), X.measure_tag());
  for (int w = 0; w < M; ++w)
    for (int i = 0; i < X.atoms(); ++i)
      for (int c = 0; c < X.comps(); ++c)
        Z(w, i, c) = a * X(X.wrap(w), i, c) + Y(Y.wrap(w), i, c);
  return Z;
}

EmpiricalMeasure tensor(const LiftedField& X, const EmpiricalMeasure& m) {
  require(X.measure_tag() == m.id(), "tensor: field not attached to this measure");
  require(X.atoms() == m.size() && X.comps() == m.dim(), "tensor: shape mismatch");
  const int M = X.outcomes(), N = m.size(), d = m.dim();
  Mat atoms(static_cast<Eigen::Index>(M) * N, d);
  Vec w(static_cast<Eigen::Index>(M) * N);
  for (int wo = 0; wo < M; ++wo)
    for (int i = 0; i < N; ++i) {
      atoms.row(static_cast<Eigen::Index>(wo) * N + i) = X.at(wo, i).transpose();
      w[static_cast<Eigen::Index>(wo) * N + i] = m.weights()[i] / M;
    }
  return EmpiricalMeasure(std::move(atoms), std::move(w));
}

LiftedField compose(const FieldFunction& X, const LiftedField& Y) {
  LiftedField Z(Y.outcomes(), Y.atoms(), Y.comps(), Y.measure_tag());
  for (int w = 0; w < Y.outcomes(); ++w)
    for (int i = 0; i < Y.atoms(); ++i) {
      Vec v = X(w, Y.at(w, i));
      require(v.size() == Y.comps(), "compose: component mismatch");
      Z.at(w, i) = v;
    }
  require(Z.all_finite(), "compose: non-finite value");
  return Z;
}

GaussianProbe GaussianProbe::draw(int outcomes, int d, const CounterRng& rng,
                                  uint64_t slot) {
  GaussianProbe p;
  p.seed = rng.seed();
  p.samples.resize(outcomes, d);
  for (int w = 0; w < outcomes; ++w)
    for (int c = 0; c < d; ++c)
      p.samples(w, c) = rng.normal(Stream::kProbe, slot, static_cast<uint64_t>(w), c);
  return p;
}

bool GaussianProbe::plausible() const {
  const int M = static_cast<int>(samples.rows());
  const int d = static_cast<int>(samples.cols());
  const double tol = 3.0 / std::sqrt(static_cast<double>(M));
  Vec mean = samples.colwise().mean();
  if (mean.cwiseAbs().maxCoeff() > tol) return false;
  Mat cov = (samples.transpose() * samples) / M - mean * mean.transpose();
  return (cov - Mat::Identity(d, d)).cwiseAbs().maxCoeff() <= 3.0 * tol;
}

LiftedField probe_field(const GaussianProbe& probe, const EmpiricalMeasure& m) {
  const int M = static_cast<int>(probe.samples.rows());
  require(probe.samples.cols() == m.dim(), "probe dimension mismatch");
  LiftedField X(M, m.size(), m.dim(), m.id());
  for (int w = 0; w < M; ++w)
    for (int i = 0; i < m.size(); ++i)
      X.at(w, i) = probe.samples.row(w).transpose();
  return X;
}

void save_field_csv(const LiftedField& X, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write field csv: " + path);
  out.precision(17);
  out << "outcome,atom";
  for (int c = 0; c < X.comps(); ++c) out << ",v_" << (c + 1);
  out << "\n";
  for (int w = 0; w < X.outcomes(); ++w)
    for (int i = 0; i < X.atoms(); ++i) {
      out << w << "," << i;
      for (int c = 0; c < X.comps(); ++c) out << "," << X(w, i, c);
      out << "\n";
    }
}

}  // namespace mflab
