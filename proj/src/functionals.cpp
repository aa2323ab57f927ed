#include "mflab/functionals.hpp"

#include <cmath>
#include <fstream>

#include "mflab/parallel.hpp"

namespace mflab {

Tensor3 FunctionalModel::third_delta(const EmpiricalMeasure&, ConstVecRef) const {
  throw std::logic_error(name() + ": third-order tier not available");
}
Mat FunctionalModel::d1sq_delta2(const EmpiricalMeasure&, ConstVecRef, ConstVecRef) const {
  throw std::logic_error(name() + ": third-order tier not available");
}
Tensor3 FunctionalModel::d1sq_d2_delta2(const EmpiricalMeasure&, ConstVecRef,
                                        ConstVecRef) const {
  throw std::logic_error(name() + ": third-order tier not available");
}

namespace {

// pairs (value point, companion row) of the lifted ensemble, used by the
// generic population contractions
struct EnsembleView {
  const LiftedField* Y;
  const EmpiricalMeasure* m;
  int pair_outcomes(const LiftedField& Z) const {
    return std::max(Y->outcomes(), Z.outcomes());
  }
};

}  // namespace

void FunctionalModel::delta_field(const LiftedField& Y, const EmpiricalMeasure& m,
                                  LiftedField& out) const {
  const EmpiricalMeasure mu = tensor(Y, m);
  out = LiftedField(Y.outcomes(), Y.atoms(), 1, m.id());
  for (int w = 0; w < Y.outcomes(); ++w)
    for (int i = 0; i < Y.atoms(); ++i) out(w, i, 0) = delta(mu, Y.at(w, i));
}

void FunctionalModel::grad_delta_field(const LiftedField& Y, const EmpiricalMeasure& m,
                                       LiftedField& out) const {
  const EmpiricalMeasure mu = tensor(Y, m);
  out = LiftedField(Y.outcomes(), Y.atoms(), dim(), m.id());
  for (int w = 0; w < Y.outcomes(); ++w)
    for (int i = 0; i < Y.atoms(); ++i) out.at(w, i) = grad_delta(mu, Y.at(w, i));
}

void FunctionalModel::hess_delta_field(const LiftedField& Y, const EmpiricalMeasure& m,
                                       LiftedField& out) const {
  const EmpiricalMeasure mu = tensor(Y, m);
  const int d = dim();
  out = LiftedField(Y.outcomes(), Y.atoms(), d * d, m.id());
  for (int w = 0; w < Y.outcomes(); ++w)
    for (int i = 0; i < Y.atoms(); ++i)
      out.set_matrix_at(w, i, d, hess_delta(mu, Y.at(w, i)));
}

void FunctionalModel::d2d1_contract_field(const LiftedField& Y, const EmpiricalMeasure& m,
                                          const LiftedField& Z, LiftedField& out) const {
  const EmpiricalMeasure mu = tensor(Y, m);
  const int d = dim();
  const int Mp = std::max(Y.outcomes(), Z.outcomes());
  out = LiftedField(Y.outcomes(), Y.atoms(), d, m.id());
  for (int w = 0; w < Y.outcomes(); ++w)
    for (int i = 0; i < Y.atoms(); ++i) {
      Vec acc = Vec::Zero(d);
      for (int wt = 0; wt < Mp; ++wt)
        for (int j = 0; j < Y.atoms(); ++j) {
          if (m.weights()[j] == 0.0) continue;
          acc += (m.weights()[j] / Mp) *
                 (d2d1_delta2(mu, Y.at(w, i), Y.at(Y.wrap(wt), j)) * Z.at(Z.wrap(wt), j));
        }
      out.at(w, i) = acc;
    }
}

void FunctionalModel::d1_avg_field(const LiftedField& Y, const EmpiricalMeasure& m,
                                   const Mat& probe_paths, LiftedField& out) const {
  const EmpiricalMeasure mu = tensor(Y, m);
  const int d = dim();
  const int Mp = static_cast<int>(probe_paths.rows());
  out = LiftedField(Y.outcomes(), Y.atoms(), d, m.id());
  for (int w = 0; w < Y.outcomes(); ++w)
    for (int i = 0; i < Y.atoms(); ++i) {
      Vec acc = Vec::Zero(d);
      for (int wt = 0; wt < Mp; ++wt)
        acc += d1_delta2(mu, Y.at(w, i), probe_paths.row(wt).transpose());
      out.at(w, i) = acc / Mp;
    }
}

void FunctionalModel::third_contract_field(const LiftedField& Y, const EmpiricalMeasure& m,
                                           const LiftedField& Zvec, LiftedField& out) const {
  const EmpiricalMeasure mu = tensor(Y, m);
  const int d = dim();
  out = LiftedField(Y.outcomes(), Y.atoms(), d * d, m.id());
  for (int w = 0; w < Y.outcomes(); ++w)
    for (int i = 0; i < Y.atoms(); ++i)
      out.set_matrix_at(w, i, d,
                        third_delta(mu, Y.at(w, i)).contract(Zvec.at(Zvec.wrap(w), i)));
}

void FunctionalModel::d1sq_avg_field(const LiftedField& Y, const EmpiricalMeasure& m,
                                     const Mat& probe_paths, LiftedField& out) const {
  const EmpiricalMeasure mu = tensor(Y, m);
  const int d = dim();
  const int Mp = static_cast<int>(probe_paths.rows());
  out = LiftedField(Y.outcomes(), Y.atoms(), d * d, m.id());
  for (int w = 0; w < Y.outcomes(); ++w)
    for (int i = 0; i < Y.atoms(); ++i) {
      Mat acc = Mat::Zero(d, d);
      for (int wt = 0; wt < Mp; ++wt)
        acc += d1sq_delta2(mu, Y.at(w, i), probe_paths.row(wt).transpose());
      out.set_matrix_at(w, i, d, acc / Mp);
    }
}

void FunctionalModel::d1sq_d2_contract_field(const LiftedField& Y,
                                             const EmpiricalMeasure& m,
                                             const LiftedField& Zvec,
                                             LiftedField& out) const {
  const EmpiricalMeasure mu = tensor(Y, m);
  const int d = dim();
  const int Mp = std::max(Y.outcomes(), Zvec.outcomes());
  out = LiftedField(Y.outcomes(), Y.atoms(), d * d, m.id());
  for (int w = 0; w < Y.outcomes(); ++w)
    for (int i = 0; i < Y.atoms(); ++i) {
      Mat acc = Mat::Zero(d, d);
      for (int wt = 0; wt < Mp; ++wt)
        for (int j = 0; j < Y.atoms(); ++j) {
          if (m.weights()[j] == 0.0) continue;
          const Tensor3 t = d1sq_d2_delta2(mu, Y.at(w, i), Y.at(Y.wrap(wt), j));
          acc += (m.weights()[j] / Mp) * t.contract(Zvec.at(Zvec.wrap(wt), j));
        }
      out.set_matrix_at(w, i, d, acc);
    }
}

// ---------------------------------------------------------------------------
// LQ family
// ---------------------------------------------------------------------------

namespace {

// weighted ensemble mean of a lifted field
Vec ensemble_mean(const LiftedField& Y, const EmpiricalMeasure& m) {
  Vec mean = Vec::Zero(Y.comps());
  for (int w = 0; w < Y.outcomes(); ++w)
    for (int i = 0; i < Y.atoms(); ++i) mean += m.weights()[i] * Y.at(w, i);
  return mean / Y.outcomes();
}

double ensemble_second_moment(const LiftedField& Y, const EmpiricalMeasure& m) {
  double s = 0.0;
  for (int w = 0; w < Y.outcomes(); ++w)
    for (int i = 0; i < Y.atoms(); ++i) s += m.weights()[i] * Y.at(w, i).squaredNorm();
  return s / Y.outcomes();
}

class LqFunctional final : public FunctionalModel {
public:
  LqFunctional(int dim, double q, double q_bar) : d_(dim), q_(q), qb_(q_bar) {
    require(q >= 0.0 && q_bar >= 0.0, "lq functional expects q, q_bar >= 0");
  }

  std::string name() const override { return "lq"; }
  int dim() const override { return d_; }

  double value(const EmpiricalMeasure& m) const override {
    return 0.5 * q_ * m.second_moment() + 0.5 * qb_ * m.mean().squaredNorm();
  }
  double delta(const EmpiricalMeasure& m, ConstVecRef x) const override {
    const Vec mean = m.mean();
    return 0.5 * q_ * x.squaredNorm() + qb_ * mean.dot(x) -
           (0.5 * q_ * m.second_moment() + qb_ * mean.squaredNorm());
  }
  Vec grad_delta(const EmpiricalMeasure& m, ConstVecRef x) const override {
    return q_ * x + qb_ * m.mean();
  }
  Mat hess_delta(const EmpiricalMeasure&, ConstVecRef) const override {
    return q_ * Mat::Identity(d_, d_);
  }
  double delta2(const EmpiricalMeasure& m, ConstVecRef x, ConstVecRef xt) const override {
    const Vec mean = m.mean();
    return qb_ * (x - mean).dot(xt - mean);
  }
  Vec d1_delta2(const EmpiricalMeasure& m, ConstVecRef, ConstVecRef xt) const override {
    return qb_ * (xt - m.mean());
  }
  Mat d2d1_delta2(const EmpiricalMeasure&, ConstVecRef, ConstVecRef) const override {
    return qb_ * Mat::Identity(d_, d_);
  }

  bool has_sc_tier() const override { return true; }
  Tensor3 third_delta(const EmpiricalMeasure&, ConstVecRef) const override {
    return Tensor3(d_);
  }
  Mat d1sq_delta2(const EmpiricalMeasure&, ConstVecRef, ConstVecRef) const override {
    return Mat::Zero(d_, d_);
  }
  Tensor3 d1sq_d2_delta2(const EmpiricalMeasure&, ConstVecRef, ConstVecRef) const override {
    return Tensor3(d_);
  }

  AssumptionBounds declared_bounds() const override {
    return {q_ + qb_, 0.0, 0.5 * (q_ + qb_)};
  }

  void delta_field(const LiftedField& Y, const EmpiricalMeasure& m,
                   LiftedField& out) const override {
    const Vec mean = ensemble_mean(Y, m);
    const double s2 = ensemble_second_moment(Y, m);
    const double shift = 0.5 * q_ * s2 + qb_ * mean.squaredNorm();
    out = LiftedField(Y.outcomes(), Y.atoms(), 1, m.id());
    for (int w = 0; w < Y.outcomes(); ++w)
      for (int i = 0; i < Y.atoms(); ++i)
        out(w, i, 0) =
            0.5 * q_ * Y.at(w, i).squaredNorm() + qb_ * mean.dot(Y.at(w, i)) - shift;
  }
  void grad_delta_field(const LiftedField& Y, const EmpiricalMeasure& m,
                        LiftedField& out) const override {
    const Vec drift = qb_ * ensemble_mean(Y, m);
    out = LiftedField(Y.outcomes(), Y.atoms(), d_, m.id());
    for (int w = 0; w < Y.outcomes(); ++w)
      for (int i = 0; i < Y.atoms(); ++i) out.at(w, i) = q_ * Y.at(w, i) + drift;
  }
  void hess_delta_field(const LiftedField& Y, const EmpiricalMeasure& m,
                        LiftedField& out) const override {
    out = LiftedField(1, Y.atoms(), d_ * d_, m.id());
    const Mat h = q_ * Mat::Identity(d_, d_);
    for (int i = 0; i < Y.atoms(); ++i) out.set_matrix_at(0, i, d_, h);
  }
  void d2d1_contract_field(const LiftedField& Y, const EmpiricalMeasure& m,
                           const LiftedField& Z, LiftedField& out) const override {
    const Vec zbar = qb_ * ensemble_mean(Z, m);
    out = LiftedField(1, Y.atoms(), d_, m.id());
    for (int i = 0; i < Y.atoms(); ++i) out.at(0, i) = zbar;
  }
  void d1_avg_field(const LiftedField& Y, const EmpiricalMeasure& m,
                    const Mat& probe_paths, LiftedField& out) const override {
    const Vec avg =
        qb_ * (probe_paths.colwise().mean().transpose() - ensemble_mean(Y, m));
    out = LiftedField(1, Y.atoms(), d_, m.id());
    for (int i = 0; i < Y.atoms(); ++i) out.at(0, i) = avg;
  }
  void third_contract_field(const LiftedField& Y, const EmpiricalMeasure& m,
                            const LiftedField&, LiftedField& out) const override {
    out = LiftedField(1, Y.atoms(), d_ * d_, m.id());
  }
  void d1sq_avg_field(const LiftedField& Y, const EmpiricalMeasure& m, const Mat&,
                      LiftedField& out) const override {
    out = LiftedField(1, Y.atoms(), d_ * d_, m.id());
  }
  void d1sq_d2_contract_field(const LiftedField& Y, const EmpiricalMeasure& m,
                              const LiftedField&, LiftedField& out) const override {
    out = LiftedField(1, Y.atoms(), d_ * d_, m.id());
  }

private:
  int d_;
  double q_, qb_;
};

// ---------------------------------------------------------------------------
// cylindrical family: phi(u) = l.u + u'Qu/2, u_i = int tanh(a_i.x + b_i) dm
// ---------------------------------------------------------------------------

class CylindricalFunctional final : public FunctionalModel {
public:
  CylindricalFunctional(int dim, Mat a, Vec b, Vec l, Mat Q)
      : d_(dim), a_(std::move(a)), b_(std::move(b)), l_(std::move(l)), Q_(std::move(Q)) {
    k_ = static_cast<int>(a_.rows());
    require(a_.cols() == d_, "cylindrical: a must be k x d");
    require(b_.size() == k_ && l_.size() == k_, "cylindrical: b,l must have k entries");
    require(Q_.rows() == k_ && Q_.cols() == k_, "cylindrical: Q must be k x k");
    require((Q_ - Q_.transpose()).cwiseAbs().maxCoeff() < 1e-12,
            "cylindrical: Q must be symmetric");
  }

  std::string name() const override { return "cylindrical"; }
  int dim() const override { return d_; }

  double value(const EmpiricalMeasure& m) const override {
    const Vec u = stats(m);
    return l_.dot(u) + 0.5 * u.dot(Q_ * u);
  }
  double delta(const EmpiricalMeasure& m, ConstVecRef x) const override {
    const Vec u = stats(m);
    const Vec phi = l_ + Q_ * u;
    double s = 0.0;
    for (int i = 0; i < k_; ++i) s += phi[i] * (g(i, x) - u[i]);
    return s;
  }
  Vec grad_delta(const EmpiricalMeasure& m, ConstVecRef x) const override {
    const Vec phi = l_ + Q_ * stats(m);
    Vec out = Vec::Zero(d_);
    for (int i = 0; i < k_; ++i) out += phi[i] * dg(i, x) * a_.row(i).transpose();
    return out;
  }
  Mat hess_delta(const EmpiricalMeasure& m, ConstVecRef x) const override {
    const Vec phi = l_ + Q_ * stats(m);
    Mat out = Mat::Zero(d_, d_);
    for (int i = 0; i < k_; ++i)
      out += phi[i] * ddg(i, x) * a_.row(i).transpose() * a_.row(i);
    return out;
  }
  double delta2(const EmpiricalMeasure& m, ConstVecRef x, ConstVecRef xt) const override {
    const Vec u = stats(m);
    double s = 0.0;
    for (int i = 0; i < k_; ++i)
      for (int j = 0; j < k_; ++j)
        s += Q_(i, j) * (g(i, x) - u[i]) * (g(j, xt) - u[j]);
    return s;
  }
  Vec d1_delta2(const EmpiricalMeasure& m, ConstVecRef x, ConstVecRef xt) const override {
    const Vec u = stats(m);
    Vec gj(k_);
    for (int j = 0; j < k_; ++j) gj[j] = g(j, xt) - u[j];
    const Vec coeff = Q_ * gj;
    Vec out = Vec::Zero(d_);
    for (int i = 0; i < k_; ++i) out += coeff[i] * dg(i, x) * a_.row(i).transpose();
    return out;
  }
  Mat d2d1_delta2(const EmpiricalMeasure&, ConstVecRef x, ConstVecRef xt) const override {
    Mat out = Mat::Zero(d_, d_);
    for (int i = 0; i < k_; ++i)
      for (int j = 0; j < k_; ++j)
        out += Q_(i, j) * dg(i, x) * dg(j, xt) * a_.row(i).transpose() * a_.row(j);
    return out;
  }

  bool has_sc_tier() const override { return true; }
  Tensor3 third_delta(const EmpiricalMeasure& m, ConstVecRef x) const override {
    const Vec phi = l_ + Q_ * stats(m);
    Tensor3 t(d_);
    for (int i = 0; i < k_; ++i) {
      const double w = phi[i] * dddg(i, x);
      const Vec ai = a_.row(i).transpose();
      for (int c = 0; c < d_; ++c) t.slice(c) += w * ai[c] * ai * ai.transpose();
    }
    return t;
  }
  Mat d1sq_delta2(const EmpiricalMeasure& m, ConstVecRef x, ConstVecRef xt) const override {
    const Vec u = stats(m);
    Vec gj(k_);
    for (int j = 0; j < k_; ++j) gj[j] = g(j, xt) - u[j];
    const Vec coeff = Q_ * gj;
    Mat out = Mat::Zero(d_, d_);
    for (int i = 0; i < k_; ++i)
      out += coeff[i] * ddg(i, x) * a_.row(i).transpose() * a_.row(i);
    return out;
  }
  Tensor3 d1sq_d2_delta2(const EmpiricalMeasure&, ConstVecRef x,
                         ConstVecRef xt) const override {
    Tensor3 t(d_);
    for (int i = 0; i < k_; ++i)
      for (int j = 0; j < k_; ++j) {
        const double w = Q_(i, j) * ddg(i, x) * dg(j, xt);
        const Vec ai = a_.row(i).transpose();
        const Vec aj = a_.row(j).transpose();
        for (int c = 0; c < d_; ++c) t.slice(c) += w * aj[c] * ai * ai.transpose();
      }
    return t;
  }

  AssumptionBounds declared_bounds() const override {
    // |u_i| <= 1, |g'| <= 1, |g''| <= 4/(3 sqrt 3) in the scalar argument
    double c_local = 0.0, c_mix = 0.0, phi_sup_total = 0.0;
    for (int i = 0; i < k_; ++i) {
      double phi_sup = std::abs(l_[i]);
      for (int j = 0; j < k_; ++j) phi_sup += std::abs(Q_(i, j));
      phi_sup_total += phi_sup;
      c_local += phi_sup * 0.76980035892 * a_.row(i).squaredNorm();
      for (int j = 0; j < k_; ++j)
        c_mix += std::abs(Q_(i, j)) * a_.row(i).norm() * a_.row(j).norm();
    }
    const double c = c_local + c_mix;
    double growth = l_.cwiseAbs().sum() + 0.5 * Q_.cwiseAbs().sum();
    return {c, c, growth};
  }

  void delta_field(const LiftedField& Y, const EmpiricalMeasure& m,
                   LiftedField& out) const override {
    const Vec u = field_stats(Y, m);
    const Vec phi = l_ + Q_ * u;
    out = LiftedField(Y.outcomes(), Y.atoms(), 1, m.id());
    for (int w = 0; w < Y.outcomes(); ++w)
      for (int i = 0; i < Y.atoms(); ++i) {
        double s = 0.0;
        for (int r = 0; r < k_; ++r) s += phi[r] * (g(r, Y.at(w, i)) - u[r]);
        out(w, i, 0) = s;
      }
  }
  void grad_delta_field(const LiftedField& Y, const EmpiricalMeasure& m,
                        LiftedField& out) const override {
    const Vec phi = l_ + Q_ * field_stats(Y, m);
    out = LiftedField(Y.outcomes(), Y.atoms(), d_, m.id());
    for (int w = 0; w < Y.outcomes(); ++w)
      for (int i = 0; i < Y.atoms(); ++i) {
        Vec acc = Vec::Zero(d_);
        for (int r = 0; r < k_; ++r)
          acc += phi[r] * dg(r, Y.at(w, i)) * a_.row(r).transpose();
        out.at(w, i) = acc;
      }
  }
  void hess_delta_field(const LiftedField& Y, const EmpiricalMeasure& m,
                        LiftedField& out) const override {
    const Vec phi = l_ + Q_ * field_stats(Y, m);
    out = LiftedField(Y.outcomes(), Y.atoms(), d_ * d_, m.id());
    for (int w = 0; w < Y.outcomes(); ++w)
      for (int i = 0; i < Y.atoms(); ++i) {
        Mat acc = Mat::Zero(d_, d_);
        for (int r = 0; r < k_; ++r)
          acc += phi[r] * ddg(r, Y.at(w, i)) * a_.row(r).transpose() * a_.row(r);
        out.set_matrix_at(w, i, d_, acc);
      }
  }
  void d2d1_contract_field(const LiftedField& Y, const EmpiricalMeasure& m,
                           const LiftedField& Z, LiftedField& out) const override {
    // beta_j = ensemble avg of g_j'(Y) a_j.Z ; out = sum_i g_i'(Y) a_i (Q beta)_i
    const Vec beta = contraction_stats(Y, m, Z);
    const Vec qbeta = Q_ * beta;
    out = LiftedField(Y.outcomes(), Y.atoms(), d_, m.id());
    for (int w = 0; w < Y.outcomes(); ++w)
      for (int i = 0; i < Y.atoms(); ++i) {
        Vec acc = Vec::Zero(d_);
        for (int r = 0; r < k_; ++r)
          acc += qbeta[r] * dg(r, Y.at(w, i)) * a_.row(r).transpose();
        out.at(w, i) = acc;
      }
  }
  void d1_avg_field(const LiftedField& Y, const EmpiricalMeasure& m,
                    const Mat& probe_paths, LiftedField& out) const override {
    const Vec u = field_stats(Y, m);
    Vec gamma = Vec::Zero(k_);
    for (int wt = 0; wt < probe_paths.rows(); ++wt)
      for (int r = 0; r < k_; ++r) gamma[r] += g(r, probe_paths.row(wt).transpose());
    gamma /= static_cast<double>(probe_paths.rows());
    gamma -= u;
    const Vec qgamma = Q_ * gamma;
    out = LiftedField(Y.outcomes(), Y.atoms(), d_, m.id());
    for (int w = 0; w < Y.outcomes(); ++w)
      for (int i = 0; i < Y.atoms(); ++i) {
        Vec acc = Vec::Zero(d_);
        for (int r = 0; r < k_; ++r)
          acc += qgamma[r] * dg(r, Y.at(w, i)) * a_.row(r).transpose();
        out.at(w, i) = acc;
      }
  }
  void third_contract_field(const LiftedField& Y, const EmpiricalMeasure& m,
                            const LiftedField& Zvec, LiftedField& out) const override {
    const Vec phi = l_ + Q_ * field_stats(Y, m);
    out = LiftedField(Y.outcomes(), Y.atoms(), d_ * d_, m.id());
    for (int w = 0; w < Y.outcomes(); ++w)
      for (int i = 0; i < Y.atoms(); ++i) {
        Mat acc = Mat::Zero(d_, d_);
        for (int r = 0; r < k_; ++r) {
          const Vec ar = a_.row(r).transpose();
          acc += phi[r] * dddg(r, Y.at(w, i)) * ar.dot(Zvec.at(Zvec.wrap(w), i)) * ar *
                 ar.transpose();
        }
        out.set_matrix_at(w, i, d_, acc);
      }
  }
  void d1sq_avg_field(const LiftedField& Y, const EmpiricalMeasure& m,
                      const Mat& probe_paths, LiftedField& out) const override {
    const Vec u = field_stats(Y, m);
    Vec gamma = Vec::Zero(k_);
    for (int wt = 0; wt < probe_paths.rows(); ++wt)
      for (int r = 0; r < k_; ++r) gamma[r] += g(r, probe_paths.row(wt).transpose());
    gamma /= static_cast<double>(probe_paths.rows());
    gamma -= u;
    const Vec qgamma = Q_ * gamma;
    out = LiftedField(Y.outcomes(), Y.atoms(), d_ * d_, m.id());
    for (int w = 0; w < Y.outcomes(); ++w)
      for (int i = 0; i < Y.atoms(); ++i) {
        Mat acc = Mat::Zero(d_, d_);
        for (int r = 0; r < k_; ++r)
          acc += qgamma[r] * ddg(r, Y.at(w, i)) * a_.row(r).transpose() * a_.row(r);
        out.set_matrix_at(w, i, d_, acc);
      }
  }
  void d1sq_d2_contract_field(const LiftedField& Y, const EmpiricalMeasure& m,
                              const LiftedField& Zvec, LiftedField& out) const override {
    const Vec beta = contraction_stats(Y, m, Zvec);
    const Vec qbeta = Q_ * beta;
    out = LiftedField(Y.outcomes(), Y.atoms(), d_ * d_, m.id());
    for (int w = 0; w < Y.outcomes(); ++w)
      for (int i = 0; i < Y.atoms(); ++i) {
        Mat acc = Mat::Zero(d_, d_);
        for (int r = 0; r < k_; ++r)
          acc += qbeta[r] * ddg(r, Y.at(w, i)) * a_.row(r).transpose() * a_.row(r);
        out.set_matrix_at(w, i, d_, acc);
      }
  }

private:
  double g(int i, ConstVecRef x) const { return std::tanh(a_.row(i).dot(x) + b_[i]); }
  double dg(int i, ConstVecRef x) const {
    const double t = g(i, x);
    return 1.0 - t * t;
  }
  double ddg(int i, ConstVecRef x) const {
    const double t = g(i, x);
    return -2.0 * t * (1.0 - t * t);
  }
  double dddg(int i, ConstVecRef x) const {
    const double t = g(i, x);
    return (1.0 - t * t) * (6.0 * t * t - 2.0);
  }
  Vec stats(const EmpiricalMeasure& m) const {
    Vec u = Vec::Zero(k_);
    for (int i = 0; i < m.size(); ++i)
      for (int r = 0; r < k_; ++r) u[r] += m.weights()[i] * g(r, m.atom(i));
    return u;
  }
  Vec field_stats(const LiftedField& Y, const EmpiricalMeasure& m) const {
    Vec u = Vec::Zero(k_);
    for (int w = 0; w < Y.outcomes(); ++w)
      for (int i = 0; i < Y.atoms(); ++i)
        for (int r = 0; r < k_; ++r) u[r] += m.weights()[i] * g(r, Y.at(w, i));
    return u / Y.outcomes();
  }
  Vec contraction_stats(const LiftedField& Y, const EmpiricalMeasure& m,
                        const LiftedField& Z) const {
    const int Mp = std::max(Y.outcomes(), Z.outcomes());
    Vec beta = Vec::Zero(k_);
    for (int w = 0; w < Mp; ++w)
      for (int i = 0; i < Y.atoms(); ++i)
        for (int r = 0; r < k_; ++r)
          beta[r] += m.weights()[i] * dg(r, Y.at(Y.wrap(w), i)) *
                     a_.row(r).dot(Z.at(Z.wrap(w), i));
    return beta / Mp;
  }

  int d_, k_;
  Mat a_;
  Vec b_, l_;
  Mat Q_;
};

// ---------------------------------------------------------------------------
// interaction energy with a Gaussian kernel
// ---------------------------------------------------------------------------

class InteractionFunctional final : public FunctionalModel {
public:
  InteractionFunctional(int dim, double amp, double rho) : d_(dim), amp_(amp), rho_(rho) {
    require(rho > 0.0, "interaction: rho must be positive");
  }

  std::string name() const override { return "interaction"; }
  int dim() const override { return d_; }

  double value(const EmpiricalMeasure& m) const override {
    double s = 0.0;
    for (int i = 0; i < m.size(); ++i)
      for (int j = 0; j < m.size(); ++j)
        s += m.weights()[i] * m.weights()[j] * kernel(m.atom(i) - m.atom(j));
    return 0.5 * s;
  }
  double delta(const EmpiricalMeasure& m, ConstVecRef x) const override {
    return conv(m, x) - 2.0 * value(m);
  }
  Vec grad_delta(const EmpiricalMeasure& m, ConstVecRef x) const override {
    Vec acc = Vec::Zero(d_);
    for (int i = 0; i < m.size(); ++i)
      acc += m.weights()[i] * kernel_grad(x - m.atom(i));
    return acc;
  }
  Mat hess_delta(const EmpiricalMeasure& m, ConstVecRef x) const override {
    Mat acc = Mat::Zero(d_, d_);
    for (int i = 0; i < m.size(); ++i)
      acc += m.weights()[i] * kernel_hess(x - m.atom(i));
    return acc;
  }
  double delta2(const EmpiricalMeasure& m, ConstVecRef x, ConstVecRef xt) const override {
    return kernel(x - xt) - conv(m, x) - conv(m, xt) + 2.0 * value(m);
  }
  Vec d1_delta2(const EmpiricalMeasure& m, ConstVecRef x, ConstVecRef xt) const override {
    return kernel_grad(x - xt) - grad_delta(m, x);
  }
  Mat d2d1_delta2(const EmpiricalMeasure&, ConstVecRef x, ConstVecRef xt) const override {
    return -kernel_hess(x - xt);
  }

  bool has_sc_tier() const override { return true; }
  Tensor3 third_delta(const EmpiricalMeasure& m, ConstVecRef x) const override {
    Tensor3 acc(d_);
    for (int i = 0; i < m.size(); ++i) {
      Tensor3 t = kernel_third(x - m.atom(i));
      t *= m.weights()[i];
      acc += t;
    }
    return acc;
  }
  Mat d1sq_delta2(const EmpiricalMeasure& m, ConstVecRef x, ConstVecRef xt) const override {
    return kernel_hess(x - xt) - hess_delta(m, x);
  }
  Tensor3 d1sq_d2_delta2(const EmpiricalMeasure&, ConstVecRef x,
                         ConstVecRef xt) const override {
    Tensor3 t = kernel_third(x - xt);
    t *= -1.0;
    return t;
  }

  AssumptionBounds declared_bounds() const override {
    const double c = 2.0 * amp_ / (rho_ * rho_);
    return {c, c, 0.5 * amp_};
  }

private:
  double kernel(ConstVecRef z) const {
    return amp_ * std::exp(-z.squaredNorm() / (2.0 * rho_ * rho_));
  }
  Vec kernel_grad(ConstVecRef z) const { return -(kernel(z) / (rho_ * rho_)) * z; }
  Mat kernel_hess(ConstVecRef z) const {
    const double r2 = rho_ * rho_;
    return (kernel(z) / r2) * (z * z.transpose() / r2 - Mat::Identity(d_, d_));
  }
  Tensor3 kernel_third(ConstVecRef z) const {
    const double r2 = rho_ * rho_;
    const double k = kernel(z) / (r2 * r2);
    Tensor3 t(d_);
    for (int c = 0; c < d_; ++c) {
      Mat s = Mat::Zero(d_, d_);
      for (int a = 0; a < d_; ++a)
        for (int b = 0; b < d_; ++b) {
          double v = 0.0;
          if (a == b) v += z[c];
          if (a == c) v += z[b];
          if (b == c) v += z[a];
          v -= z[a] * z[b] * z[c] / r2;
          s(a, b) = k * v;
        }
      t.slice(c) = s;
    }
    return t;
  }
  double conv(const EmpiricalMeasure& m, ConstVecRef x) const {
    double acc = 0.0;
    for (int i = 0; i < m.size(); ++i) acc += m.weights()[i] * kernel(x - m.atom(i));
    return acc;
  }

  int d_;
  double amp_, rho_;
};

class ZeroFunctional final : public FunctionalModel {
public:
  explicit ZeroFunctional(int dim) : d_(dim) {}
  std::string name() const override { return "zero"; }
  int dim() const override { return d_; }
  double value(const EmpiricalMeasure&) const override { return 0.0; }
  double delta(const EmpiricalMeasure&, ConstVecRef) const override { return 0.0; }
  Vec grad_delta(const EmpiricalMeasure&, ConstVecRef) const override {
    return Vec::Zero(d_);
  }
  Mat hess_delta(const EmpiricalMeasure&, ConstVecRef) const override {
    return Mat::Zero(d_, d_);
  }
  double delta2(const EmpiricalMeasure&, ConstVecRef, ConstVecRef) const override {
    return 0.0;
  }
  Vec d1_delta2(const EmpiricalMeasure&, ConstVecRef, ConstVecRef) const override {
    return Vec::Zero(d_);
  }
  Mat d2d1_delta2(const EmpiricalMeasure&, ConstVecRef, ConstVecRef) const override {
    return Mat::Zero(d_, d_);
  }
  bool has_sc_tier() const override { return true; }
  Tensor3 third_delta(const EmpiricalMeasure&, ConstVecRef) const override {
    return Tensor3(d_);
  }
  Mat d1sq_delta2(const EmpiricalMeasure&, ConstVecRef, ConstVecRef) const override {
    return Mat::Zero(d_, d_);
  }
  Tensor3 d1sq_d2_delta2(const EmpiricalMeasure&, ConstVecRef, ConstVecRef) const override {
    return Tensor3(d_);
  }
  AssumptionBounds declared_bounds() const override { return {0.0, 0.0, 0.0}; }

private:
  int d_;
};

class LinearFunctional final : public FunctionalModel {
public:
  explicit LinearFunctional(Vec a) : a_(std::move(a)) {}
  std::string name() const override { return "linear"; }
  int dim() const override { return static_cast<int>(a_.size()); }
  double value(const EmpiricalMeasure& m) const override { return a_.dot(m.mean()); }
  double delta(const EmpiricalMeasure& m, ConstVecRef x) const override {
    return a_.dot(x) - a_.dot(m.mean());
  }
  Vec grad_delta(const EmpiricalMeasure&, ConstVecRef) const override { return a_; }
  Mat hess_delta(const EmpiricalMeasure&, ConstVecRef) const override {
    return Mat::Zero(a_.size(), a_.size());
  }
  double delta2(const EmpiricalMeasure&, ConstVecRef, ConstVecRef) const override {
    return 0.0;
  }
  Vec d1_delta2(const EmpiricalMeasure&, ConstVecRef, ConstVecRef) const override {
    return Vec::Zero(a_.size());
  }
  Mat d2d1_delta2(const EmpiricalMeasure&, ConstVecRef, ConstVecRef) const override {
    return Mat::Zero(a_.size(), a_.size());
  }
  bool has_sc_tier() const override { return true; }
  Tensor3 third_delta(const EmpiricalMeasure&, ConstVecRef) const override {
    return Tensor3(static_cast<int>(a_.size()));
  }
  Mat d1sq_delta2(const EmpiricalMeasure&, ConstVecRef, ConstVecRef) const override {
    return Mat::Zero(a_.size(), a_.size());
  }
  Tensor3 d1sq_d2_delta2(const EmpiricalMeasure&, ConstVecRef, ConstVecRef) const override {
    return Tensor3(static_cast<int>(a_.size()));
  }
  AssumptionBounds declared_bounds() const override { return {0.0, 0.0, a_.norm()}; }

private:
  Vec a_;
};

}  // namespace

FunctionalPtr make_lq_functional(int dim, double q, double q_bar) {
  return std::make_shared<LqFunctional>(dim, q, q_bar);
}
FunctionalPtr make_cylindrical_functional(int dim, const Mat& a, const Vec& b,
                                          const Vec& l, const Mat& Q) {
  return std::make_shared<CylindricalFunctional>(dim, a, b, l, Q);
}
FunctionalPtr make_interaction_functional(int dim, double amp, double rho) {
  return std::make_shared<InteractionFunctional>(dim, amp, rho);
}
FunctionalPtr make_zero_functional(int dim) {
  return std::make_shared<ZeroFunctional>(dim);
}
FunctionalPtr make_linear_functional(const Vec& a) {
  return std::make_shared<LinearFunctional>(a);
}

// ---------------------------------------------------------------------------
// lifted calculus
// ---------------------------------------------------------------------------

LiftedField lifted_gradient(const FunctionalModel& F, const LiftedField& X,
                            const EmpiricalMeasure& m) {
  require(X.measure_tag() == m.id(), "lifted_gradient: field not attached to measure");
  LiftedField out;
  F.grad_delta_field(X, m, out);
  return out;
}

LiftedField lifted_hessian_apply(const FunctionalModel& F, const LiftedField& X,
                                 const LiftedField& Z, const EmpiricalMeasure& m) {
  require(X.measure_tag() == m.id() && Z.measure_tag() == m.id(),
          "lifted_hessian_apply: measure mismatch");
  const int d = F.dim();
  LiftedField hess, mixed;
  F.hess_delta_field(X, m, hess);
  F.d2d1_contract_field(X, m, Z, mixed);
  const int M = std::max({X.outcomes(), Z.outcomes(), mixed.outcomes()});
  LiftedField out(M, X.atoms(), d, m.id());
  for (int w = 0; w < M; ++w)
    for (int i = 0; i < X.atoms(); ++i)
      out.at(w, i) = hess.matrix_at(hess.wrap(w), i, d) * Z.at(Z.wrap(w), i) +
                     mixed.at(mixed.wrap(w), i);
  return out;
}

double partial_m(const FunctionalModel& F, const FieldFunction& X,
                 const EmpiricalMeasure& m, ConstVecRef x, int outcomes) {
  LiftedField Xf(outcomes, m.size(), m.dim(), m.id());
  for (int w = 0; w < outcomes; ++w)
    for (int i = 0; i < m.size(); ++i) Xf.at(w, i) = X(w, m.atom(i));
  const EmpiricalMeasure mu = tensor(Xf, m);
  double acc = 0.0;
  for (int w = 0; w < outcomes; ++w) acc += F.delta(mu, X(w, x));
  return acc / outcomes;
}

double chain_rule_total_delta(const FunctionalModel& F, const LiftedField& X,
                              const LiftedField& dX_dm_at_x,
                              const EmpiricalMeasure& m, ConstVecRef x,
                              const FieldFunction& X_fn) {
  const double part = partial_m(F, X_fn, m, x, X.outcomes());
  const LiftedField grad = lifted_gradient(F, X, m);
  return part + inner(grad, dX_dm_at_x, m);
}

double monotonicity_gap(const FunctionalModel& F, const EmpiricalMeasure& m1,
                        const EmpiricalMeasure& m2) {
  auto diff = [&](ConstVecRef x) { return F.delta(m1, x) - F.delta(m2, x); };
  return integrate_scalar(m1, diff) - integrate_scalar(m2, diff);
}

// ---------------------------------------------------------------------------
// finite-difference verifiers
// ---------------------------------------------------------------------------

namespace {

double fit_order(const std::vector<ConvergenceRow>& rows) {
  // least-squares slope of log err vs log theta over informative rows
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  int n = 0;
  for (const auto& r : rows) {
    if (r.abs_err <= 0.0) continue;
    const double x = std::log(r.theta), y = std::log(r.abs_err);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    ++n;
  }
  if (n < 2) return std::numeric_limits<double>::quiet_NaN();
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

void finalize_report(ConvergenceReport& rep, double scale, double tol) {
  double max_err = 0.0;
  for (const auto& r : rep.rows) max_err = std::max(max_err, r.abs_err);
  rep.exact = max_err <= 1e-11 * std::max(1.0, scale);
  rep.observed_order = fit_order(rep.rows);
  const double first_err = rep.rows.front().abs_err;
  const double last_err = rep.rows.back().abs_err;
  // the ladder spans three decades, so order ~1 forces a ~50x decay at least
  const double cap = std::max(tol, 0.02 * first_err);
  rep.passed = rep.exact || (std::isfinite(rep.observed_order) &&
                             rep.observed_order >= 0.9 && last_err <= cap);
}

}  // namespace

ConvergenceReport check_first_derivative(const FunctionalModel& F,
                                         const EmpiricalMeasure& m,
                                         const EmpiricalMeasure& mp,
                                         const std::vector<double>& steps, double tol) {
  ConvergenceReport rep;
  rep.check_name = F.name() + ":first";
  auto delta_m = [&](ConstVecRef x) { return F.delta(m, x); };
  const double rhs = integrate_scalar(mp, delta_m) - integrate_scalar(m, delta_m);
  const double f0 = F.value(m);
  require(std::isfinite(f0), "non-finite functional value");
  double prev_theta = 0, prev_err = 0;
  for (double theta : steps) {
    require(theta > 0.0 && theta <= 1.0, "theta must lie in (0,1]");
    const double lhs = (F.value(mix(m, mp, theta)) - f0) / theta;
    ConvergenceRow row{theta, lhs, rhs, std::abs(lhs - rhs),
                       std::numeric_limits<double>::quiet_NaN()};
    if (!rep.rows.empty() && row.abs_err > 0 && prev_err > 0)
      row.est_order = std::log(prev_err / row.abs_err) / std::log(prev_theta / theta);
    rep.rows.push_back(row);
    prev_theta = theta;
    prev_err = row.abs_err;
  }
  finalize_report(rep, std::max(std::abs(f0), std::abs(rhs)), tol);
  return rep;
}

ConvergenceReport check_second_derivative(const FunctionalModel& F,
                                          const EmpiricalMeasure& m,
                                          const EmpiricalMeasure& mp,
                                          const EmpiricalMeasure& mtp,
                                          const std::vector<double>& steps, double tol) {
  ConvergenceReport rep;
  rep.check_name = F.name() + ":second";
  // rhs = intint delta2(m)(x,xt) d(m'-m)(x) d(mt'-m)(xt)
  double rhs = 0.0;
  {
    auto k = [&](const EmpiricalMeasure& ma, double sa, const EmpiricalMeasure& mb,
                 double sb) {
      double acc = 0.0;
      for (int i = 0; i < ma.size(); ++i)
        for (int j = 0; j < mb.size(); ++j)
          acc += sa * sb * ma.weights()[i] * mb.weights()[j] *
                 F.delta2(m, ma.atom(i), mb.atom(j));
      return acc;
    };
    rhs = k(mp, 1, mtp, 1) - k(mp, 1, m, 1) - k(m, 1, mtp, 1) + k(m, 1, m, 1);
  }
  auto linear_term = [&](const EmpiricalMeasure& base) {
    auto d = [&](ConstVecRef x) { return F.delta(base, x); };
    return integrate_scalar(mp, d) - integrate_scalar(m, d);
  };
  const double at_zero = linear_term(m);
  double prev_theta = 0, prev_err = 0;
  for (double theta : steps) {
    const double lhs = (linear_term(mix(m, mtp, theta)) - at_zero) / theta;
    ConvergenceRow row{theta, lhs, rhs, std::abs(lhs - rhs),
                       std::numeric_limits<double>::quiet_NaN()};
    if (!rep.rows.empty() && row.abs_err > 0 && prev_err > 0)
      row.est_order = std::log(prev_err / row.abs_err) / std::log(prev_theta / theta);
    rep.rows.push_back(row);
    prev_theta = theta;
    prev_err = row.abs_err;
  }
  finalize_report(rep, std::max(1.0, std::abs(rhs)), tol);

  // second-order Taylor remainder along m -> m' at the smallest step
  {
    const double theta = steps.back();
    const double quad_target = 0.5 * [&] {
      double acc = 0.0;
      auto k = [&](const EmpiricalMeasure& ma, const EmpiricalMeasure& mb) {
        double s = 0.0;
        for (int i = 0; i < ma.size(); ++i)
          for (int j = 0; j < mb.size(); ++j)
            s += ma.weights()[i] * mb.weights()[j] * F.delta2(m, ma.atom(i), mb.atom(j));
        return s;
      };
      acc = k(mp, mp) - 2.0 * k(mp, m) + k(m, m);
      return acc;
    }();
    auto delta_m = [&](ConstVecRef x) { return F.delta(m, x); };
    const double lin = integrate_scalar(mp, delta_m) - integrate_scalar(m, delta_m);
    const double remainder =
        (F.value(mix(m, mp, theta)) - F.value(m) - theta * lin) / (theta * theta);
    const double taylor_err = std::abs(remainder - quad_target);
    const double scale = std::max(1.0, std::abs(quad_target));
    if (taylor_err > std::max(10.0 * tol, 0.2 * theta * scale) &&
        taylor_err > 1e-10 * scale)
      rep.passed = false;
  }
  return rep;
}

void save_convergence_csv(const std::vector<ConvergenceReport>& reports,
                          const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write report csv: " + path);
  out.precision(17);
  out << "check,theta,lhs,rhs,abs_err,est_order\n";
  for (const auto& rep : reports)
    for (const auto& r : rep.rows)
      out << rep.check_name << "," << r.theta << "," << r.lhs << "," << r.rhs << ","
          << r.abs_err << "," << r.est_order << "\n";
}

ConstantsEstimate estimate_constants(const FunctionalModel& F,
                                     const std::vector<ProbeTriple>& probes) {
  require(probes.size() >= 10, "estimate_constants needs at least 10 probes");
  ConstantsEstimate est;
  int used = 0;
  for (const auto& p : probes) {
    const double xn = field_norm(p.X, p.m);
    const double zn = field_norm(p.Z, p.m);
    if (zn > 1e-12) {
      const LiftedField hz = lifted_hessian_apply(F, p.X, p.Z, p.m);
      est.bounds.c = std::max(est.bounds.c, field_norm(hz, p.m) / zn);
      ++used;
    }
    est.bounds.c_growth = std::max(
        est.bounds.c_growth, std::abs(F.value(tensor(p.X, p.m))) / (1.0 + xn * xn));
  }
  // pairwise gradient differences on probes sharing a measure
  for (size_t i = 0; i + 1 < probes.size(); ++i) {
    const auto& p = probes[i];
    const auto& q = probes[i + 1];
    if (p.m.id() != q.m.id()) continue;
    LiftedField diff = axpy(-1.0, q.X, p.X);
    const double dn = field_norm(diff, p.m);
    if (dn < 1e-12) continue;
    LiftedField g1 = lifted_gradient(F, p.X, p.m);
    LiftedField g2 = lifted_gradient(F, q.X, q.m);
    LiftedField gdiff = axpy(-1.0, g2, g1);
    est.bounds.c = std::max(est.bounds.c, field_norm(gdiff, p.m) / dn);
    const double mono = inner(gdiff, diff, p.m);
    est.bounds.c_prime = std::max(est.bounds.c_prime, std::max(0.0, -mono) / (dn * dn));
    ++used;
  }
  require(used > 0, "estimate_constants: all probes degenerate");
  est.probes_used = used;
  return est;
}

}  // namespace mflab
