#include "mflab/lq.hpp"

#include <array>
#include <cmath>
#include <fstream>

namespace mflab {

namespace {

std::array<double, 4> rhs(const LQSpec& s, const std::array<double, 4>& y) {
  const double P = y[0], R = y[1];
  // forward in tau = T - t
  return {s.q - P * P / s.lambda,
          s.q_bar - (2.0 * P * R + R * R) / s.lambda,
          P,
          s.q_bar - P * R / s.lambda - R * R / (2.0 * s.lambda)};
}

std::array<double, 4> axpy4(double a, const std::array<double, 4>& x,
                            const std::array<double, 4>& y) {
  return {y[0] + a * x[0], y[1] + a * x[1], y[2] + a * x[2], y[3] + a * x[3]};
}

}  // namespace

RiccatiSolution riccati_solve(const LQSpec& spec, int fine_steps) {
  require(spec.T > spec.t0, "riccati_solve: T must exceed t0");
  require(spec.lambda > 0.0, "riccati_solve: lambda must be positive");
  RiccatiSolution sol;
  sol.t0_ = spec.t0;
  sol.T_ = spec.T;
  // integrate a little past t0 so centered time differences stay inside
  const double span = (spec.T - spec.t0) * 1.02 + 1e-3;
  const int n = std::max(fine_steps, 16);
  const double h = span / n;
  sol.tau_.resize(static_cast<size_t>(n + 1));
  sol.y_.resize(static_cast<size_t>(n + 1));
  sol.dy_.resize(static_cast<size_t>(n + 1));

  std::array<double, 4> y = {spec.q_T, spec.q_bar_T, 0.0, 0.0};
  sol.tau_[0] = 0.0;
  sol.y_[0] = y;
  sol.dy_[0] = rhs(spec, y);
  for (int k = 0; k < n; ++k) {
    const auto k1 = rhs(spec, y);
    const auto k2 = rhs(spec, axpy4(0.5 * h, k1, y));
    const auto k3 = rhs(spec, axpy4(0.5 * h, k2, y));
    const auto k4 = rhs(spec, axpy4(h, k3, y));
    for (int c = 0; c < 4; ++c)
      y[static_cast<size_t>(c)] +=
          h / 6.0 *
          (k1[static_cast<size_t>(c)] + 2.0 * k2[static_cast<size_t>(c)] +
           2.0 * k3[static_cast<size_t>(c)] + k4[static_cast<size_t>(c)]);
    if (std::abs(y[0]) > 1e6 || std::abs(y[1]) > 1e6)
      throw std::domain_error("riccati blow-up: inadmissible spec");
    sol.tau_[static_cast<size_t>(k + 1)] = (k + 1) * h;
    sol.y_[static_cast<size_t>(k + 1)] = y;
    sol.dy_[static_cast<size_t>(k + 1)] = rhs(spec, y);
  }
  return sol;
}

double RiccatiSolution::eval(int comp, double t) const {
  const double tau = std::min(std::max(T_ - t, 0.0), tau_.back());
  const double h = tau_[1] - tau_[0];
  const auto idx = std::min(static_cast<size_t>(tau / h), tau_.size() - 2);
  const double s = (tau - tau_[idx]) / h;
  // cubic Hermite on [tau_idx, tau_idx+1]
  const double y0 = y_[idx][static_cast<size_t>(comp)];
  const double y1 = y_[idx + 1][static_cast<size_t>(comp)];
  const double d0 = dy_[idx][static_cast<size_t>(comp)] * h;
  const double d1 = dy_[idx + 1][static_cast<size_t>(comp)] * h;
  const double s2 = s * s, s3 = s2 * s;
  return (2 * s3 - 3 * s2 + 1) * y0 + (s3 - 2 * s2 + s) * d0 + (-2 * s3 + 3 * s2) * y1 +
         (s3 - s2) * d1;
}

double RiccatiSolution::P_integral(double t) const { return eval(kIP, t); }
double RiccatiSolution::c_integral(double t) const { return eval(kIC, t); }

void RiccatiSolution::save_csv(const std::string& path, double sigma_trace) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write riccati csv: " + path);
  out.precision(17);
  out << "t,P,R,noise_term\n";
  for (size_t k = tau_.size(); k-- > 0;) {
    const double t = T_ - tau_[k];
    out << t << "," << y_[k][0] << "," << y_[k][1] << ","
        << 0.5 * sigma_trace * y_[k][2] << "\n";
  }
}

double lq_V(const LQSpec& spec, const RiccatiSolution& ric, const EmpiricalMeasure& m,
            double t) {
  const double s2 = m.second_moment();
  const double mb2 = m.mean().squaredNorm();
  return 0.5 * ric.P(t) * s2 + 0.5 * ric.R(t) * mb2 +
         0.5 * spec.sigma_trace() * ric.P_integral(t);
}

double lq_U(const LQSpec& spec, const RiccatiSolution& ric, const EmpiricalMeasure& m,
            double t, ConstVecRef x) {
  const double s2 = m.second_moment();
  const double mb2 = m.mean().squaredNorm();
  const double c = -0.5 * spec.q_T * s2 - spec.q_bar_T * mb2 -
                   (mb2 * ric.c_integral(t) + 0.5 * spec.q * s2 * (spec.T - t) -
                    0.5 * spec.sigma_trace() * ric.P_integral(t));
  return 0.5 * ric.P(t) * x.squaredNorm() + ric.R(t) * m.mean().dot(x) + c;
}

Vec lq_DU(const RiccatiSolution& ric, const EmpiricalMeasure& m, double t,
          ConstVecRef x) {
  return ric.P(t) * x + ric.R(t) * m.mean();
}

Mat lq_D2U(const RiccatiSolution& ric, int d, double t) {
  return ric.P(t) * Mat::Identity(d, d);
}

Vec lq_Zbar(const RiccatiSolution& ric, const EmpiricalMeasure& m, double t,
            ConstVecRef x) {
  return ric.R(t) * (x - m.mean());
}

LQValueReport lq_value(const LQSpec& spec, const RiccatiSolution& ric,
                       const EmpiricalMeasure& m, double t) {
  LQValueReport rep;
  rep.P = ric.P(t);
  rep.R = ric.R(t);
  rep.V = lq_V(spec, ric, m, t);
  rep.delta_V.resize(m.size());
  rep.grad_delta_V.resize(m.size(), m.dim());
  for (int i = 0; i < m.size(); ++i) {
    rep.delta_V[i] = lq_U(spec, ric, m, t, m.atom(i));
    rep.grad_delta_V.row(i) = lq_DU(ric, m, t, m.atom(i)).transpose();
  }
  const double offset = m.weights().dot(rep.delta_V);
  rep.delta_V.array() -= offset;
  return rep;
}

}  // namespace mflab
