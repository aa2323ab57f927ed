#pragma once

#include "mflab/fbsde.hpp"
#include "mflab/functionals.hpp"

namespace mflab {

// Quadratic running/terminal costs with isotropic curvature weights:
//   F(m)   = (q/2)   int |x|^2 dm + (q_bar/2)   |int x dm|^2
//   F_T(m) = (q_T/2) int |x|^2 dm + (q_bar_T/2) |int x dm|^2
struct LQSpec {
  int d = 1;
  double q = 0.0, q_bar = 0.0;
  double q_T = 0.0, q_bar_T = 0.0;
  double lambda = 1.0;
  Mat sigma;  // d x d
  double t0 = 0.0, T = 1.0;

  FunctionalPtr running() const { return make_lq_functional(d, q, q_bar); }
  FunctionalPtr terminal() const { return make_lq_functional(d, q_T, q_bar_T); }
  double sigma_trace() const {  // tr(sigma sigma^T)
    if (sigma.size() == 0) return 0.0;
    return (sigma * sigma.transpose()).trace();
  }
};

// Backward Riccati pair on [t0, T]:
//   P' = P^2/lambda - q,              P(T) = q_T
//   R' = (2PR + R^2)/lambda - q_bar,  R(T) = q_bar_T
// integrated by classical RK4 on a fine grid with cubic dense output, plus
// the running integrals needed for the value constant.
class RiccatiSolution {
public:
  double P(double t) const { return eval(kP, t); }
  double R(double t) const { return eval(kR, t); }
  // int_t^T P(s) ds
  double P_integral(double t) const;
  // int_t^T (q_bar - PR/lambda - R^2/(2 lambda)) ds
  double c_integral(double t) const;

  double t0() const { return t0_; }
  double T() const { return T_; }
  void save_csv(const std::string& path, double sigma_trace) const;

private:
  friend RiccatiSolution riccati_solve(const LQSpec&, int);
  enum Comp { kP = 0, kR = 1, kIP = 2, kIC = 3 };
  double eval(int comp, double t) const;

  double t0_ = 0.0, T_ = 1.0;
  std::vector<double> tau_;               // increasing, tau = T - t
  std::vector<std::array<double, 4>> y_;  // (P, R, IP, IC) at nodes
  std::vector<std::array<double, 4>> dy_; // slopes for Hermite interpolation
};

// throws std::domain_error on blow-up (inadmissible spec)
RiccatiSolution riccati_solve(const LQSpec& spec, int fine_steps = 4000);

struct LQValueReport {
  double V = 0.0;
  Vec delta_V;        // per-atom, normalized to m-average zero
  Mat grad_delta_V;   // per-atom rows: P(t) x_i + R(t) xbar
  double P = 0.0, R = 0.0;
};

LQValueReport lq_value(const LQSpec& spec, const RiccatiSolution& ric,
                       const EmpiricalMeasure& m, double t);

// closed-form pieces used by the residual evaluators and acceptance oracles
double lq_V(const LQSpec& spec, const RiccatiSolution& ric, const EmpiricalMeasure& m,
            double t);
// U(x,m,t) including the additive constant pinned by U(.,.,T) = dF_T/dm
double lq_U(const LQSpec& spec, const RiccatiSolution& ric, const EmpiricalMeasure& m,
            double t, ConstVecRef x);
Vec lq_DU(const RiccatiSolution& ric, const EmpiricalMeasure& m, double t, ConstVecRef x);
Mat lq_D2U(const RiccatiSolution& ric, int d, double t);
// measure derivative of DU at evaluation time t: R(t) (x - xbar), xi-independent
Vec lq_Zbar(const RiccatiSolution& ric, const EmpiricalMeasure& m, double t,
            ConstVecRef x);

}  // namespace mflab
