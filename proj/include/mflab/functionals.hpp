#pragma once

#include <memory>
#include <string>
#include <vector>

#include "mflab/lift.hpp"
#include "mflab/measure.hpp"
#include "mflab/types.hpp"

namespace mflab {

// Sup-norm style constants a functional declares about itself: c bounds the
// gradient Lipschitz/second-derivative operator norm, c_prime the
// semi-monotonicity defect (0 for convex families), c_growth the quadratic
// growth of values.
struct AssumptionBounds {
  double c = 0.0;
  double c_prime = 0.0;
  double c_growth = 0.0;
};

struct AssumptionConstants {
  double c = 0.0, c_T = 0.0;
  double c_prime = 0.0, c_prime_T = 0.0;
  double lambda = 0.0, T = 0.0;

  // first-order well-posedness margin
  double convexity_margin() const { return lambda - T * (c_prime_T + c_prime * T / 2.0); }
  // second-order margin used by the equation-level checks
  double bellman_margin() const { return lambda - T * (c_T + c * T / 2.0); }
};

// A mean-field functional together with its full derivative ladder. All
// derivatives are normalized: delta integrates to zero against m, delta2
// against m in each slot. Conventions for the mixed kernels:
//   d1_delta2(m,x,xt)[a]      = d/dx_a delta2
//   d2d1_delta2(m,x,xt)[a][b] = d^2/(dx_a dxt_b) delta2
//   d1sq_delta2(m,x,xt)[a][b] = d^2/(dx_a dx_b) delta2
//   d1sq_d2_delta2 slice(c)   = d^3/(dx_a dx_b dxt_c) delta2
class FunctionalModel {
public:
  virtual ~FunctionalModel() = default;

  virtual std::string name() const = 0;
  virtual int dim() const = 0;

  virtual double value(const EmpiricalMeasure& m) const = 0;
  virtual double delta(const EmpiricalMeasure& m, ConstVecRef x) const = 0;
  virtual Vec grad_delta(const EmpiricalMeasure& m, ConstVecRef x) const = 0;
  virtual Mat hess_delta(const EmpiricalMeasure& m, ConstVecRef x) const = 0;
  virtual double delta2(const EmpiricalMeasure& m, ConstVecRef x, ConstVecRef xt) const = 0;
  virtual Vec d1_delta2(const EmpiricalMeasure& m, ConstVecRef x, ConstVecRef xt) const = 0;
  virtual Mat d2d1_delta2(const EmpiricalMeasure& m, ConstVecRef x, ConstVecRef xt) const = 0;

  virtual bool has_sc_tier() const { return false; }
  virtual Tensor3 third_delta(const EmpiricalMeasure& m, ConstVecRef x) const;
  virtual Mat d1sq_delta2(const EmpiricalMeasure& m, ConstVecRef x, ConstVecRef xt) const;
  virtual Tensor3 d1sq_d2_delta2(const EmpiricalMeasure& m, ConstVecRef x,
                                 ConstVecRef xt) const;

  virtual AssumptionBounds declared_bounds() const = 0;

  // ---- bulk evaluation over a lifted field (mu = tensor(Y, m)) ----
  // Families override these with closed-form sufficient statistics; the
  // defaults materialize mu and loop.

  // out(w,i) = delta(mu)(Y(w,i))
  virtual void delta_field(const LiftedField& Y, const EmpiricalMeasure& m,
                           LiftedField& out) const;
  // out(w,i) = D delta(mu)(Y(w,i))
  virtual void grad_delta_field(const LiftedField& Y, const EmpiricalMeasure& m,
                                LiftedField& out) const;
  // out(w,i) = D^2 delta(mu)(Y(w,i)) as a d*d matrix field
  virtual void hess_delta_field(const LiftedField& Y, const EmpiricalMeasure& m,
                                LiftedField& out) const;
  // out(w,i) = sum_{wt,j} (w_j/M) d2d1_delta2(mu)(Y(w,i), Y(wt,j)) . Z(wt,j)
  virtual void d2d1_contract_field(const LiftedField& Y, const EmpiricalMeasure& m,
                                   const LiftedField& Z, LiftedField& out) const;
  // out(w,i) = (1/Mp) sum_wt d1_delta2(mu)(Y(w,i), probe(wt))
  virtual void d1_avg_field(const LiftedField& Y, const EmpiricalMeasure& m,
                            const Mat& probe_paths, LiftedField& out) const;
  // S_c tier bulk forms (matrix fields)
  virtual void third_contract_field(const LiftedField& Y, const EmpiricalMeasure& m,
                                    const LiftedField& Zvec, LiftedField& out) const;
  virtual void d1sq_avg_field(const LiftedField& Y, const EmpiricalMeasure& m,
                              const Mat& probe_paths, LiftedField& out) const;
  virtual void d1sq_d2_contract_field(const LiftedField& Y, const EmpiricalMeasure& m,
                                      const LiftedField& Zvec, LiftedField& out) const;
};

using FunctionalPtr = std::shared_ptr<const FunctionalModel>;

// F(m) = (q/2) int |x|^2 dm + (qbar/2) |int x dm|^2
FunctionalPtr make_lq_functional(int dim, double q, double q_bar);

// F(m) = l.u + (1/2) u^T Q u with u_i = int tanh(a_i.x + b_i) dm
FunctionalPtr make_cylindrical_functional(int dim, const Mat& a, const Vec& b,
                                          const Vec& l, const Mat& Q);

// F(m) = (1/2) intint amp*exp(-|x-y|^2/(2 rho^2)) dm(x) dm(y)
FunctionalPtr make_interaction_functional(int dim, double amp, double rho);

FunctionalPtr make_zero_functional(int dim);
// F(m) = int a.x dm (handy in tests)
FunctionalPtr make_linear_functional(const Vec& a);

// ---- lifted-calculus operations ----

// D_X F(X (x) m): field (w,x) -> grad_delta(tensor(X,m), X(w,x))
LiftedField lifted_gradient(const FunctionalModel& F, const LiftedField& X,
                            const EmpiricalMeasure& m);

// D_X^2 F(X (x) m)(Z): local hessian part plus the mixed-kernel contraction
// against an independent copy (exact average over the outcome-atom ensemble)
LiftedField lifted_hessian_apply(const FunctionalModel& F, const LiftedField& X,
                                 const LiftedField& Z, const EmpiricalMeasure& m);

// dF/dm of X (x) m at probe x: mean over outcomes of delta(X (x) m, X(w,x));
// X is given as a function so it is defined off the atoms
double partial_m(const FunctionalModel& F, const FieldFunction& X,
                 const EmpiricalMeasure& m, ConstVecRef x, int outcomes = 1);

// total functional derivative of m -> F(X(m,.) (x) m) when the caller
// supplies dX/dm(m,.)(x) as a field
double chain_rule_total_delta(const FunctionalModel& F, const LiftedField& X,
                              const LiftedField& dX_dm_at_x,
                              const EmpiricalMeasure& m, ConstVecRef x,
                              const FieldFunction& X_fn);

double monotonicity_gap(const FunctionalModel& F, const EmpiricalMeasure& m1,
                        const EmpiricalMeasure& m2);

// ---- finite-difference verifiers ----

struct ConvergenceRow {
  double theta;
  double lhs;
  double rhs;
  double abs_err;
  double est_order;  // NaN on the first row
};

struct ConvergenceReport {
  std::vector<ConvergenceRow> rows;
  bool exact = false;   // all errors at rounding level
  bool passed = false;
  double observed_order = 0.0;
  std::string check_name;
};

void save_convergence_csv(const std::vector<ConvergenceReport>& reports,
                          const std::string& path);

ConvergenceReport check_first_derivative(const FunctionalModel& F,
                                         const EmpiricalMeasure& m,
                                         const EmpiricalMeasure& mp,
                                         const std::vector<double>& steps,
                                         double tol = 1e-6);

ConvergenceReport check_second_derivative(const FunctionalModel& F,
                                          const EmpiricalMeasure& m,
                                          const EmpiricalMeasure& mp,
                                          const EmpiricalMeasure& mtp,
                                          const std::vector<double>& steps,
                                          double tol = 1e-5);

struct ConstantsEstimate {
  AssumptionBounds bounds;
  int probes_used = 0;
  bool lower_bound_only = true;  // ratios maximized over finitely many probes
};

struct ProbeTriple {
  LiftedField X;
  LiftedField Z;
  EmpiricalMeasure m;
};

ConstantsEstimate estimate_constants(const FunctionalModel& F,
                                     const std::vector<ProbeTriple>& probes);

}  // namespace mflab
