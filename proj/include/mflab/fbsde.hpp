#pragma once

#include <optional>

#include "mflab/functionals.hpp"
#include "mflab/lift.hpp"

namespace mflab {

struct TimeGrid {
  double t0 = 0.0;
  double T = 1.0;
  int K = 1;
  // absolute index of step 0 in the Brownian stream; restarted solves keep
  // the increment keys of the parent grid
  int offset = 0;

  double dt() const { return (T - t0) / K; }
  double time(int k) const { return t0 + k * dt(); }
  TimeGrid restarted_at(int k) const { return {time(k), T, K - k, offset + k}; }
};

struct SolverConfig {
  double lambda = 1.0;
  Mat sigma;  // d x d, symmetric positive semidefinite
  int M = 128;
  double damping = 1.0;
  int basis_degree = 2;
  double tol = 1e-7;
  int max_iters = 200;
  uint64_t seed = 1;
  int threads = 1;
  // pair outcomes (2j, 2j+1) with mirrored increments; cancels the leading
  // Monte-Carlo fluctuation of time-difference estimators
  bool antithetic = true;

  SolverConfig with_seed(uint64_t s) const {
    SolverConfig c = *this;
    c.seed = s;
    return c;
  }
};

// throws when the first-order margin fails; returns false when only the
// equation-level margin fails
bool validate_margins(const FunctionalModel& F, const FunctionalModel& F_T,
                      double lambda, double horizon);

AssumptionConstants margin_constants(const FunctionalModel& F, const FunctionalModel& F_T,
                                     double lambda, double horizon);

struct SolverDiagnostics {
  int iterations = 0;
  double final_residual = 0.0;
  bool converged = false;
  std::vector<double> residual_history;
  double contraction_ratio = 0.0;  // geometric mean of successive ratios
  bool regression_fallback = false;
  double max_residual_correlation = 0.0;  // martingale diagnostic
  double growth_constant = 0.0;           // sup_k (|Y|+|Z|)/(1+|X0|)
};

// fitted conditional-expectation function of the state at one step
// (plain polynomial basis; used to evaluate Z off the sample atoms)
struct ZFit {
  int degree = 0;
  Vec state_mean;
  Vec state_scale;
  Mat coeffs;  // n_basis x comps
  bool per_atom = false;  // exact per-atom conditioning was used instead
  Vec predict(ConstVecRef y) const;
};

struct PathBundle {
  TimeGrid grid;
  int comps = 0;                // d for vector systems, d*d for matrix systems
  std::vector<LiftedField> Y;   // forward process, K+1 entries
  std::vector<LiftedField> Z;   // adjoint process, K+1 entries
  std::vector<Mat> dW;          // K entries, M x d (shared across atoms)
  std::vector<ZFit> z_fit;      // per step (vector systems only)
  SolverDiagnostics diag;

  double y_norm(const EmpiricalMeasure& m, int k) const { return field_norm(Y[k], m); }
  double z_norm(const EmpiricalMeasure& m, int k) const { return field_norm(Z[k], m); }
};

std::vector<Mat> brownian_increments(const TimeGrid& grid, int M, int d, uint64_t seed,
                                     bool antithetic = true);

// ---- regression (conditional expectations by weighted least squares) ----

struct RegressOptions {
  int degree = 2;
  int threads = 1;
};

struct RegressResult {
  LiftedField fitted;
  Mat coeffs;
  bool fallback_mean = false;
  double max_residual_correlation = 0.0;
  ZFit fit;  // populated for plain (multiplier-free) regressions
};

RegressResult regress_conditional(const LiftedField& targets, const LiftedField& state,
                                  const EmpiricalMeasure& m, const RegressOptions& opt);

// design columns phi_l(state) * multiplier_comp for each block; a null
// multiplier denotes the plain polynomial block
RegressResult regress_blocks(const LiftedField& targets, const LiftedField& state,
                             const EmpiricalMeasure& m,
                             const std::vector<const LiftedField*>& multipliers,
                             const RegressOptions& opt);

// ---- solvers ----

PathBundle solve_first_order(const FunctionalModel& F, const FunctionalModel& F_T,
                             const LiftedField& X0, const EmpiricalMeasure& m,
                             const TimeGrid& grid, const SolverConfig& cfg);

// linearization in x along the first-order solution; matrix-valued, starts at I
PathBundle solve_x_derivative(const PathBundle& first, const FunctionalModel& F,
                              const FunctionalModel& F_T, const EmpiricalMeasure& m,
                              const SolverConfig& cfg);

// second Gateaux derivative direction system; vector-valued, starts at Xdir
PathBundle solve_second_order(const PathBundle& first, const LiftedField& Xdir,
                              const FunctionalModel& F, const FunctionalModel& F_T,
                              const EmpiricalMeasure& m, const SolverConfig& cfg);

struct BarBundles {
  PathBundle bar;   // measure derivative of (Y, Z); vector-valued, starts at 0
  PathBundle bar2;  // measure derivative of the x-derivative system; matrix-valued
};

// probe_index selects the atom of m whose initial point plays the role of the
// perturbation location x (normally a zero-weight probe atom)
BarBundles solve_measure_derivative(const PathBundle& first, const PathBundle& x_deriv,
                                    const FunctionalModel& F, const FunctionalModel& F_T,
                                    const EmpiricalMeasure& m, int probe_index,
                                    const SolverConfig& cfg);

void save_bundle_csv(const PathBundle& b, const EmpiricalMeasure& m,
                     const std::string& path);

}  // namespace mflab
