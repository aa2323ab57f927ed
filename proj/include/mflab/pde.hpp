#pragma once

#include "mflab/control.hpp"
#include "mflab/lq.hpp"

namespace mflab {

// A_x phi = -(1/2) tr(sigma sigma^T D^2 phi)
double operator_A(const Mat& hessian, const Mat& sigma);

struct BellmanReport {
  double residual = 0.0;       // sum of the components below
  double time_term = 0.0;      // -dV/dt (forward difference, step dt)
  double trace_term = 0.0;     // int A_x dV/dm dm
  double grad_sq_term = 0.0;   // (1/2 lambda) int |D dV/dm|^2 dm
  double source_term = 0.0;    // -F(m)
  double residual_stderr = 0.0;  // across replications, 0 for single runs
  double t = 0.0, dt = 0.0;
  int M = 0;
  uint64_t seed = 0;
};

BellmanReport bellman_residual(const EmpiricalMeasure& m, const TimeGrid& grid,
                               const SolverConfig& cfg, const FunctionalModel& F,
                               const FunctionalModel& F_T);

// signed components averaged over seed replications (seed, seed+1, ...);
// cuts the Monte-Carlo noise floor of the time-difference term
BellmanReport bellman_residual_averaged(const EmpiricalMeasure& m, const TimeGrid& grid,
                                        const SolverConfig& cfg, const FunctionalModel& F,
                                        const FunctionalModel& F_T, int replications);

// same equation assembled from the closed-form quadratic solution; fd_h is the
// central-difference step for the time derivative
BellmanReport bellman_residual_oracle(const LQSpec& spec, const RiccatiSolution& ric,
                                      const EmpiricalMeasure& m, double t,
                                      double fd_h = 1e-6);

struct MasterReport {
  double residual = 0.0;        // centered: raw minus the additive-constant shift
  double raw_residual = 0.0;    // sum of the components below
  double constant_shift = 0.0;  // x-independent part implied by the m-average
  double time_term = 0.0;       // -dU/dt at the probe
  double trace_term = 0.0;      // -(1/2) tr(sigma sigma^T D^2 U)
  double trace_bar_term = 0.0;  // -(1/2) int tr(sigma sigma^T Zbar2) dm
  double grad_sq_term = 0.0;    // (1/2 lambda) |DU(x)|^2
  double cross_term = 0.0;      // (1/lambda) int DU(xi) . Zbar dm(xi)
  double source_term = 0.0;     // -dF/dm(m)(x)
  // a-priori bound ratios sup_s E int |.|^2 dm / (1 + |x|^2)
  double bar_y_bound = 0.0, bar_z_bound = 0.0;
  double bar2_y_bound = 0.0, bar2_z_bound = 0.0;
  double residual_stderr = 0.0;
  double t = 0.0, dt = 0.0;
  Vec probe;
  int M = 0;
  uint64_t seed = 0;
};

MasterReport master_residual(ConstVecRef x, const EmpiricalMeasure& m,
                             const TimeGrid& grid, const SolverConfig& cfg,
                             const FunctionalModel& F, const FunctionalModel& F_T);

MasterReport master_residual_averaged(ConstVecRef x, const EmpiricalMeasure& m,
                                      const TimeGrid& grid, const SolverConfig& cfg,
                                      const FunctionalModel& F, const FunctionalModel& F_T,
                                      int replications);

MasterReport master_residual_oracle(const LQSpec& spec, const RiccatiSolution& ric,
                                    const EmpiricalMeasure& m, double t, ConstVecRef x,
                                    double fd_h = 1e-6);

struct FlowRow {
  int step = 0;
  double s = 0.0;
  double probe_gap = 0.0;       // H_m distance between flow and solver probe paths
  double population_gap = 0.0;  // same over the weighted atoms
};

struct FlowResult {
  std::vector<FlowRow> rows;
  double max_probe_gap = 0.0;
  double max_population_gap = 0.0;
  int inner_solves = 0;
};

struct FlowOptions {
  int inner_cap_atoms = 128;  // population compression for the nested solves
  int inner_M = 128;
  long budget = 40'000'000;   // rough work cap for the nested solves
};

// integrates the feedback dynamics driven by the decoupling gradient,
// re-solving the value problem along the evolving measure, and compares with
// the direct forward-backward solution under common noise
FlowResult decoupled_flow(ConstVecRef x, const EmpiricalMeasure& m, const TimeGrid& grid,
                          const SolverConfig& cfg, const FunctionalModel& F,
                          const FunctionalModel& F_T, const FlowOptions& opt = {});

// quadratic form <D_X^2 V (sigma N), sigma N> evaluated with a fresh Gaussian
// probe (lhs) against the trace formula from the x-derivative system (rhs)
struct QuadraticProbe {
  double lhs = 0.0;
  double rhs = 0.0;
};

QuadraticProbe gaussian_probe_quadratic(const PathBundle& first,
                                        const FunctionalModel& F,
                                        const FunctionalModel& F_T,
                                        const EmpiricalMeasure& m,
                                        const SolverConfig& cfg, int probe_outcomes);

void save_bellman_csv(const std::vector<BellmanReport>& rows, const std::string& path);
void save_master_csv(const std::vector<MasterReport>& rows, const std::string& path);

}  // namespace mflab
