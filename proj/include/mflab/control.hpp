#pragma once

#include "mflab/fbsde.hpp"

namespace mflab {

// Adapted open-loop control: one field per time step, applied on [s_k, s_k+1).
// Paths recorded from feedback rules stay adapted by construction.
struct ControlPath {
  TimeGrid grid;
  std::vector<LiftedField> v;

  double l2_norm(const EmpiricalMeasure& m) const;
};

ControlPath zero_control(const EmpiricalMeasure& m, const TimeGrid& grid);

// simulate v_k = alpha_k + beta_k x with coefficients drawn from the field
// stream, recording the realized adapted control
ControlPath random_feedback_control(const LiftedField& X0, const EmpiricalMeasure& m,
                                    const TimeGrid& grid, const SolverConfig& cfg,
                                    uint64_t slot, double scale = 0.5);

// forward state under a control, common random numbers fixed by cfg.seed
std::vector<LiftedField> simulate_path(const ControlPath& v, const LiftedField& X0,
                                       const EmpiricalMeasure& m, const SolverConfig& cfg);

double cost(const ControlPath& v, const LiftedField& X0, const EmpiricalMeasure& m,
            const SolverConfig& cfg, const FunctionalModel& F, const FunctionalModel& F_T);

struct GradientResult {
  ControlPath gradient;
  double norm = 0.0;  // L2(t,T;H_m) norm
  bool regression_fallback = false;
};

GradientResult cost_gradient(const ControlPath& v, const LiftedField& X0,
                             const EmpiricalMeasure& m, const SolverConfig& cfg,
                             const FunctionalModel& F, const FunctionalModel& F_T);

struct MinimizeResult {
  ControlPath control;
  double cost_value = 0.0;
  double gradient_norm = 0.0;
  int iterations = 0;
  bool converged = false;
};

struct MinimizeOptions {
  double lr = 0.0;          // 0 picks a default from lambda and the bounds
  double tol = 1e-5;        // gradient-norm stopping threshold
  int max_iters = 400;
  int max_halvings = 10;
};

MinimizeResult minimize(const LiftedField& X0, const EmpiricalMeasure& m,
                        const TimeGrid& grid, const SolverConfig& cfg,
                        const FunctionalModel& F, const FunctionalModel& F_T,
                        const MinimizeOptions& opt = {});

struct ConvexityReport {
  double pairing = 0.0;       // int <D_vJ(v1)-D_vJ(v2), v1-v2> ds
  double threshold = 0.0;     // margin * int |v1-v2|^2 ds
  double margin = 0.0;        // pairing - threshold
  double control_distance = 0.0;
};

ConvexityReport convexity_check(const ControlPath& v1, const ControlPath& v2,
                                const LiftedField& X0, const EmpiricalMeasure& m,
                                const SolverConfig& cfg, const FunctionalModel& F,
                                const FunctionalModel& F_T);

struct ValueReport {
  double V = 0.0;
  Vec delta_V;                 // per atom, normalized to m-average zero
  double delta_V_offset = 0.0; // m-average of the raw per-atom values
  Mat grad_delta_V;            // per atom rows
  double growth_ratio = 0.0;   // |V| / (1 + |X|^2)
  double t = 0.0;
  SolverDiagnostics diag;
  uint64_t seed = 0;
  int M = 0, K = 0;
};

// value function at the identity lift of m on [t, T]; grid covers [t, T]
ValueReport value(const EmpiricalMeasure& m, const TimeGrid& grid,
                  const SolverConfig& cfg, const FunctionalModel& F,
                  const FunctionalModel& F_T);

// value computed from an already-solved bundle (shared by the pde module)
ValueReport value_from_bundle(const PathBundle& bundle, const EmpiricalMeasure& m,
                              const SolverConfig& cfg, const FunctionalModel& F,
                              const FunctionalModel& F_T);

struct ReplicatedValue {
  ValueReport mean;          // fields averaged across replications
  double V_stderr = 0.0;
  Vec delta_V_stderr;
  Mat grad_stderr;
  std::vector<double> V_samples;
};

ReplicatedValue value_replicated(const EmpiricalMeasure& m, const TimeGrid& grid,
                                 const SolverConfig& cfg, const FunctionalModel& F,
                                 const FunctionalModel& F_T, int replications);

// deterministic systematic resampling to at most cap equally weighted atoms
EmpiricalMeasure compress_measure(const EmpiricalMeasure& mu, int cap,
                                  const CounterRng& rng, uint64_t slot);

struct DppRow {
  double h = 0.0;
  double lhs = 0.0;       // V(m, t)
  double rhs = 0.0;       // running cost on [t, t+h] plus restarted value
  double residual = 0.0;
  int inner_atoms = 0;
  bool resampled = false;
};

// inner_outcomes overrides the Monte-Carlo width of the restarted solve
// (0 keeps cfg.M)
std::vector<DppRow> dpp_residual(const EmpiricalMeasure& m, const TimeGrid& grid,
                                 const SolverConfig& cfg, const FunctionalModel& F,
                                 const FunctionalModel& F_T,
                                 const std::vector<int>& h_steps, int cap_atoms,
                                 int inner_outcomes = 0);

struct TimeRegularityRow {
  double h = 0.0;
  double value_ratio = 0.0;     // |V(t+h)-V(t)| / (h (1+|X|^2))
  double gradient_ratio = 0.0;  // |D_X V(t+h)-D_X V(t)| / ((sqrt h + h)(1+|X|))
};

std::vector<TimeRegularityRow> time_regularity_probe(const EmpiricalMeasure& m,
                                                     const TimeGrid& grid,
                                                     const SolverConfig& cfg,
                                                     const FunctionalModel& F,
                                                     const FunctionalModel& F_T,
                                                     const std::vector<int>& h_steps);

void save_value_csv(const ValueReport& rep, const EmpiricalMeasure& m,
                    const std::string& path);

}  // namespace mflab
