#include "mflab/pde.hpp"

#include <cmath>
#include <fstream>

namespace mflab {

double operator_A(const Mat& hessian, const Mat& sigma) {
  require(hessian.rows() == hessian.cols(), "operator_A: hessian must be square");
  require(sigma.rows() == hessian.rows() && sigma.cols() == hessian.cols(),
          "operator_A: shape mismatch");
  return -0.5 * (sigma * sigma.transpose() * hessian).trace();
}

namespace {

Mat sigma_or_zero(const SolverConfig& cfg, int d) {
  return cfg.sigma.size() ? cfg.sigma : Mat::Zero(d, d);
}

Vec atom_mean(const LiftedField& f, int i) {
  Vec s = Vec::Zero(f.comps());
  for (int w = 0; w < f.outcomes(); ++w) s += f.at(w, i);
  return s / f.outcomes();
}

Mat atom_mean_matrix(const LiftedField& f, int i, int d) {
  Mat s = Mat::Zero(d, d);
  for (int w = 0; w < f.outcomes(); ++w) s += f.matrix_at(w, i, d);
  return s / f.outcomes();
}

double bar_bound(const std::vector<LiftedField>& fields, const EmpiricalMeasure& m,
                 double probe_norm2) {
  double worst = 0.0;
  for (const auto& f : fields) {
    double acc = 0.0;
    for (int w = 0; w < f.outcomes(); ++w)
      for (int i = 0; i < f.atoms(); ++i)
        acc += m.weights()[i] * f.at(w, i).squaredNorm();
    worst = std::max(worst, acc / f.outcomes());
  }
  return worst / (1.0 + probe_norm2);
}

}  // namespace

BellmanReport bellman_residual(const EmpiricalMeasure& m, const TimeGrid& grid,
                               const SolverConfig& cfg, const FunctionalModel& F,
                               const FunctionalModel& F_T) {
  const int d = m.dim();
  const Mat sigma = sigma_or_zero(cfg, d);
  const double dt = grid.dt();

  const auto bundle = solve_first_order(F, F_T, identity_field(m), m, grid, cfg);
  const auto vt = value_from_bundle(bundle, m, cfg, F, F_T);
  const auto vt_next = value(m, grid.restarted_at(1), cfg, F, F_T);
  const auto xder = solve_x_derivative(bundle, F, F_T, m, cfg);

  BellmanReport rep;
  rep.t = grid.t0;
  rep.dt = dt;
  rep.M = cfg.M;
  rep.seed = cfg.seed;
  rep.time_term = -(vt_next.V - vt.V) / dt;
  for (int i = 0; i < m.size(); ++i) {
    rep.trace_term += m.weights()[i] * operator_A(atom_mean_matrix(xder.Z[0], i, d), sigma);
    rep.grad_sq_term +=
        m.weights()[i] * atom_mean(bundle.Z[0], i).squaredNorm() / (2.0 * cfg.lambda);
  }
  rep.source_term = -F.value(m);
  rep.residual = rep.time_term + rep.trace_term + rep.grad_sq_term + rep.source_term;
  return rep;
}

BellmanReport bellman_residual_oracle(const LQSpec& spec, const RiccatiSolution& ric,
                                      const EmpiricalMeasure& m, double t, double fd_h) {
  const int d = m.dim();
  const Mat sigma = spec.sigma.size() ? spec.sigma : Mat::Zero(d, d);
  BellmanReport rep;
  rep.t = t;
  rep.dt = fd_h;
  const double hu = std::min(fd_h, 0.5 * (spec.T - t));
  rep.time_term = -(lq_V(spec, ric, m, t + hu) - lq_V(spec, ric, m, t - hu)) / (2.0 * hu);
  const Mat d2 = lq_D2U(ric, d, t);
  for (int i = 0; i < m.size(); ++i) {
    rep.trace_term += m.weights()[i] * operator_A(d2, sigma);
    rep.grad_sq_term += m.weights()[i] *
                        lq_DU(ric, m, t, m.atom(i)).squaredNorm() /
                        (2.0 * spec.lambda);
  }
  const auto F = spec.running();
  rep.source_term = -F->value(m);
  rep.residual = rep.time_term + rep.trace_term + rep.grad_sq_term + rep.source_term;
  return rep;
}

BellmanReport bellman_residual_averaged(const EmpiricalMeasure& m, const TimeGrid& grid,
                                        const SolverConfig& cfg, const FunctionalModel& F,
                                        const FunctionalModel& F_T, int replications) {
  require(replications >= 1, "need at least one replication");
  std::vector<BellmanReport> reps;
  for (int r = 0; r < replications; ++r)
    reps.push_back(bellman_residual(m, grid,
                                    cfg.with_seed(cfg.seed + static_cast<uint64_t>(r)),
                                    F, F_T));
  BellmanReport avg = reps[0];
  avg.residual = avg.time_term = avg.trace_term = avg.grad_sq_term = avg.source_term = 0.0;
  for (const auto& r : reps) {
    avg.residual += r.residual;
    avg.time_term += r.time_term;
    avg.trace_term += r.trace_term;
    avg.grad_sq_term += r.grad_sq_term;
    avg.source_term += r.source_term;
  }
  const double n = replications;
  avg.residual /= n;
  avg.time_term /= n;
  avg.trace_term /= n;
  avg.grad_sq_term /= n;
  avg.source_term /= n;
  if (replications > 1) {
    double var = 0.0;
    for (const auto& r : reps) var += (r.residual - avg.residual) * (r.residual - avg.residual);
    avg.residual_stderr = std::sqrt(var / (n - 1) / n);
  }
  return avg;
}

MasterReport master_residual(ConstVecRef x, const EmpiricalMeasure& m,
                             const TimeGrid& grid, const SolverConfig& cfg,
                             const FunctionalModel& F, const FunctionalModel& F_T) {
  const int d = m.dim();
  const Mat sigma = sigma_or_zero(cfg, d);
  const double dt = grid.dt();
  const EmpiricalMeasure mp = with_zero_weight_atom(m, x);
  const int probe = mp.size() - 1;

  const auto bundle = solve_first_order(F, F_T, identity_field(mp), mp, grid, cfg);
  const auto xder = solve_x_derivative(bundle, F, F_T, mp, cfg);
  const auto bars = solve_measure_derivative(bundle, xder, F, F_T, mp, probe, cfg);
  const auto ut = value_from_bundle(bundle, mp, cfg, F, F_T);
  const auto ut_next = value(mp, grid.restarted_at(1), cfg, F, F_T);

  auto raw_u = [](const ValueReport& r, int i) { return r.delta_V[i] + r.delta_V_offset; };

  MasterReport rep;
  rep.t = grid.t0;
  rep.dt = dt;
  rep.M = cfg.M;
  rep.seed = cfg.seed;
  rep.probe = x;

  rep.time_term = -(raw_u(ut_next, probe) - raw_u(ut, probe)) / dt;
  rep.trace_term = operator_A(atom_mean_matrix(xder.Z[0], probe, d), sigma);
  rep.grad_sq_term = atom_mean(bundle.Z[0], probe).squaredNorm() / (2.0 * cfg.lambda);
  for (int i = 0; i < m.size(); ++i) {
    rep.trace_bar_term +=
        mp.weights()[i] * operator_A(atom_mean_matrix(bars.bar2.Z[0], i, d), sigma);
    rep.cross_term += mp.weights()[i] *
                      atom_mean(bundle.Z[0], i).dot(atom_mean(bars.bar.Z[0], i)) /
                      cfg.lambda;
  }
  rep.source_term = -F.delta(mp, x);
  rep.raw_residual = rep.time_term + rep.trace_term + rep.trace_bar_term +
                     rep.grad_sq_term + rep.cross_term + rep.source_term;

  // The x-independent part of the identity: the additive constant in U is
  // pinned only at t = T, so the equation is checked up to the normalized
  // convention. The m-average of the bar terms vanishes by normalization, so
  // the shift is computable from the two main bundles alone.
  double avg_time = -(ut_next.delta_V_offset - ut.delta_V_offset) / dt;
  double avg_trace = 0.0, avg_grad = 0.0;
  for (int i = 0; i < m.size(); ++i) {
    avg_trace +=
        mp.weights()[i] * operator_A(atom_mean_matrix(xder.Z[0], i, d), sigma);
    avg_grad += mp.weights()[i] * atom_mean(bundle.Z[0], i).squaredNorm() /
                (2.0 * cfg.lambda);
  }
  rep.constant_shift = avg_time + avg_trace + avg_grad;
  rep.residual = rep.raw_residual - rep.constant_shift;

  const double pn2 = x.squaredNorm();
  rep.bar_y_bound = bar_bound(bars.bar.Y, mp, pn2);
  rep.bar_z_bound = bar_bound(bars.bar.Z, mp, pn2);
  rep.bar2_y_bound = bar_bound(bars.bar2.Y, mp, pn2);
  rep.bar2_z_bound = bar_bound(bars.bar2.Z, mp, pn2);
  return rep;
}

MasterReport master_residual_averaged(ConstVecRef x, const EmpiricalMeasure& m,
                                      const TimeGrid& grid, const SolverConfig& cfg,
                                      const FunctionalModel& F, const FunctionalModel& F_T,
                                      int replications) {
  require(replications >= 1, "need at least one replication");
  std::vector<MasterReport> reps;
  for (int r = 0; r < replications; ++r)
    reps.push_back(master_residual(x, m, grid,
                                   cfg.with_seed(cfg.seed + static_cast<uint64_t>(r)),
                                   F, F_T));
  MasterReport avg = reps[0];
  avg.residual = avg.raw_residual = avg.constant_shift = avg.time_term = 0.0;
  avg.trace_term = avg.trace_bar_term = avg.grad_sq_term = avg.cross_term = 0.0;
  avg.source_term = 0.0;
  avg.bar_y_bound = avg.bar_z_bound = avg.bar2_y_bound = avg.bar2_z_bound = 0.0;
  for (const auto& r : reps) {
    avg.residual += r.residual;
    avg.raw_residual += r.raw_residual;
    avg.constant_shift += r.constant_shift;
    avg.time_term += r.time_term;
    avg.trace_term += r.trace_term;
    avg.trace_bar_term += r.trace_bar_term;
    avg.grad_sq_term += r.grad_sq_term;
    avg.cross_term += r.cross_term;
    avg.source_term += r.source_term;
    avg.bar_y_bound = std::max(avg.bar_y_bound, r.bar_y_bound);
    avg.bar_z_bound = std::max(avg.bar_z_bound, r.bar_z_bound);
    avg.bar2_y_bound = std::max(avg.bar2_y_bound, r.bar2_y_bound);
    avg.bar2_z_bound = std::max(avg.bar2_z_bound, r.bar2_z_bound);
  }
  const double n = replications;
  avg.residual /= n;
  avg.raw_residual /= n;
  avg.constant_shift /= n;
  avg.time_term /= n;
  avg.trace_term /= n;
  avg.trace_bar_term /= n;
  avg.grad_sq_term /= n;
  avg.cross_term /= n;
  avg.source_term /= n;
  if (replications > 1) {
    double var = 0.0;
    for (const auto& r : reps) var += (r.residual - avg.residual) * (r.residual - avg.residual);
    avg.residual_stderr = std::sqrt(var / (n - 1) / n);
  }
  return avg;
}

MasterReport master_residual_oracle(const LQSpec& spec, const RiccatiSolution& ric,
                                    const EmpiricalMeasure& m, double t, ConstVecRef x,
                                    double fd_h) {
  const int d = m.dim();
  const Mat sigma = spec.sigma.size() ? spec.sigma : Mat::Zero(d, d);
  MasterReport rep;
  rep.t = t;
  rep.dt = fd_h;
  rep.probe = x;
  const double hu = std::min(fd_h, 0.5 * (spec.T - t));
  rep.time_term =
      -(lq_U(spec, ric, m, t + hu, x) - lq_U(spec, ric, m, t - hu, x)) / (2.0 * hu);
  rep.trace_term = operator_A(lq_D2U(ric, d, t), sigma);
  rep.trace_bar_term = 0.0;  // the x-derivative pair carries no measure coupling
  rep.grad_sq_term = lq_DU(ric, m, t, x).squaredNorm() / (2.0 * spec.lambda);
  const Vec zbar = lq_Zbar(ric, m, t, x);
  for (int i = 0; i < m.size(); ++i)
    rep.cross_term +=
        m.weights()[i] * lq_DU(ric, m, t, m.atom(i)).dot(zbar) / spec.lambda;
  const auto F = spec.running();
  rep.source_term = -F->delta(m, x);
  rep.raw_residual = rep.time_term + rep.trace_term + rep.trace_bar_term +
                     rep.grad_sq_term + rep.cross_term + rep.source_term;
  rep.constant_shift = 0.0;  // closed form carries the exact constant
  rep.residual = rep.raw_residual;
  return rep;
}

FlowResult decoupled_flow(ConstVecRef x, const EmpiricalMeasure& m, const TimeGrid& grid,
                          const SolverConfig& cfg, const FunctionalModel& F,
                          const FunctionalModel& F_T, const FlowOptions& opt) {
  const int d = m.dim();
  const Mat sigma = sigma_or_zero(cfg, d);
  const double dt = grid.dt();
  const EmpiricalMeasure mp = with_zero_weight_atom(m, x);
  const int probe = mp.size() - 1;

  const auto reference = solve_first_order(F, F_T, identity_field(mp), mp, grid, cfg);
  const int M = reference.Y[1].outcomes();
  const auto dW = brownian_increments(grid, M, d, cfg.seed, cfg.antithetic);

  const long est_work = static_cast<long>(grid.K) * grid.K * opt.inner_cap_atoms *
                        opt.inner_M / 2;
  if (est_work > opt.budget)
    throw std::runtime_error("decoupled_flow: nested-solve budget exceeded");

  SolverConfig inner_cfg = cfg;
  inner_cfg.M = opt.inner_M;
  CounterRng rng(cfg.seed);

  FlowResult out;
  LiftedField flow(M, mp.size(), d, mp.id());
  for (int w = 0; w < M; ++w)
    for (int i = 0; i < mp.size(); ++i) flow.at(w, i) = mp.atom(i);

  for (int k = 0; k < grid.K; ++k) {
    // decoupling gradient at the current measure: value solve restarted here
    const EmpiricalMeasure mu_k = tensor(flow, mp);
    const EmpiricalMeasure inner_m =
        compress_measure(mu_k, opt.inner_cap_atoms, rng, static_cast<uint64_t>(k) + 101);
    const auto inner_bundle = solve_first_order(F, F_T, identity_field(inner_m), inner_m,
                                                grid.restarted_at(k), inner_cfg);
    ++out.inner_solves;
    const auto& fit = inner_bundle.z_fit[0];

    LiftedField next(M, mp.size(), d, mp.id());
    for (int w = 0; w < M; ++w) {
      const Vec kick = sigma * dW[static_cast<size_t>(k)].row(w).transpose();
      for (int i = 0; i < mp.size(); ++i)
        next.at(w, i) =
            flow.at(w, i) - dt / cfg.lambda * fit.predict(flow.at(w, i)) + kick;
    }
    flow = std::move(next);

    FlowRow row;
    row.step = k + 1;
    row.s = grid.time(k + 1);
    const auto& ref = reference.Y[static_cast<size_t>(k + 1)];
    double pgap = 0.0, popgap = 0.0;
    for (int w = 0; w < M; ++w) {
      pgap += (flow.at(w, probe) - ref.at(ref.wrap(w), probe)).squaredNorm();
      for (int i = 0; i < m.size(); ++i)
        popgap += mp.weights()[i] *
                  (flow.at(w, i) - ref.at(ref.wrap(w), i)).squaredNorm();
    }
    row.probe_gap = std::sqrt(pgap / M);
    row.population_gap = std::sqrt(popgap / M);
    out.max_probe_gap = std::max(out.max_probe_gap, row.probe_gap);
    out.max_population_gap = std::max(out.max_population_gap, row.population_gap);
    out.rows.push_back(row);
  }
  return out;
}

QuadraticProbe gaussian_probe_quadratic(const PathBundle& first,
                                        const FunctionalModel& F,
                                        const FunctionalModel& F_T,
                                        const EmpiricalMeasure& m,
                                        const SolverConfig& cfg, int probe_outcomes) {
  const int d = m.dim();
  const Mat sigma = sigma_or_zero(cfg, d);
  CounterRng rng(cfg.seed);
  const auto probe = GaussianProbe::draw(probe_outcomes, d, rng, 7);
  LiftedField N = probe_field(probe, m);
  LiftedField sN(N.outcomes(), N.atoms(), d, m.id());
  for (int w = 0; w < N.outcomes(); ++w)
    for (int i = 0; i < N.atoms(); ++i) sN.at(w, i) = sigma * N.at(w, i);

  const auto second = solve_second_order(first, sN, F, F_T, m, cfg);
  QuadraticProbe out;
  out.lhs = inner(second.Z[0], sN, m);
  const auto xder = solve_x_derivative(first, F, F_T, m, cfg);
  for (int i = 0; i < m.size(); ++i)
    out.rhs += m.weights()[i] *
               (sigma * sigma.transpose() * atom_mean_matrix(xder.Z[0], i, d)).trace();
  return out;
}

void save_bellman_csv(const std::vector<BellmanReport>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write bellman csv: " + path);
  out.precision(17);
  out << "t,dt,M,seed,residual,time_term,trace_term,grad_sq_term,source_term\n";
  for (const auto& r : rows)
    out << r.t << "," << r.dt << "," << r.M << "," << r.seed << "," << r.residual << ","
        << r.time_term << "," << r.trace_term << "," << r.grad_sq_term << ","
        << r.source_term << "\n";
}

void save_master_csv(const std::vector<MasterReport>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write master csv: " + path);
  out.precision(17);
  out << "t,dt,M,seed,probe,residual,raw_residual,constant_shift,time_term,trace_term,"
         "trace_bar_term,grad_sq_term,cross_term,source_term,bar_y_bound,bar_z_bound,"
         "bar2_y_bound,bar2_z_bound\n";
  for (const auto& r : rows) {
    out << r.t << "," << r.dt << "," << r.M << "," << r.seed << ",";
    for (int c = 0; c < r.probe.size(); ++c)
      out << r.probe[c] << (c + 1 < r.probe.size() ? ";" : "");
    out << "," << r.residual << "," << r.raw_residual << "," << r.constant_shift << ","
        << r.time_term << "," << r.trace_term << "," << r.trace_bar_term << ","
        << r.grad_sq_term << "," << r.cross_term << "," << r.source_term << ","
        << r.bar_y_bound << "," << r.bar_z_bound << "," << r.bar2_y_bound << ","
        << r.bar2_z_bound << "\n";
  }
}

}  // namespace mflab
