#include "mflab/control.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

namespace mflab {

namespace {

int run_outcomes(const SolverConfig& cfg, const LiftedField& X0) {
  const bool noiseless = cfg.sigma.size() == 0 || cfg.sigma.cwiseAbs().maxCoeff() == 0.0;
  return (noiseless && X0.outcomes() == 1) ? 1 : std::max(cfg.M, X0.outcomes());
}

Mat sigma_or_zero(const SolverConfig& cfg, int d) {
  return cfg.sigma.size() ? cfg.sigma : Mat::Zero(d, d);
}

}  // namespace

double ControlPath::l2_norm(const EmpiricalMeasure& m) const {
  double acc = 0.0;
  for (const auto& vk : v) {
    const double n = field_norm(vk, m);
    acc += grid.dt() * n * n;
  }
  return std::sqrt(acc);
}

ControlPath zero_control(const EmpiricalMeasure& m, const TimeGrid& grid) {
  ControlPath out;
  out.grid = grid;
  out.v.assign(static_cast<size_t>(grid.K), LiftedField(1, m.size(), m.dim(), m.id()));
  return out;
}

ControlPath random_feedback_control(const LiftedField& X0, const EmpiricalMeasure& m,
                                    const TimeGrid& grid, const SolverConfig& cfg,
                                    uint64_t slot, double scale) {
  const int d = m.dim();
  const int M = run_outcomes(cfg, X0);
  const Mat sigma = sigma_or_zero(cfg, d);
  const auto dW = brownian_increments(grid, M, d, cfg.seed, cfg.antithetic);
  CounterRng rng(cfg.seed);

  ControlPath out;
  out.grid = grid;
  out.v.reserve(static_cast<size_t>(grid.K));
  LiftedField X(M, m.size(), d, m.id());
  for (int w = 0; w < M; ++w)
    for (int i = 0; i < m.size(); ++i) X.at(w, i) = X0.at(X0.wrap(w), i);
  for (int k = 0; k < grid.K; ++k) {
    Vec alpha(d);
    Mat beta(d, d);
    for (int c = 0; c < d; ++c) {
      alpha[c] = scale * rng.normal(Stream::kField, slot, static_cast<uint64_t>(k),
                                    static_cast<uint64_t>(c));
      for (int c2 = 0; c2 < d; ++c2)
        beta(c, c2) = scale * rng.normal(Stream::kField, slot,
                                         static_cast<uint64_t>(k),
                                         static_cast<uint64_t>(d + c * d + c2));
    }
    LiftedField vk(M, m.size(), d, m.id());
    for (int w = 0; w < M; ++w)
      for (int i = 0; i < m.size(); ++i) vk.at(w, i) = alpha + beta * X.at(w, i);
    for (int w = 0; w < M; ++w)
      for (int i = 0; i < m.size(); ++i)
        X.at(w, i) += grid.dt() * vk.at(w, i) + sigma * dW[static_cast<size_t>(k)].row(w).transpose();
    out.v.push_back(std::move(vk));
  }
  return out;
}

std::vector<LiftedField> simulate_path(const ControlPath& v, const LiftedField& X0,
                                       const EmpiricalMeasure& m,
                                       const SolverConfig& cfg) {
  const int d = m.dim();
  const int K = v.grid.K;
  int M = run_outcomes(cfg, X0);
  for (const auto& vk : v.v) M = std::max(M, vk.outcomes());
  const Mat sigma = sigma_or_zero(cfg, d);
  const auto dW = brownian_increments(v.grid, M, d, cfg.seed, cfg.antithetic);
  const double dt = v.grid.dt();

  std::vector<LiftedField> X(static_cast<size_t>(K + 1));
  X[0] = X0;
  for (int k = 0; k < K; ++k) {
    const auto& Xk = X[static_cast<size_t>(k)];
    const auto& vk = v.v[static_cast<size_t>(k)];
    LiftedField next(M, m.size(), d, m.id());
    for (int w = 0; w < M; ++w) {
      const Vec kick = sigma * dW[static_cast<size_t>(k)].row(w).transpose();
      for (int i = 0; i < m.size(); ++i)
        next.at(w, i) = Xk.at(Xk.wrap(w), i) + dt * vk.at(vk.wrap(w), i) + kick;
    }
    X[static_cast<size_t>(k + 1)] = std::move(next);
  }
  return X;
}

double cost(const ControlPath& v, const LiftedField& X0, const EmpiricalMeasure& m,
            const SolverConfig& cfg, const FunctionalModel& F, const FunctionalModel& F_T) {
  const auto X = simulate_path(v, X0, m, cfg);
  const double dt = v.grid.dt();
  double J = 0.0;
  for (const auto& vk : v.v) {
    const double n = field_norm(vk, m);
    J += 0.5 * cfg.lambda * dt * n * n;
  }
  for (int k = 1; k <= v.grid.K; ++k)
    J += dt * F.value(tensor(X[static_cast<size_t>(k)], m));
  J += F_T.value(tensor(X[static_cast<size_t>(v.grid.K)], m));
  return J;
}

GradientResult cost_gradient(const ControlPath& v, const LiftedField& X0,
                             const EmpiricalMeasure& m, const SolverConfig& cfg,
                             const FunctionalModel& F, const FunctionalModel& F_T) {
  const auto X = simulate_path(v, X0, m, cfg);
  const int K = v.grid.K;
  const double dt = v.grid.dt();
  RegressOptions ropt{cfg.basis_degree, cfg.threads};

  GradientResult out;
  out.gradient.grid = v.grid;
  out.gradient.v.resize(static_cast<size_t>(K));

  LiftedField acc;
  F_T.grad_delta_field(X[static_cast<size_t>(K)], m, acc);
  double norm_sq = 0.0;
  for (int k = K - 1; k >= 0; --k) {
    LiftedField g;
    F.grad_delta_field(X[static_cast<size_t>(k + 1)], m, g);
    acc = axpy(dt, g, acc);
    // project the future sources on the step-k state
    const auto& state = X[static_cast<size_t>(k)];
    LiftedField fitted;
    if (state.outcomes() == 1 && acc.outcomes() == 1) {
      fitted = acc;
    } else if (state.outcomes() == 1) {
      LiftedField mean(1, state.atoms(), acc.comps(), m.id());
      for (int i = 0; i < state.atoms(); ++i) {
        Vec s = Vec::Zero(acc.comps());
        for (int w = 0; w < acc.outcomes(); ++w) s += acc.at(w, i);
        mean.at(0, i) = s / acc.outcomes();
      }
      fitted = std::move(mean);
    } else {
      auto rr = regress_conditional(acc, state, m, ropt);
      out.regression_fallback = out.regression_fallback || rr.fallback_mean;
      fitted = std::move(rr.fitted);
    }
    LiftedField gk = axpy(cfg.lambda, v.v[static_cast<size_t>(k)], fitted);
    const double n = field_norm(gk, m);
    norm_sq += dt * n * n;
    out.gradient.v[static_cast<size_t>(k)] = std::move(gk);
  }
  out.norm = std::sqrt(norm_sq);
  return out;
}

MinimizeResult minimize(const LiftedField& X0, const EmpiricalMeasure& m,
                        const TimeGrid& grid, const SolverConfig& cfg,
                        const FunctionalModel& F, const FunctionalModel& F_T,
                        const MinimizeOptions& opt) {
  validate_margins(F, F_T, cfg.lambda, grid.T - grid.t0);
  MinimizeResult res;
  res.control = zero_control(m, grid);
  double J = cost(res.control, X0, m, cfg, F, F_T);
  double lr = opt.lr;
  if (lr <= 0.0) {
    const auto k = margin_constants(F, F_T, cfg.lambda, grid.T - grid.t0);
    lr = 1.0 / (cfg.lambda + k.T * k.c + k.c_T + 1.0);
  }

  const double lr_base = lr;
  const double J_start = J;
  for (int iter = 0; iter < opt.max_iters; ++iter) {
    auto g = cost_gradient(res.control, X0, m, cfg, F, F_T);
    res.gradient_norm = g.norm;
    res.iterations = iter;
    if (g.norm <= opt.tol) {
      res.converged = true;
      break;
    }
    lr = std::min(lr_base, 2.0 * lr);
    int halvings = 0;
    bool stalled = false;
    for (;; ++halvings) {
      if (halvings > opt.max_halvings) {
        // The regression-estimated direction stops descending once the true
        // gradient falls below the Monte-Carlo projection noise. Treat that
        // as the attainable optimum; a failure to ever improve is divergence.
        if (J < J_start || g.norm <= opt.tol) {
          stalled = true;
          break;
        }
        throw std::runtime_error("minimize: step size underflow without progress");
      }
      ControlPath trial;
      trial.grid = grid;
      trial.v.resize(static_cast<size_t>(grid.K));
      for (int k = 0; k < grid.K; ++k)
        trial.v[static_cast<size_t>(k)] =
            axpy(-lr, g.gradient.v[static_cast<size_t>(k)],
                 res.control.v[static_cast<size_t>(k)]);
      const double J_new = cost(trial, X0, m, cfg, F, F_T);
      if (J_new <= J) {
        res.control = std::move(trial);
        J = J_new;
        break;
      }
      lr *= 0.5;
    }
    if (stalled) {
      res.converged = true;
      break;
    }
  }
  res.cost_value = J;
  return res;
}

ConvexityReport convexity_check(const ControlPath& v1, const ControlPath& v2,
                                const LiftedField& X0, const EmpiricalMeasure& m,
                                const SolverConfig& cfg, const FunctionalModel& F,
                                const FunctionalModel& F_T) {
  const auto g1 = cost_gradient(v1, X0, m, cfg, F, F_T);
  const auto g2 = cost_gradient(v2, X0, m, cfg, F, F_T);
  const double dt = v1.grid.dt();
  ConvexityReport rep;
  double dist_sq = 0.0;
  for (int k = 0; k < v1.grid.K; ++k) {
    const LiftedField dv = axpy(-1.0, v2.v[static_cast<size_t>(k)],
                                v1.v[static_cast<size_t>(k)]);
    const LiftedField dg = axpy(-1.0, g2.gradient.v[static_cast<size_t>(k)],
                                g1.gradient.v[static_cast<size_t>(k)]);
    rep.pairing += dt * inner(dg, dv, m);
    const double n = field_norm(dv, m);
    dist_sq += dt * n * n;
  }
  const auto kc = margin_constants(F, F_T, cfg.lambda, v1.grid.T - v1.grid.t0);
  rep.threshold = kc.convexity_margin() * dist_sq;
  rep.margin = rep.pairing - rep.threshold;
  rep.control_distance = std::sqrt(dist_sq);
  return rep;
}

ValueReport value_from_bundle(const PathBundle& bundle, const EmpiricalMeasure& m,
                              const SolverConfig& cfg, const FunctionalModel& F,
                              const FunctionalModel& F_T) {
  const int K = bundle.grid.K;
  const double dt = bundle.grid.dt();
  ValueReport rep;
  rep.t = bundle.grid.t0;
  rep.seed = cfg.seed;
  rep.M = cfg.M;
  rep.K = K;
  rep.diag = bundle.diag;

  double V = 0.0;
  for (int k = 0; k < K; ++k) {
    const double zn = bundle.z_norm(m, k);
    V += dt / (2.0 * cfg.lambda) * zn * zn;
  }
  const int N = m.size();
  Vec raw = Vec::Zero(N);
  for (int k = 0; k < K; ++k) {
    const auto& Zk = bundle.Z[static_cast<size_t>(k)];
    for (int i = 0; i < N; ++i) {
      double s = 0.0;
      for (int w = 0; w < Zk.outcomes(); ++w) s += Zk.at(w, i).squaredNorm();
      raw[i] += dt / (2.0 * cfg.lambda) * s / Zk.outcomes();
    }
  }
  for (int k = 1; k <= K; ++k) {
    LiftedField df;
    F.delta_field(bundle.Y[static_cast<size_t>(k)], m, df);
    V += dt * F.value(tensor(bundle.Y[static_cast<size_t>(k)], m));
    for (int i = 0; i < N; ++i) {
      double s = 0.0;
      for (int w = 0; w < df.outcomes(); ++w) s += df(w, i, 0);
      raw[i] += dt * s / df.outcomes();
    }
  }
  {
    LiftedField dfT;
    F_T.delta_field(bundle.Y[static_cast<size_t>(K)], m, dfT);
    V += F_T.value(tensor(bundle.Y[static_cast<size_t>(K)], m));
    for (int i = 0; i < N; ++i) {
      double s = 0.0;
      for (int w = 0; w < dfT.outcomes(); ++w) s += dfT(w, i, 0);
      raw[i] += s / dfT.outcomes();
    }
  }
  rep.V = V;
  rep.delta_V_offset = m.weights().dot(raw);
  rep.delta_V = raw.array() - rep.delta_V_offset;
  rep.grad_delta_V.resize(N, m.dim());
  const auto& Z0 = bundle.Z[0];
  for (int i = 0; i < N; ++i) {
    Vec s = Vec::Zero(m.dim());
    for (int w = 0; w < Z0.outcomes(); ++w) s += Z0.at(w, i);
    rep.grad_delta_V.row(i) = (s / Z0.outcomes()).transpose();
  }
  const double xn2 = m.second_moment();
  rep.growth_ratio = std::abs(V) / (1.0 + xn2);
  return rep;
}

ValueReport value(const EmpiricalMeasure& m, const TimeGrid& grid,
                  const SolverConfig& cfg, const FunctionalModel& F,
                  const FunctionalModel& F_T) {
  if (grid.K == 0 || grid.T - grid.t0 <= 0.0) {
    // empty horizon: terminal data evaluated directly
    ValueReport rep;
    rep.t = grid.t0;
    rep.seed = cfg.seed;
    rep.M = cfg.M;
    rep.K = 0;
    rep.V = F_T.value(m);
    rep.delta_V.resize(m.size());
    rep.grad_delta_V.resize(m.size(), m.dim());
    for (int i = 0; i < m.size(); ++i) {
      rep.delta_V[i] = F_T.delta(m, m.atom(i));
      rep.grad_delta_V.row(i) = F_T.grad_delta(m, m.atom(i)).transpose();
    }
    rep.delta_V_offset = m.weights().dot(rep.delta_V);
    rep.delta_V.array() -= rep.delta_V_offset;
    rep.growth_ratio = std::abs(rep.V) / (1.0 + m.second_moment());
    rep.diag.converged = true;
    return rep;
  }
  const auto bundle = solve_first_order(F, F_T, identity_field(m), m, grid, cfg);
  return value_from_bundle(bundle, m, cfg, F, F_T);
}

ReplicatedValue value_replicated(const EmpiricalMeasure& m, const TimeGrid& grid,
                                 const SolverConfig& cfg, const FunctionalModel& F,
                                 const FunctionalModel& F_T, int replications) {
  require(replications >= 1, "value_replicated: need at least one replication");
  ReplicatedValue out;
  std::vector<ValueReport> reps;
  reps.reserve(static_cast<size_t>(replications));
  for (int r = 0; r < replications; ++r)
    reps.push_back(value(m, grid, cfg.with_seed(cfg.seed + static_cast<uint64_t>(r)),
                         F, F_T));
  out.mean = reps[0];
  const int N = m.size();
  Vec Vsum = Vec::Zero(replications);
  Vec dsum = Vec::Zero(N), dsq = Vec::Zero(N);
  Mat gsum = Mat::Zero(N, m.dim()), gsq = Mat::Zero(N, m.dim());
  for (int r = 0; r < replications; ++r) {
    Vsum[r] = reps[static_cast<size_t>(r)].V;
    dsum += reps[static_cast<size_t>(r)].delta_V;
    dsq += reps[static_cast<size_t>(r)].delta_V.cwiseAbs2();
    gsum += reps[static_cast<size_t>(r)].grad_delta_V;
    gsq += reps[static_cast<size_t>(r)].grad_delta_V.cwiseAbs2();
  }
  out.V_samples.assign(Vsum.data(), Vsum.data() + replications);
  const double vmean = Vsum.mean();
  out.mean.V = vmean;
  out.mean.delta_V = dsum / replications;
  out.mean.grad_delta_V = gsum / replications;
  if (replications > 1) {
    out.V_stderr = std::sqrt(std::max(0.0, (Vsum.array() - vmean).square().sum() /
                                               (replications - 1) / replications));
    out.delta_V_stderr =
        ((dsq / replications - out.mean.delta_V.cwiseAbs2()).cwiseMax(0.0) /
         std::max(1, replications - 1))
            .cwiseSqrt();
    out.grad_stderr =
        ((gsq / replications - out.mean.grad_delta_V.cwiseAbs2()).cwiseMax(0.0) /
         std::max(1, replications - 1))
            .cwiseSqrt();
  } else {
    out.delta_V_stderr = Vec::Zero(N);
    out.grad_stderr = Mat::Zero(N, m.dim());
  }
  return out;
}

EmpiricalMeasure compress_measure(const EmpiricalMeasure& mu, int cap,
                                  const CounterRng& rng, uint64_t slot) {
  if (mu.size() <= cap) return mu;
  // Shuffle before the systematic sweep: pushed measures list atoms in
  // outcome-major order, and a strided sweep over that periodic layout
  // aliases onto a biased subset of atoms.
  std::vector<int> order(static_cast<size_t>(mu.size()));
  std::iota(order.begin(), order.end(), 0);
  for (int i = mu.size() - 1; i > 0; --i) {
    const double u = rng.uniform(Stream::kResample, slot, 1, static_cast<uint64_t>(i));
    const int j = std::min(i, static_cast<int>(u * (i + 1)));
    std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
  }
  const double u0 = rng.uniform(Stream::kResample, slot, 0, 0);
  Mat atoms(cap, mu.dim());
  double cum = 0.0;
  int pos = 0;
  for (int s = 0; s < cap; ++s) {
    const double target = (s + u0) / cap;
    while (pos < mu.size() - 1 &&
           cum + mu.weights()[order[static_cast<size_t>(pos)]] < target)
      cum += mu.weights()[order[static_cast<size_t>(pos++)]];
    atoms.row(s) = mu.atoms().row(order[static_cast<size_t>(pos)]);
  }
  return make_empirical(atoms);
}

std::vector<DppRow> dpp_residual(const EmpiricalMeasure& m, const TimeGrid& grid,
                                 const SolverConfig& cfg, const FunctionalModel& F,
                                 const FunctionalModel& F_T,
                                 const std::vector<int>& h_steps, int cap_atoms,
                                 int inner_outcomes) {
  const auto bundle = solve_first_order(F, F_T, identity_field(m), m, grid, cfg);
  const auto base = value_from_bundle(bundle, m, cfg, F, F_T);
  const double dt = grid.dt();
  CounterRng rng(cfg.seed);

  std::vector<DppRow> rows;
  for (int j : h_steps) {
    require(j >= 1 && j <= grid.K, "dpp step must lie on the grid");
    DppRow row;
    row.h = j * dt;
    row.lhs = base.V;
    double running = 0.0;
    for (int k = 0; k < j; ++k) {
      const double zn = bundle.z_norm(m, k);
      running += dt / (2.0 * cfg.lambda) * zn * zn;
    }
    for (int k = 1; k <= j; ++k)
      running += dt * F.value(tensor(bundle.Y[static_cast<size_t>(k)], m));

    const EmpiricalMeasure pushed = tensor(bundle.Y[static_cast<size_t>(j)], m);
    const EmpiricalMeasure inner_m =
        compress_measure(pushed, cap_atoms, rng, static_cast<uint64_t>(j));
    row.inner_atoms = inner_m.size();
    row.resampled = inner_m.size() < pushed.size();
    SolverConfig inner_cfg = cfg;
    if (inner_outcomes > 0) inner_cfg.M = inner_outcomes;
    const auto inner = value(inner_m, grid.restarted_at(j), inner_cfg, F, F_T);
    row.rhs = running + inner.V;
    row.residual = std::abs(row.lhs - row.rhs);
    rows.push_back(row);
  }
  return rows;
}

std::vector<TimeRegularityRow> time_regularity_probe(const EmpiricalMeasure& m,
                                                     const TimeGrid& grid,
                                                     const SolverConfig& cfg,
                                                     const FunctionalModel& F,
                                                     const FunctionalModel& F_T,
                                                     const std::vector<int>& h_steps) {
  const auto X0 = identity_field(m);
  const auto base_bundle = solve_first_order(F, F_T, X0, m, grid, cfg);
  const auto base = value_from_bundle(base_bundle, m, cfg, F, F_T);
  const double xn = field_norm(X0, m);
  const double xn2 = xn * xn;
  const double dt = grid.dt();

  std::vector<TimeRegularityRow> rows;
  for (int j : h_steps) {
    require(j >= 1 && j < grid.K, "regularity step must lie inside the grid");
    const double h = j * dt;
    const auto shifted = solve_first_order(F, F_T, X0, m, grid.restarted_at(j), cfg);
    const auto shifted_rep = value_from_bundle(shifted, m, cfg, F, F_T);
    TimeRegularityRow row;
    row.h = h;
    row.value_ratio = std::abs(shifted_rep.V - base.V) / (h * (1.0 + xn2));
    const double dz =
        (shifted_rep.grad_delta_V - base.grad_delta_V)
            .cwiseAbs2()
            .rowwise()
            .sum()
            .dot(m.weights());
    row.gradient_ratio =
        std::sqrt(std::max(0.0, dz)) / ((std::sqrt(h) + h) * (1.0 + xn));
    rows.push_back(row);
  }
  return rows;
}

void save_value_csv(const ValueReport& rep, const EmpiricalMeasure& m,
                    const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write value csv: " + path);
  out.precision(17);
  for (int c = 0; c < m.dim(); ++c) out << "x_" << (c + 1) << ",";
  out << "weight,delta_V";
  for (int c = 0; c < m.dim(); ++c) out << ",grad_delta_V_" << (c + 1);
  out << "\n";
  for (int i = 0; i < m.size(); ++i) {
    for (int c = 0; c < m.dim(); ++c) out << m.atoms()(i, c) << ",";
    out << m.weights()[i] << "," << rep.delta_V[i];
    for (int c = 0; c < m.dim(); ++c) out << "," << rep.grad_delta_V(i, c);
    out << "\n";
  }
}

}  // namespace mflab
