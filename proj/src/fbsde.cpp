#include "mflab/fbsde.hpp"

#include <cmath>
#include <fstream>

#include "mflab/parallel.hpp"

namespace mflab {

AssumptionConstants margin_constants(const FunctionalModel& F, const FunctionalModel& F_T,
                                     double lambda, double horizon) {
  AssumptionConstants k;
  const auto bf = F.declared_bounds();
  const auto bt = F_T.declared_bounds();
  k.c = bf.c;
  k.c_T = bt.c;
  k.c_prime = bf.c_prime;
  k.c_prime_T = bt.c_prime;
  k.lambda = lambda;
  k.T = horizon;
  return k;
}

bool validate_margins(const FunctionalModel& F, const FunctionalModel& F_T,
                      double lambda, double horizon) {
  const auto k = margin_constants(F, F_T, lambda, horizon);
  if (k.convexity_margin() <= 0.0)
    throw std::invalid_argument(
        "lambda margin violated: lambda - T(c'_T + c'T/2) = " +
        std::to_string(k.convexity_margin()));
  return k.bellman_margin() > 0.0;
}

std::vector<Mat> brownian_increments(const TimeGrid& grid, int M, int d, uint64_t seed,
                                     bool antithetic) {
  CounterRng rng(seed);
  const double sdt = std::sqrt(grid.dt());
  std::vector<Mat> dW(static_cast<size_t>(grid.K));
  for (int k = 0; k < grid.K; ++k) {
    Mat& step = dW[static_cast<size_t>(k)];
    step.resize(M, d);
    for (int w = 0; w < M; ++w) {
      const uint64_t lane = antithetic ? static_cast<uint64_t>(w / 2)
                                       : static_cast<uint64_t>(w);
      const double sign = (antithetic && (w % 2 == 1)) ? -1.0 : 1.0;
      for (int c = 0; c < d; ++c)
        step(w, c) = sign * sdt *
                     rng.normal(Stream::kBrownian, lane,
                                static_cast<uint64_t>(grid.offset + k),
                                static_cast<uint64_t>(c));
    }
  }
  return dW;
}

// ---------------------------------------------------------------------------
// regression
// ---------------------------------------------------------------------------

namespace {

std::vector<std::vector<int>> monomials(int d, int degree) {
  std::vector<std::vector<int>> out;
  std::vector<int> expo(static_cast<size_t>(d), 0);
  std::function<void(int, int)> rec = [&](int pos, int remaining) {
    if (pos == d) {
      out.push_back(expo);
      return;
    }
    for (int e = 0; e <= remaining; ++e) {
      expo[static_cast<size_t>(pos)] = e;
      rec(pos + 1, remaining - e);
    }
    expo[static_cast<size_t>(pos)] = 0;
  };
  rec(0, degree);
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    int sa = 0, sb = 0;
    for (int e : a) sa += e;
    for (int e : b) sb += e;
    return sa < sb;
  });
  return out;
}

void eval_monomials(const std::vector<std::vector<int>>& mono, ConstVecRef y,
                    double* out) {
  for (size_t l = 0; l < mono.size(); ++l) {
    double v = 1.0;
    for (size_t c = 0; c < mono[l].size(); ++c)
      for (int e = 0; e < mono[l][c]; ++e) v *= y[static_cast<Eigen::Index>(c)];
    out[l] = v;
  }
}

struct Standardizer {
  Vec mean;
  Vec scale;
  Vec apply(ConstVecRef y) const { return (y - mean).cwiseQuotient(scale); }
};

Standardizer fit_standardizer(const LiftedField& state, const EmpiricalMeasure& m) {
  const int d = state.comps();
  Standardizer s;
  s.mean = Vec::Zero(d);
  s.scale = Vec::Ones(d);
  double wsum = 0.0;
  for (int w = 0; w < state.outcomes(); ++w)
    for (int i = 0; i < state.atoms(); ++i) {
      s.mean += m.weights()[i] * state.at(w, i);
      wsum += m.weights()[i];
    }
  if (wsum > 0) s.mean /= wsum;
  Vec var = Vec::Zero(d);
  for (int w = 0; w < state.outcomes(); ++w)
    for (int i = 0; i < state.atoms(); ++i)
      var += m.weights()[i] * (state.at(w, i) - s.mean).cwiseAbs2();
  if (wsum > 0) var /= wsum;
  for (int c = 0; c < d; ++c) s.scale[c] = var[c] > 1e-24 ? std::sqrt(var[c]) : 1.0;
  return s;
}

}  // namespace

Vec ZFit::predict(ConstVecRef y) const {
  const auto mono = monomials(static_cast<int>(state_mean.size()), degree);
  Vec phi(static_cast<Eigen::Index>(mono.size()));
  const Vec ys = (y - state_mean).cwiseQuotient(state_scale);
  eval_monomials(mono, ys, phi.data());
  return coeffs.transpose() * phi;
}

RegressResult regress_blocks(const LiftedField& targets, const LiftedField& state,
                             const EmpiricalMeasure& m,
                             const std::vector<const LiftedField*>& multipliers,
                             const RegressOptions& opt) {
  const int N = targets.atoms();
  const int C = targets.comps();
  const int sd = state.comps();
  int M_reg = state.outcomes();
  for (const auto* mult : multipliers) M_reg = std::max(M_reg, mult->outcomes());
  const int M_all = std::max(M_reg, targets.outcomes());

  const auto mono = monomials(sd, opt.degree);
  const int L = static_cast<int>(mono.size());
  int B = 0;
  if (multipliers.empty())
    B = L;
  else
    for (const auto* mult : multipliers) B += L * mult->comps();

  const Standardizer std_ = fit_standardizer(state, m);

  // allocation-free column fill against per-block workspaces
  auto fill_columns = [&](int w, int i, double* col, double* phi, double* ys) {
    for (int c = 0; c < sd; ++c)
      ys[c] = (state(state.wrap(w), i, c) - std_.mean[c]) / std_.scale[c];
    for (int l = 0; l < L; ++l) {
      double v = 1.0;
      const auto& expo = mono[static_cast<size_t>(l)];
      for (int c = 0; c < sd; ++c)
        for (int e = 0; e < expo[static_cast<size_t>(c)]; ++e) v *= ys[c];
      phi[l] = v;
    }
    if (multipliers.empty()) {
      for (int l = 0; l < L; ++l) col[l] = phi[l];
      return;
    }
    int idx = 0;
    for (const auto* mult : multipliers) {
      const int mc = mult->comps();
      const int mw = mult->wrap(w);
      for (int l = 0; l < L; ++l)
        for (int p = 0; p < mc; ++p) col[idx++] = phi[l] * (*mult)(mw, i, p);
    }
  };

  // deterministic block-parallel accumulation of the normal equations
  const int items = M_all * N;
  const int nb = num_blocks(items);
  std::vector<Mat> gram_part(static_cast<size_t>(nb), Mat::Zero(B, B));
  std::vector<Mat> rhs_part(static_cast<size_t>(nb), Mat::Zero(B, C));
  parallel_blocks(items, opt.threads, [&](int b, int i0, int i1) {
    std::vector<double> col(static_cast<size_t>(B)), phi(static_cast<size_t>(L)),
        ys(static_cast<size_t>(sd));
    Mat& gram = gram_part[static_cast<size_t>(b)];
    Mat& rhs = rhs_part[static_cast<size_t>(b)];
    for (int sidx = i0; sidx < i1; ++sidx) {
      const int w = sidx / N, i = sidx % N;
      const double wgt = m.weights()[i] / M_all;
      if (wgt == 0.0) continue;
      fill_columns(w, i, col.data(), phi.data(), ys.data());
      for (int b1 = 0; b1 < B; ++b1) {
        const double wc = wgt * col[static_cast<size_t>(b1)];
        for (int b2 = 0; b2 <= b1; ++b2) gram(b1, b2) += wc * col[static_cast<size_t>(b2)];
        for (int c = 0; c < C; ++c) rhs(b1, c) += wc * targets(targets.wrap(w), i, c);
      }
    }
  });
  Mat gram = Mat::Zero(B, B);
  Mat rhs = Mat::Zero(B, C);
  for (int b = 0; b < nb; ++b) {
    gram += gram_part[static_cast<size_t>(b)];
    rhs += rhs_part[static_cast<size_t>(b)];
  }
  gram = Mat(gram.selfadjointView<Eigen::Lower>());

  RegressResult res;
  Eigen::LDLT<Mat> ldlt(gram);
  bool ok = ldlt.info() == Eigen::Success;
  if (ok) {
    const Vec dvec = ldlt.vectorD().cwiseAbs();
    ok = dvec.minCoeff() > 1e-13 * std::max(1e-300, dvec.maxCoeff());
  }
  if (ok) {
    res.coeffs = ldlt.solve(rhs);
    ok = res.coeffs.allFinite();
  }
  if (!ok) {
    // rank-deficient design: fall back to the weighted mean
    res.fallback_mean = true;
    Vec meanv = Vec::Zero(C);
    double wsum = 0.0;
    for (int w = 0; w < M_all; ++w)
      for (int i = 0; i < N; ++i) {
        meanv += m.weights()[i] * targets.at(targets.wrap(w), i);
        wsum += m.weights()[i];
      }
    meanv /= std::max(wsum * M_all, 1e-300);
    meanv *= static_cast<double>(M_all);
    LiftedField fitted(1, N, C, targets.measure_tag());
    for (int i = 0; i < N; ++i) fitted.at(0, i) = meanv;
    res.fitted = std::move(fitted);
    res.coeffs = Mat::Zero(1, C);
    res.coeffs.row(0) = meanv.transpose();
    res.fit.degree = 0;
    res.fit.state_mean = std_.mean;
    res.fit.state_scale = std_.scale;
    res.fit.coeffs = res.coeffs;
    return res;
  }

  LiftedField fitted(M_reg, N, C, targets.measure_tag());
  const bool fused_diag = (M_reg == M_all);
  const int nb2 = num_blocks(M_reg * N);
  std::vector<Vec> colsq_part(static_cast<size_t>(nb2), Vec::Zero(B));
  std::vector<Vec> dot_part(static_cast<size_t>(nb2), Vec::Zero(B));
  std::vector<double> rsq_part(static_cast<size_t>(nb2), 0.0);
  parallel_blocks(M_reg * N, opt.threads, [&](int b, int i0, int i1) {
    std::vector<double> col(static_cast<size_t>(B)), phi(static_cast<size_t>(L)),
        ys(static_cast<size_t>(sd));
    for (int sidx = i0; sidx < i1; ++sidx) {
      const int w = sidx / N, i = sidx % N;
      fill_columns(w, i, col.data(), phi.data(), ys.data());
      double rsum = 0.0, rn = 0.0;
      const double wgt = m.weights()[i] / M_all;
      for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        for (int b1 = 0; b1 < B; ++b1) acc += res.coeffs(b1, c) * col[static_cast<size_t>(b1)];
        fitted(w, i, c) = acc;
        if (fused_diag && wgt > 0.0) {
          const double r = targets(targets.wrap(w), i, c) - acc;
          rsum += r;
          rn += r * r;
        }
      }
      if (fused_diag && wgt > 0.0) {
        rsq_part[static_cast<size_t>(b)] += wgt * rn;
        for (int b1 = 0; b1 < B; ++b1) {
          colsq_part[static_cast<size_t>(b)][b1] += wgt * col[static_cast<size_t>(b1)] * col[static_cast<size_t>(b1)];
          dot_part[static_cast<size_t>(b)][b1] += wgt * col[static_cast<size_t>(b1)] * rsum;
        }
      }
    }
  });

  // martingale diagnostic: weighted correlation of residuals with columns
  double max_corr = 0.0;
  if (fused_diag) {
    Vec col_sq = Vec::Zero(B), dot = Vec::Zero(B);
    double res_sq = 0.0;
    for (int b = 0; b < nb2; ++b) {
      col_sq += colsq_part[static_cast<size_t>(b)];
      dot += dot_part[static_cast<size_t>(b)];
      res_sq += rsq_part[static_cast<size_t>(b)];
    }
    for (int b1 = 0; b1 < B; ++b1) {
      const double denom = std::sqrt(col_sq[b1] * res_sq);
      if (denom > 1e-14) max_corr = std::max(max_corr, std::abs(dot[b1]) / denom);
    }
  }
  res.max_residual_correlation = max_corr;
  res.fitted = std::move(fitted);
  if (multipliers.empty()) {
    res.fit.degree = opt.degree;
    res.fit.state_mean = std_.mean;
    res.fit.state_scale = std_.scale;
    res.fit.coeffs = res.coeffs;
  }
  return res;
}

RegressResult regress_conditional(const LiftedField& targets, const LiftedField& state,
                                  const EmpiricalMeasure& m, const RegressOptions& opt) {
  return regress_blocks(targets, state, m, {}, opt);
}

// ---------------------------------------------------------------------------
// shared Picard machinery
// ---------------------------------------------------------------------------

namespace {

// exact conditional expectation when the conditioning information is
// deterministic per atom (initial step of identity-lift solves)
LiftedField per_atom_mean(const LiftedField& targets) {
  LiftedField out(1, targets.atoms(), targets.comps(), targets.measure_tag());
  for (int i = 0; i < targets.atoms(); ++i) {
    Vec acc = Vec::Zero(targets.comps());
    for (int w = 0; w < targets.outcomes(); ++w) acc += targets.at(w, i);
    out.at(0, i) = acc / targets.outcomes();
  }
  return out;
}

struct ProjectOutcome {
  LiftedField fitted;
  ZFit fit;
  bool fallback = false;
  double corr = 0.0;
};

ProjectOutcome project_step(const LiftedField& targets, const LiftedField& state,
                            const std::vector<const LiftedField*>& mults,
                            const EmpiricalMeasure& m, const RegressOptions& opt) {
  bool deterministic_info = state.outcomes() == 1;
  for (const auto* mult : mults)
    if (mult->outcomes() > 1) deterministic_info = false;
  ProjectOutcome out;
  if (deterministic_info && targets.outcomes() > 1) {
    out.fitted = per_atom_mean(targets);
    out.fit.per_atom = true;
    if (mults.empty()) {
      // polynomial surrogate kept for off-atom evaluation
      auto rr = regress_conditional(targets, state, m, opt);
      out.fit = rr.fit;
      out.fit.per_atom = true;
    }
    return out;
  }
  if (deterministic_info) {
    // fully deterministic data: conditional expectation is the identity
    out.fitted = targets;
    out.fit.per_atom = true;
    if (mults.empty()) {
      auto rr = regress_conditional(targets, state, m, opt);
      out.fit = rr.fit;
      out.fit.per_atom = true;
    }
    return out;
  }
  auto rr = mults.empty() ? regress_conditional(targets, state, m, opt)
                          : regress_blocks(targets, state, m, mults, opt);
  out.fitted = std::move(rr.fitted);
  out.fit = rr.fit;
  out.fallback = rr.fallback_mean;
  out.corr = rr.max_residual_correlation;
  return out;
}

// A[k+1] = A[k] - (dt/lambda) B[k] (+ sigma dW for the noisy system)
void forward_sweep(std::vector<LiftedField>& A, const std::vector<LiftedField>& B,
                   const LiftedField& init, double dt, double lambda,
                   const std::vector<Mat>* dW, const Mat* sigma, int threads,
                   uint64_t tag) {
  const int K = static_cast<int>(A.size()) - 1;
  const int N = init.atoms();
  const int comps = init.comps();
  A[0] = init;
  const double scale = dt / lambda;
  for (int k = 0; k < K; ++k) {
    int M_next = std::max(A[static_cast<size_t>(k)].outcomes(),
                          B[static_cast<size_t>(k)].outcomes());
    Mat kicks;
    if (dW) {
      M_next = std::max(M_next,
                        static_cast<int>((*dW)[static_cast<size_t>(k)].rows()));
      kicks = (*dW)[static_cast<size_t>(k)] * sigma->transpose();  // M x d
    }
    const auto& Ak = A[static_cast<size_t>(k)];
    const auto& Bk = B[static_cast<size_t>(k)];
    LiftedField next(M_next, N, comps, tag);
    parallel_blocks(M_next * N, threads, [&](int, int i0, int i1) {
      for (int sidx = i0; sidx < i1; ++sidx) {
        const int w = sidx / N, i = sidx % N;
        const int wa = Ak.wrap(w), wb = Bk.wrap(w);
        for (int c = 0; c < comps; ++c) {
          double v = Ak(wa, i, c) - scale * Bk(wb, i, c);
          if (dW) v += kicks(w, c);
          next(w, i, c) = v;
        }
      }
    });
    A[static_cast<size_t>(k + 1)] = std::move(next);
  }
}

double field_distance(const LiftedField& a, const LiftedField& b,
                      const EmpiricalMeasure& m) {
  const int M = std::max(a.outcomes(), b.outcomes());
  double acc = 0.0;
  for (int w = 0; w < M; ++w)
    for (int i = 0; i < a.atoms(); ++i)
      acc += m.weights()[i] * (a.at(a.wrap(w), i) - b.at(b.wrap(w), i)).squaredNorm();
  return std::sqrt(std::max(0.0, acc / M));
}

struct PicardCallbacks {
  std::function<LiftedField(int, const std::vector<LiftedField>&)> source;
  std::function<LiftedField(const std::vector<LiftedField>&)> terminal;
  std::function<std::vector<const LiftedField*>(int, const std::vector<LiftedField>&)>
      multipliers;
  std::function<const LiftedField*(int, const std::vector<LiftedField>&)> state;
};

PathBundle run_picard(const LiftedField& init, const EmpiricalMeasure& m,
                      const TimeGrid& grid, const SolverConfig& cfg, int comps,
                      const std::vector<Mat>* dW, const PicardCallbacks& cb) {
  PathBundle bundle;
  bundle.grid = grid;
  bundle.comps = comps;
  const int K = grid.K;
  const double dt = grid.dt();
  bundle.Y.resize(static_cast<size_t>(K + 1));
  bundle.Z.assign(static_cast<size_t>(K + 1), LiftedField(1, init.atoms(), comps, m.id()));
  bundle.z_fit.resize(static_cast<size_t>(K + 1));
  if (dW) bundle.dW = *dW;

  RegressOptions ropt{cfg.basis_degree, cfg.threads};
  double theta = cfg.damping;
  double prev_residual = std::numeric_limits<double>::infinity();
  int calm_streak = 0;
  std::vector<LiftedField> prev_delta;
  double prev_rho = std::numeric_limits<double>::quiet_NaN();
  auto& diag = bundle.diag;

  for (int iter = 0; iter < cfg.max_iters; ++iter) {
    forward_sweep(bundle.Y, bundle.Z, init, dt, cfg.lambda, dW,
                  dW ? &cfg.sigma : nullptr, cfg.threads, m.id());

    double residual = 0.0;
    double max_corr = 0.0;
    bool fallback = false;
    LiftedField acc = cb.terminal(bundle.Y);
    std::vector<LiftedField> z_new(static_cast<size_t>(K + 1));
    z_new[static_cast<size_t>(K)] = acc;
    for (int k = K - 1; k >= 0; --k) {
      acc = axpy(dt, cb.source(k + 1, bundle.Y), acc);
      auto mults = cb.multipliers(k, bundle.Y);
      auto proj = project_step(acc, *cb.state(k, bundle.Y), mults, m, ropt);
      max_corr = std::max(max_corr, proj.corr);
      fallback = fallback || proj.fallback;
      bundle.z_fit[static_cast<size_t>(k)] = proj.fit;
      z_new[static_cast<size_t>(k)] = std::move(proj.fitted);
    }
    // deltas of this sweep, and the contraction estimate for extrapolation
    std::vector<LiftedField> delta(static_cast<size_t>(K + 1));
    double dd = 0.0, dp = 0.0;
    for (int k = 0; k <= K; ++k) {
      delta[static_cast<size_t>(k)] =
          axpy(-1.0, bundle.Z[static_cast<size_t>(k)], z_new[static_cast<size_t>(k)]);
      residual = std::max(residual, field_distance(z_new[static_cast<size_t>(k)],
                                                   bundle.Z[static_cast<size_t>(k)], m));
      if (!prev_delta.empty()) {
        dd += inner(delta[static_cast<size_t>(k)], prev_delta[static_cast<size_t>(k)], m);
        dp += inner(prev_delta[static_cast<size_t>(k)], prev_delta[static_cast<size_t>(k)], m);
      }
    }
    double rho = std::numeric_limits<double>::quiet_NaN();
    if (dp > 1e-300) rho = dd / dp;
    // Aitken step on the affine fixed-point map once the rate is steady
    const bool accelerate = theta >= cfg.damping && std::isfinite(rho) &&
                            std::isfinite(prev_rho) && std::abs(rho) < 0.95 &&
                            std::abs(rho - prev_rho) < 0.05 && residual > cfg.tol;
    const double boost = accelerate ? rho / (1.0 - rho) : 0.0;
    for (int k = 0; k <= K; ++k) {
      if (theta >= 1.0) {
        bundle.Z[static_cast<size_t>(k)] = std::move(z_new[static_cast<size_t>(k)]);
        if (accelerate)
          bundle.Z[static_cast<size_t>(k)] =
              axpy(boost, delta[static_cast<size_t>(k)], bundle.Z[static_cast<size_t>(k)]);
      } else {
        bundle.Z[static_cast<size_t>(k)] =
            axpy(theta, delta[static_cast<size_t>(k)], bundle.Z[static_cast<size_t>(k)]);
      }
    }
    prev_delta = std::move(delta);
    prev_rho = rho;
    diag.residual_history.push_back(residual);
    diag.iterations = iter + 1;
    diag.final_residual = residual;
    diag.max_residual_correlation = std::max(diag.max_residual_correlation, max_corr);
    diag.regression_fallback = diag.regression_fallback || fallback;
    if (residual <= cfg.tol) {
      diag.converged = true;
      break;
    }
    if (iter >= 1 && residual > 0.8 * prev_residual) {
      if (theta > 1.0 / 16.0) theta *= 0.5;
      calm_streak = 0;
    } else if (iter >= 1 && residual < 0.95 * prev_residual) {
      // recover the step size once the transient has passed
      if (++calm_streak >= 3 && theta < cfg.damping) {
        theta = std::min(2.0 * theta, cfg.damping);
        calm_streak = 0;
      }
    }
    prev_residual = residual;
  }
  // final forward pass so Y is consistent with the converged Z
  forward_sweep(bundle.Y, bundle.Z, init, dt, cfg.lambda, dW,
                dW ? &cfg.sigma : nullptr, cfg.threads, m.id());

  const auto& hist = diag.residual_history;
  if (hist.size() >= 3) {
    double ratio = 0.0;
    int n = 0;
    for (size_t i = 2; i < hist.size(); ++i)
      if (hist[i - 1] > 1e-300) {
        ratio += hist[i] / hist[i - 1];
        ++n;
      }
    diag.contraction_ratio = n ? ratio / n : 0.0;
  }
  return bundle;
}

}  // namespace

// ---------------------------------------------------------------------------
// the four systems
// ---------------------------------------------------------------------------

PathBundle solve_first_order(const FunctionalModel& F, const FunctionalModel& F_T,
                             const LiftedField& X0, const EmpiricalMeasure& m,
                             const TimeGrid& grid, const SolverConfig& cfg) {
  require(X0.measure_tag() == m.id(), "solve_first_order: field/measure mismatch");
  validate_margins(F, F_T, cfg.lambda, grid.T - grid.t0);
  const int d = m.dim();
  Mat sigma = cfg.sigma.size() ? cfg.sigma : Mat::Zero(d, d);
  const bool noiseless = sigma.cwiseAbs().maxCoeff() == 0.0;
  const int M_run = (noiseless && X0.outcomes() == 1) ? 1 : std::max(cfg.M, X0.outcomes());
  SolverConfig run_cfg = cfg;
  run_cfg.sigma = sigma;
  const auto dW = brownian_increments(grid, M_run, d, cfg.seed, cfg.antithetic);

  PicardCallbacks cb;
  cb.source = [&F, &m](int j, const std::vector<LiftedField>& Y) {
    LiftedField g;
    F.grad_delta_field(Y[static_cast<size_t>(j)], m, g);
    return g;
  };
  cb.terminal = [&F_T, &m](const std::vector<LiftedField>& Y) {
    LiftedField g;
    F_T.grad_delta_field(Y.back(), m, g);
    return g;
  };
  cb.multipliers = [](int, const std::vector<LiftedField>&) {
    return std::vector<const LiftedField*>{};
  };
  cb.state = [](int k, const std::vector<LiftedField>& Y) {
    return &Y[static_cast<size_t>(k)];
  };

  auto bundle = run_picard(X0, m, grid, run_cfg, d, &dW, cb);
  const double x0n = field_norm(X0, m);
  double growth = 0.0;
  for (int k = 0; k <= grid.K; ++k)
    growth = std::max(growth,
                      std::max(bundle.y_norm(m, k), bundle.z_norm(m, k)) / (1.0 + x0n));
  bundle.diag.growth_constant = growth;
  return bundle;
}

PathBundle solve_x_derivative(const PathBundle& first, const FunctionalModel& F,
                              const FunctionalModel& F_T, const EmpiricalMeasure& m,
                              const SolverConfig& cfg) {
  const int d = m.dim();
  const int N = first.Y[0].atoms();
  LiftedField init(1, N, d * d, m.id());
  for (int i = 0; i < N; ++i) init.set_matrix_at(0, i, d, Mat::Identity(d, d));

  auto hess_times = [&m, d, N](const FunctionalModel& G, const LiftedField& Yk,
                               const LiftedField& Ak) {
    LiftedField H;
    G.hess_delta_field(Yk, m, H);
    const int M = std::max({H.outcomes(), Ak.outcomes(), Yk.outcomes()});
    LiftedField out(M, N, d * d, m.id());
    for (int w = 0; w < M; ++w)
      for (int i = 0; i < N; ++i)
        out.set_matrix_at(w, i, d,
                          H.matrix_at(H.wrap(w), i, d) * Ak.matrix_at(Ak.wrap(w), i, d));
    return out;
  };

  PicardCallbacks cb;
  cb.source = [&, hess_times](int j, const std::vector<LiftedField>& A) {
    return hess_times(F, first.Y[static_cast<size_t>(j)], A[static_cast<size_t>(j)]);
  };
  cb.terminal = [&, hess_times](const std::vector<LiftedField>& A) {
    return hess_times(F_T, first.Y.back(), A.back());
  };
  cb.multipliers = [](int k, const std::vector<LiftedField>& A) {
    return std::vector<const LiftedField*>{&A[static_cast<size_t>(k)]};
  };
  cb.state = [&first](int k, const std::vector<LiftedField>&) {
    return &first.Y[static_cast<size_t>(k)];
  };

  return run_picard(init, m, first.grid, cfg, d * d, nullptr, cb);
}

PathBundle solve_second_order(const PathBundle& first, const LiftedField& Xdir,
                              const FunctionalModel& F, const FunctionalModel& F_T,
                              const EmpiricalMeasure& m, const SolverConfig& cfg) {
  require(Xdir.measure_tag() == m.id(), "solve_second_order: field/measure mismatch");
  const int d = m.dim();
  const int N = first.Y[0].atoms();

  auto apply = [&m, d, N](const FunctionalModel& G, const LiftedField& Yk,
                          const LiftedField& Ak) {
    LiftedField H, mixed;
    G.hess_delta_field(Yk, m, H);
    G.d2d1_contract_field(Yk, m, Ak, mixed);
    const int M = std::max({H.outcomes(), Ak.outcomes(), mixed.outcomes()});
    LiftedField out(M, N, d, m.id());
    for (int w = 0; w < M; ++w)
      for (int i = 0; i < N; ++i)
        out.at(w, i) = H.matrix_at(H.wrap(w), i, d) * Ak.at(Ak.wrap(w), i) +
                       mixed.at(mixed.wrap(w), i);
    return out;
  };

  PicardCallbacks cb;
  cb.source = [&, apply](int j, const std::vector<LiftedField>& A) {
    return apply(F, first.Y[static_cast<size_t>(j)], A[static_cast<size_t>(j)]);
  };
  cb.terminal = [&, apply](const std::vector<LiftedField>& A) {
    return apply(F_T, first.Y.back(), A.back());
  };
  cb.multipliers = [](int k, const std::vector<LiftedField>& A) {
    return std::vector<const LiftedField*>{&A[static_cast<size_t>(k)]};
  };
  cb.state = [&first](int k, const std::vector<LiftedField>&) {
    return &first.Y[static_cast<size_t>(k)];
  };

  auto bundle = run_picard(Xdir, m, first.grid, cfg, d, nullptr, cb);
  const double xn = field_norm(Xdir, m);
  double growth = 0.0;
  for (int k = 0; k <= first.grid.K; ++k)
    growth = std::max(growth, bundle.z_norm(m, k) / std::max(xn, 1e-300));
  bundle.diag.growth_constant = growth;
  return bundle;
}

namespace {

Mat probe_rows(const LiftedField& Yk, int probe_index) {
  Mat rows(Yk.outcomes(), Yk.comps());
  for (int w = 0; w < Yk.outcomes(); ++w) rows.row(w) = Yk.at(w, probe_index).transpose();
  return rows;
}

LiftedField outer_product_field(const LiftedField& a, const LiftedField& b) {
  const int M = std::max(a.outcomes(), b.outcomes());
  LiftedField out(M, a.atoms(), a.comps() * b.comps(), a.measure_tag());
  for (int w = 0; w < M; ++w)
    for (int i = 0; i < a.atoms(); ++i)
      for (int p = 0; p < a.comps(); ++p)
        for (int q = 0; q < b.comps(); ++q)
          out(w, i, p * b.comps() + q) = a(a.wrap(w), i, p) * b(b.wrap(w), i, q);
  return out;
}

}  // namespace

BarBundles solve_measure_derivative(const PathBundle& first, const PathBundle& x_deriv,
                                    const FunctionalModel& F, const FunctionalModel& F_T,
                                    const EmpiricalMeasure& m, int probe_index,
                                    const SolverConfig& cfg) {
  require(probe_index >= 0 && probe_index < m.size(), "probe index out of range");
  if (!F.has_sc_tier() || !F_T.has_sc_tier())
    throw std::logic_error("measure-derivative system needs the S_c derivative tier");
  const int d = m.dim();
  const int N = first.Y[0].atoms();

  auto bar_source = [&](const FunctionalModel& G, const LiftedField& Yk,
                        const LiftedField& Bk) {
    LiftedField H, mixed, davg;
    G.hess_delta_field(Yk, m, H);
    G.d2d1_contract_field(Yk, m, Bk, mixed);
    G.d1_avg_field(Yk, m, probe_rows(Yk, probe_index), davg);
    const int M = std::max({H.outcomes(), Bk.outcomes(), mixed.outcomes(),
                            davg.outcomes(), Yk.outcomes()});
    LiftedField out(M, N, d, m.id());
    for (int w = 0; w < M; ++w)
      for (int i = 0; i < N; ++i)
        out.at(w, i) = H.matrix_at(H.wrap(w), i, d) * Bk.at(Bk.wrap(w), i) +
                       mixed.at(mixed.wrap(w), i) + davg.at(davg.wrap(w), i);
    return out;
  };

  PicardCallbacks cb1;
  cb1.source = [&, bar_source](int j, const std::vector<LiftedField>& B) {
    return bar_source(F, first.Y[static_cast<size_t>(j)], B[static_cast<size_t>(j)]);
  };
  cb1.terminal = [&, bar_source](const std::vector<LiftedField>& B) {
    return bar_source(F_T, first.Y.back(), B.back());
  };
  cb1.multipliers = [](int k, const std::vector<LiftedField>& B) {
    return std::vector<const LiftedField*>{&B[static_cast<size_t>(k)]};
  };
  cb1.state = [&first](int k, const std::vector<LiftedField>&) {
    return &first.Y[static_cast<size_t>(k)];
  };

  BarBundles out;
  const LiftedField zero_init(1, N, d, m.id());
  out.bar = run_picard(zero_init, m, first.grid, cfg, d, nullptr, cb1);

  auto bar2_source = [&](const FunctionalModel& G, int j, const LiftedField& Bk) {
    const LiftedField& Yk = first.Y[static_cast<size_t>(j)];
    const LiftedField& calY = x_deriv.Y[static_cast<size_t>(j)];
    const LiftedField& ybar = out.bar.Y[static_cast<size_t>(j)];
    LiftedField H, third, davg, mixed3;
    G.hess_delta_field(Yk, m, H);
    G.third_contract_field(Yk, m, ybar, third);
    G.d1sq_avg_field(Yk, m, probe_rows(Yk, probe_index), davg);
    G.d1sq_d2_contract_field(Yk, m, ybar, mixed3);
    const int M = std::max({H.outcomes(), Bk.outcomes(), third.outcomes(),
                            davg.outcomes(), mixed3.outcomes(), calY.outcomes(),
                            Yk.outcomes()});
    LiftedField outf(M, N, d * d, m.id());
    for (int w = 0; w < M; ++w)
      for (int i = 0; i < N; ++i) {
        const Mat bracket = third.matrix_at(third.wrap(w), i, d) +
                            davg.matrix_at(davg.wrap(w), i, d) +
                            mixed3.matrix_at(mixed3.wrap(w), i, d);
        outf.set_matrix_at(
            w, i, d,
            H.matrix_at(H.wrap(w), i, d) * Bk.matrix_at(Bk.wrap(w), i, d) +
                bracket * calY.matrix_at(calY.wrap(w), i, d));
      }
    return outf;
  };

  std::vector<LiftedField> cross(static_cast<size_t>(first.grid.K + 1));
  for (int k = 0; k <= first.grid.K; ++k)
    cross[static_cast<size_t>(k)] = outer_product_field(
        out.bar.Y[static_cast<size_t>(k)], x_deriv.Y[static_cast<size_t>(k)]);

  PicardCallbacks cb2;
  cb2.source = [&, bar2_source](int j, const std::vector<LiftedField>& B) {
    return bar2_source(F, j, B[static_cast<size_t>(j)]);
  };
  cb2.terminal = [&, bar2_source](const std::vector<LiftedField>& B) {
    (void)B;
    return bar2_source(F_T, first.grid.K, B.back());
  };
  cb2.multipliers = [&](int k, const std::vector<LiftedField>& B) {
    return std::vector<const LiftedField*>{&B[static_cast<size_t>(k)],
                                           &x_deriv.Y[static_cast<size_t>(k)],
                                           &cross[static_cast<size_t>(k)]};
  };
  cb2.state = [&first](int k, const std::vector<LiftedField>&) {
    return &first.Y[static_cast<size_t>(k)];
  };

  const LiftedField zero_init2(1, N, d * d, m.id());
  out.bar2 = run_picard(zero_init2, m, first.grid, cfg, d * d, nullptr, cb2);
  return out;
}

void save_bundle_csv(const PathBundle& b, const EmpiricalMeasure& m,
                     const std::string& path) {
  std::ofstream outf(path);
  if (!outf) throw std::runtime_error("cannot write bundle csv: " + path);
  outf.precision(17);
  outf << "step,s,mean_abs_Y,norm_Y,norm_Z,residual\n";
  for (int k = 0; k <= b.grid.K; ++k) {
    double mean_abs = 0.0;
    const auto& Yk = b.Y[static_cast<size_t>(k)];
    for (int w = 0; w < Yk.outcomes(); ++w)
      for (int i = 0; i < Yk.atoms(); ++i)
        mean_abs += m.weights()[i] * Yk.at(w, i).norm();
    mean_abs /= Yk.outcomes();
    outf << k << "," << b.grid.time(k) << "," << mean_abs << "," << b.y_norm(m, k)
         << "," << b.z_norm(m, k) << "," << b.diag.final_residual << "\n";
  }
}

}  // namespace mflab
