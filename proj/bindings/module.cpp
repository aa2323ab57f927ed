#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mflab/experiment.hpp"

namespace py = pybind11;
using namespace mflab;

namespace {

struct Functional {
  FunctionalPtr ptr;
};

SolverConfig make_config(double lambda, const Mat& sigma, int outcomes, uint64_t seed,
                         double tol, int degree, int threads, bool antithetic) {
  SolverConfig cfg;
  cfg.lambda = lambda;
  cfg.sigma = sigma;
  cfg.M = outcomes;
  cfg.seed = seed;
  cfg.tol = tol;
  cfg.basis_degree = degree;
  cfg.threads = threads;
  cfg.antithetic = antithetic;
  return cfg;
}

py::dict value_dict(const ValueReport& rep) {
  py::dict d;
  d["V"] = rep.V;
  d["delta_V"] = rep.delta_V;
  d["delta_V_offset"] = rep.delta_V_offset;
  d["grad_delta_V"] = rep.grad_delta_V;
  d["converged"] = rep.diag.converged;
  d["iterations"] = rep.diag.iterations;
  d["growth_ratio"] = rep.growth_ratio;
  return d;
}

}  // namespace

PYBIND11_MODULE(_mflab, m) {
  m.doc() = "particle and Monte-Carlo laboratory for mean-field control";

  py::class_<EmpiricalMeasure>(m, "EmpiricalMeasure")
      .def(py::init([](const Mat& atoms, std::optional<Vec> weights) {
             return make_empirical(atoms, weights);
           }),
           py::arg("atoms"), py::arg("weights") = std::nullopt)
      .def_property_readonly("atoms", &EmpiricalMeasure::atoms)
      .def_property_readonly("weights", &EmpiricalMeasure::weights)
      .def("mean", &EmpiricalMeasure::mean)
      .def("second_moment", &EmpiricalMeasure::second_moment)
      .def("__len__", &EmpiricalMeasure::size);

  m.def("w2_distance", &w2_distance, py::arg("mu"), py::arg("nu"));
  m.def("load_measure_csv", &load_measure_csv);
  m.def("save_measure_csv", &save_measure_csv);

  py::class_<Functional>(m, "Functional")
      .def("value", [](const Functional& f, const EmpiricalMeasure& mu) {
        return f.ptr->value(mu);
      })
      .def("delta", [](const Functional& f, const EmpiricalMeasure& mu, const Vec& x) {
        return f.ptr->delta(mu, x);
      })
      .def("grad_delta",
           [](const Functional& f, const EmpiricalMeasure& mu, const Vec& x) {
             return f.ptr->grad_delta(mu, x);
           })
      .def_property_readonly("name", [](const Functional& f) { return f.ptr->name(); });

  m.def("lq_functional", [](int dim, double q, double q_bar) {
    return Functional{make_lq_functional(dim, q, q_bar)};
  });
  m.def("cylindrical_functional",
        [](int dim, const Mat& a, const Vec& b, const Vec& l, const Mat& Q) {
          return Functional{make_cylindrical_functional(dim, a, b, l, Q)};
        });
  m.def("interaction_functional", [](int dim, double amp, double rho) {
    return Functional{make_interaction_functional(dim, amp, rho)};
  });

  py::class_<SolverConfig>(m, "SolverConfig")
      .def(py::init(&make_config), py::arg("lambda_"), py::arg("sigma"),
           py::arg("outcomes") = 256, py::arg("seed") = 1, py::arg("tol") = 1e-7,
           py::arg("degree") = 2, py::arg("threads") = 1, py::arg("antithetic") = true);

  m.def(
      "value",
      [](const EmpiricalMeasure& mu, double t0, double T, int steps,
         const SolverConfig& cfg, const Functional& F, const Functional& F_T,
         int replications) {
        const TimeGrid grid{t0, T, steps};
        if (replications <= 1)
          return value_dict(value(mu, grid, cfg, *F.ptr, *F_T.ptr));
        auto rep = value_replicated(mu, grid, cfg, *F.ptr, *F_T.ptr, replications);
        auto d = value_dict(rep.mean);
        d["V_stderr"] = rep.V_stderr;
        return d;
      },
      py::arg("measure"), py::arg("t0"), py::arg("T"), py::arg("steps"), py::arg("cfg"),
      py::arg("running"), py::arg("terminal"), py::arg("replications") = 1);

  m.def("bellman_residual",
        [](const EmpiricalMeasure& mu, double t0, double T, int steps,
           const SolverConfig& cfg, const Functional& F, const Functional& F_T,
           int replications) {
          const auto rep = bellman_residual_averaged(mu, TimeGrid{t0, T, steps}, cfg,
                                                     *F.ptr, *F_T.ptr, replications);
          py::dict d;
          d["residual"] = rep.residual;
          d["time_term"] = rep.time_term;
          d["trace_term"] = rep.trace_term;
          d["grad_sq_term"] = rep.grad_sq_term;
          d["source_term"] = rep.source_term;
          return d;
        },
        py::arg("measure"), py::arg("t0"), py::arg("T"), py::arg("steps"),
        py::arg("cfg"), py::arg("running"), py::arg("terminal"),
        py::arg("replications") = 1);

  m.def("master_residual",
        [](const Vec& x, const EmpiricalMeasure& mu, double t0, double T, int steps,
           const SolverConfig& cfg, const Functional& F, const Functional& F_T,
           int replications) {
          const auto rep = master_residual_averaged(x, mu, TimeGrid{t0, T, steps}, cfg,
                                                    *F.ptr, *F_T.ptr, replications);
          py::dict d;
          d["residual"] = rep.residual;
          d["raw_residual"] = rep.raw_residual;
          d["constant_shift"] = rep.constant_shift;
          d["bar_z_bound"] = rep.bar_z_bound;
          return d;
        },
        py::arg("x"), py::arg("measure"), py::arg("t0"), py::arg("T"), py::arg("steps"),
        py::arg("cfg"), py::arg("running"), py::arg("terminal"),
        py::arg("replications") = 1);

  py::class_<RiccatiSolution>(m, "RiccatiSolution")
      .def("P", &RiccatiSolution::P)
      .def("R", &RiccatiSolution::R)
      .def("P_integral", &RiccatiSolution::P_integral);

  py::class_<LQSpec>(m, "LQSpec")
      .def(py::init([](int d, double q, double q_bar, double q_T, double q_bar_T,
                       double lambda, const Mat& sigma, double t0, double T) {
             LQSpec spec;
             spec.d = d;
             spec.q = q;
             spec.q_bar = q_bar;
             spec.q_T = q_T;
             spec.q_bar_T = q_bar_T;
             spec.lambda = lambda;
             spec.sigma = sigma;
             spec.t0 = t0;
             spec.T = T;
             return spec;
           }),
           py::arg("d"), py::arg("q"), py::arg("q_bar"), py::arg("q_T"),
           py::arg("q_bar_T"), py::arg("lambda_"), py::arg("sigma"), py::arg("t0") = 0.0,
           py::arg("T") = 1.0);

  m.def("riccati_solve", &riccati_solve, py::arg("spec"), py::arg("fine_steps") = 4000);
  m.def("lq_value",
        [](const LQSpec& spec, const RiccatiSolution& ric, const EmpiricalMeasure& mu,
           double t) {
          const auto rep = lq_value(spec, ric, mu, t);
          py::dict d;
          d["V"] = rep.V;
          d["delta_V"] = rep.delta_V;
          d["grad_delta_V"] = rep.grad_delta_V;
          d["P"] = rep.P;
          d["R"] = rep.R;
          return d;
        });

  m.def("run_subcommand",
        [](const std::string& name, const std::string& config,
           std::optional<std::string> out, std::optional<int> replications,
           std::optional<int> threads) {
          return run_subcommand(name, config, out, replications, threads);
        },
        py::arg("name"), py::arg("config"), py::arg("out") = std::nullopt,
        py::arg("replications") = std::nullopt, py::arg("threads") = std::nullopt);
}
