"""Particle and Monte-Carlo laboratory for mean-field control."""

from ._mflab import (
    EmpiricalMeasure,
    Functional,
    LQSpec,
    RiccatiSolution,
    SolverConfig,
    bellman_residual,
    cylindrical_functional,
    interaction_functional,
    load_measure_csv,
    lq_functional,
    lq_value,
    master_residual,
    riccati_solve,
    run_subcommand,
    save_measure_csv,
    value,
    w2_distance,
)

__all__ = [
    "EmpiricalMeasure",
    "Functional",
    "LQSpec",
    "RiccatiSolution",
    "SolverConfig",
    "bellman_residual",
    "cylindrical_functional",
    "interaction_functional",
    "load_measure_csv",
    "lq_functional",
    "lq_value",
    "master_residual",
    "riccati_solve",
    "run_subcommand",
    "save_measure_csv",
    "value",
    "w2_distance",
]
