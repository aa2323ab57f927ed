"""End-to-end smoke tests for the python bindings."""

import math

import numpy as np
import pytest

mflab = pytest.importorskip("mflab")


def uniform(points):
    atoms = np.asarray(points, dtype=float).reshape(len(points), -1)
    return mflab.EmpiricalMeasure(atoms)


def test_w2_against_assignment_oracle():
    mu = uniform([0.0, 2.0])
    nu = uniform([1.0, 3.0])
    assert mflab.w2_distance(mu, nu) == pytest.approx(1.0)

    rng = np.random.default_rng(3)
    a = rng.normal(size=(8, 2))
    b = rng.normal(size=(8, 2))
    got = mflab.w2_distance(mflab.EmpiricalMeasure(a), mflab.EmpiricalMeasure(b))
    try:
        from scipy.optimize import linear_sum_assignment

        cost = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        rows, cols = linear_sum_assignment(cost)
        expected = math.sqrt(cost[rows, cols].mean())
        assert got == pytest.approx(expected, abs=1e-9)
    except ImportError:
        assert got >= 0.0


def test_functional_ladder_normalization():
    rng = np.random.default_rng(5)
    m = mflab.EmpiricalMeasure(rng.normal(size=(6, 1)))
    F = mflab.lq_functional(1, 1.0, 0.7)
    w = np.asarray(m.weights)
    deltas = np.array([F.delta(m, m.atoms[i]) for i in range(len(m))])
    assert abs((w * deltas).sum()) < 1e-12


def test_value_matches_riccati_oracle():
    rng = np.random.default_rng(7)
    m = mflab.EmpiricalMeasure(rng.normal(0.5, 0.8, size=(12, 1)))
    spec = mflab.LQSpec(d=1, q=1.0, q_bar=0.5, q_T=0.8, q_bar_T=0.3,
                        lambda_=2.0, sigma=0.4 * np.eye(1), T=1.0)
    ric = mflab.riccati_solve(spec)
    oracle = mflab.lq_value(spec, ric, m, 0.0)

    cfg = mflab.SolverConfig(lambda_=2.0, sigma=0.4 * np.eye(1), outcomes=256, seed=11)
    F = mflab.lq_functional(1, 1.0, 0.5)
    F_T = mflab.lq_functional(1, 0.8, 0.3)
    rep = mflab.value(m, 0.0, 1.0, 16, cfg, F, F_T)
    assert rep["converged"]
    assert rep["V"] == pytest.approx(oracle["V"], rel=0.05)


def test_bellman_residual_small():
    rng = np.random.default_rng(9)
    m = mflab.EmpiricalMeasure(rng.normal(size=(5, 1)))
    cfg = mflab.SolverConfig(lambda_=2.0, sigma=0.4 * np.eye(1), outcomes=512, seed=13)
    F = mflab.lq_functional(1, 1.0, 0.5)
    F_T = mflab.lq_functional(1, 0.8, 0.3)
    rep = mflab.bellman_residual(m, 0.0, 1.0, 12, cfg, F, F_T, replications=2)
    assert abs(rep["residual"]) < 0.2


def test_cli_runner_roundtrip(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(
        "seed = 3\n"
        "dim = 1\n"
        "time.T = 1.0\n"
        "time.steps = 8\n"
        "running.family = lq\n"
        "running.q = 1.0\n"
        "terminal.family = lq\n"
        "terminal.q = 0.5\n"
        "solver.lambda = 1.5\n"
        "solver.sigma = 0.3\n"
        "solver.outcomes = 64\n"
        'measure.atoms = "0.0; 1.0"\n'
        f"output.dir = {tmp_path / 'out'}\n"
    )
    assert mflab.run_subcommand("value", str(cfg)) == 0
    assert (tmp_path / "out" / "summary.txt").exists()
    assert mflab.run_subcommand("value", str(tmp_path / "nope.cfg")) == 2
