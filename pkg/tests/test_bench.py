import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from implicitsim.bench import (CSV_COLUMNS, SCHEMA_LINE, ConfigError, ExperimentConfig, MetricsRow,
                               cv_l1, dist_metric, l1_baseline, l1_objective, linear_fit_r2,
                               read_rows_csv, rows_to_csv, run_experiment, summarize,
                               support_metrics)
from implicitsim.robust import plain_moment
from implicitsim.score import IIDUnivariate
from implicitsim.simgen import gen_sparse_beta, gen_vector_sim, get_link, make_rng

from oracles import soft_threshold_grid

SMALL = {"kind": "RateSweepVector", "p": 40, "s": 3, "link": "identity", "trials": 3,
         "grid": {"rates": [0.3, 0.4]}, "solver": {"t_max": 1500, "eta": 0.01},
         "master_seed": 7}


def test_dist_examples():
    b = np.array([0.6, 0.8, 0.0])
    assert dist_metric(b, b) == 0.0
    assert dist_metric(-b, b) == 0.0
    assert dist_metric(np.array([0.0, 0.0, 1.0]), b) == pytest.approx(math.sqrt(2))
    with pytest.raises(ValueError):
        dist_metric(np.zeros(3), b)
    with pytest.raises(ValueError):
        dist_metric(np.ones(2), b)


@given(st.floats(-1e3, 1e3).filter(lambda c: abs(c) > 1e-3), st.integers(0, 2 ** 32 - 1))
def test_dist_scale_invariant(c, seed):
    rng = np.random.default_rng(seed)
    b = rng.standard_normal(6)
    star = rng.standard_normal(6)
    star /= np.linalg.norm(star)
    assert dist_metric(c * b, star) == pytest.approx(dist_metric(b, star), abs=1e-12)


def test_support_metrics_examples():
    assert support_metrics([1, 4], [1, 4], 10) == (0.0, 1.0)
    assert support_metrics([], [1, 4], 10) == (0.0, 0.0)
    assert support_metrics([1, 2], [1], 10) == (0.5, 1.0)
    assert support_metrics([3], [], 10) == (1.0, 1.0)
    with pytest.raises(IndexError):
        support_metrics([10], [1], 10)


def test_l1_examples():
    phi = np.array([1.0, -0.2])
    np.testing.assert_allclose(l1_baseline(phi, 0.8), [0.6, 0.0], atol=1e-15)
    grid = [soft_threshold_grid(v, 0.8) for v in phi]
    np.testing.assert_allclose(grid, [0.6, 0.0], atol=1e-4)
    np.testing.assert_array_equal(l1_baseline(phi, 0.0), phi)
    np.testing.assert_array_equal(l1_baseline(phi, 2.0), 0.0)
    with pytest.raises(ValueError):
        l1_baseline(phi, -1.0)


def test_l1_kkt_and_perturbations(rng):
    phi = rng.standard_normal(12)
    lam = 0.7
    b = l1_baseline(phi, lam)
    # subgradient condition: 2(b - phi) + lam * g = 0 with g in d|b|
    g = -2 * (b - phi) / lam
    on = b != 0
    np.testing.assert_allclose(g[on], np.sign(b[on]), atol=1e-12)
    assert np.all(np.abs(g[~on]) <= 1 + 1e-12)
    base = l1_objective(b, phi, lam)
    pert = b + 0.05 * rng.standard_normal((10_000, 12))
    vals = np.einsum("ij,ij->i", pert, pert) - 2 * pert @ phi + lam * np.abs(pert).sum(axis=1)
    assert np.all(vals >= base - 1e-12)


def test_cv_l1_runs():
    b = gen_sparse_beta(60, 3, make_rng(0, 2))
    inst = gen_vector_sim(b, IIDUnivariate(), get_link("identity"), 0.5, 500, 0, 1.0)
    beta, lam = cv_l1(inst, plain_moment)
    phi = plain_moment(inst).value
    grid = np.geomspace(0.01, 2.0, 20) * np.abs(phi).max()
    assert np.min(np.abs(grid - lam)) <= 1e-12 * lam
    np.testing.assert_array_equal(beta, l1_baseline(phi, lam))
    assert set(inst.support) <= set(np.flatnonzero(beta))


def test_linear_fit_r2():
    slope, icpt, r2 = linear_fit_r2([0, 1, 2, 3], [1, 3, 5, 7])
    assert slope == pytest.approx(2) and icpt == pytest.approx(1) and r2 == pytest.approx(1)


def test_metrics_row_validates_rates():
    with pytest.raises(ValueError):
        MetricsRow("trajectory", 0, 1.0, 10, 0.1, 0, 0, fdr=1.5)


@pytest.mark.parametrize("patch", [
    {"kind": "Bogus"},
    {"trials": 0},
    {"s": 50},
    {"grid": {"rates": []}},
    {"grid": {"rates": [0.3], "n": [100]}},
    {"robust": {"kind": "kappa"}},
    {"selection": {"kind": "fixed"}},
    {"selection": {"kind": "magic"}},
    {"link": "f99"},
    {"solver": {"eta": -1}},
    {"colour": "blue"},
    {"grid": {"rates": [100.0]}},
])
def test_config_errors(patch):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**SMALL, **patch})


def test_config_defaults():
    cfg = ExperimentConfig.from_dict({"kind": "rate_sweep_vector", "p": 500, "s": 4})
    vals = cfg.grid_values()
    assert len(vals) == 8 and vals[0] == 0.25 and vals[-1] == 0.4
    assert cfg.sample_sizes()[0] == math.ceil(4 * math.log(500) / 0.25 ** 2)
    assert cfg.solver.alpha == 1e-5 and cfg.lam == 5e-5
    mat = ExperimentConfig.from_dict({"kind": "RateSweepMatrix", "d": 10, "r": 2})
    assert mat.grid_values()[0] == 0.15 and mat.solver.alpha == 1e-3
    ob = ExperimentConfig.from_dict({"kind": "OneBit", "p": 100, "s": 5, "link": "sign"})
    assert ob.sample_sizes() == [math.ceil(5 * 5 * math.log(100))]


def test_trajectory_t_max_zero_gives_error_row():
    rows = run_experiment({"kind": "Trajectory", "p": 10, "s": 2, "grid": {"n": [50]},
                           "solver": {"t_max": 0}})
    assert len(rows) == 1 and rows[0].error == "zero_estimate" and rows[0].dist is None


def test_divergence_row():
    rows = run_experiment({"kind": "Trajectory", "p": 10, "s": 2, "grid": {"n": [50]},
                           "solver": {"t_max": 500, "eta": 50.0, "alpha": 1.0}})
    assert rows[0].error == "divergence"


def test_run_deterministic_and_thread_order():
    a = rows_to_csv(run_experiment(SMALL))
    b = rows_to_csv(run_experiment(SMALL))
    c = rows_to_csv(run_experiment(SMALL, threads=3))
    assert a == b == c
    lines = a.splitlines()
    assert lines[0] == SCHEMA_LINE
    assert lines[1].split(",") == CSV_COLUMNS
    parsed = read_rows_csv(a)
    assert [(r["grid_index"], r["trial"]) for r in parsed] == \
        [(str(g), str(t)) for g in range(2) for t in range(3)]


def test_common_random_numbers():
    rows = run_experiment(SMALL)
    seeds = {}
    for row in rows:
        seeds.setdefault(row.trial, set()).add(row.seed)
    assert all(len(s) == 1 for s in seeds.values())
    assert len({next(iter(s)) for s in seeds.values()}) == 3
    assert all(not r.error for r in rows)
    summ = summarize(rows)
    assert [s[0] for s in summ] == [0, 1] and all(s[4] == 3 for s in summ)


def test_support_recovery_with_baseline():
    cfg = {"kind": "SupportRecovery", "p": 80, "s": 3, "link": "identity", "trials": 2,
           "grid": {"sample_factors": [30]}, "solver": {"alpha": 1e-3, "eta": 0.05,
                                                          "t_max": 1000},
           "selection": {"kind": "out_of_sample", "m": 10}, "baseline": True}
    rows = run_experiment(cfg)
    for r in rows:
        assert not r.error
        assert 0 <= r.fdr <= 1 and r.tpr == 1.0
        assert r.baseline_tpr == 1.0 and r.baseline_dist is not None


def test_matrix_support_recovery_rank():
    cfg = {"kind": "SupportRecovery", "d": 8, "r": 2, "link": "identity", "trials": 1,
           "grid": {"rates": [0.2]}, "solver": {"eta": 0.02, "t_max": 2000, "record_stride": 20},
           "selection": {"kind": "out_of_sample"}}
    row = run_experiment(cfg)[0]
    assert row.rank == 2 and row.fdr is None


def test_prediction_risk_and_one_bit():
    rows = run_experiment({"kind": "PredictionRisk", "p": 10, "s": 2, "noise_sigma": 0.0,
                           "grid": {"n": [500, 4000]}, "trials": 2})
    assert all(r.risk is not None and r.risk >= 0 for r in rows)
    ob = run_experiment({"kind": "OneBit", "p": 100, "s": 3, "link": "sign", "noise_sigma": 0.0,
                         "selection": {"kind": "known_link"},
                         "solver": {"alpha": 1e-3, "eta": 0.1, "t_max": 400}, "trials": 2})
    assert all(not r.error and r.dist < 1.0 for r in ob)
