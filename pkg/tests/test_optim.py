import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from implicitsim.optim import (MatrixState, SolverConfig, Trajectory, Truth, VectorState,
                               load_snapshots, matrix_loss_grad, matrix_rank, matrix_step,
                               normalize, run_matrix, run_vector, save_snapshots,
                               threshold_matrix, threshold_vector, vector_loss_grad, vector_step)
from implicitsim.robust import MomentEstimate, plain_moment
from implicitsim.score import IIDUnivariate
from implicitsim.simgen import (gen_lowrank_beta, gen_matrix_sim, gen_sparse_beta, gen_vector_sim,
                                get_link, make_rng, mc_mu_star)
from implicitsim.bench import dist_metric

from oracles import central_diff


def _sym(rng, d):
    A = rng.standard_normal((d, d))
    return (A + A.T) / 2


def test_vector_loss_grad_example():
    loss, gw, gv = vector_loss_grad([1.0], [0.0], np.array([2.0]))
    assert loss == -3.0
    assert gw[0] == -4.0 and gv[0] == 0.0


def test_vector_step_example():
    out = vector_step(VectorState(np.array([1.0]), np.array([0.0])), np.array([2.0]), 0.1)
    assert out.w[0] == pytest.approx(1.1, abs=1e-15)
    assert out.beta[0] == pytest.approx(1.21, abs=1e-14)
    assert out.t == 1


def test_step_errors():
    st_ = VectorState(np.ones(2), np.ones(2))
    with pytest.raises(ValueError):
        vector_step(st_, np.zeros(2), 0.0)
    with pytest.raises(ValueError):
        vector_loss_grad(np.ones(2), np.ones(3), np.zeros(2))
    with pytest.raises(ValueError):
        matrix_step(MatrixState(np.eye(2), np.eye(2)), np.array([[0, 1.0], [0, 0]]), 0.1)


def test_vector_gradients_match_finite_differences(rng):
    for _ in range(50):
        p = int(rng.integers(1, 51))
        w, v, phi = rng.standard_normal((3, p))
        _, gw, gv = vector_loss_grad(w, v, phi)
        fw = central_diff(lambda x: vector_loss_grad(x, v, phi)[0], w)
        fv = central_diff(lambda x: vector_loss_grad(w, x, phi)[0], v)
        scale = max(np.linalg.norm(gw), np.linalg.norm(gv), 1.0)
        assert np.linalg.norm(gw - fw) / scale <= 1e-6
        assert np.linalg.norm(gv - fv) / scale <= 1e-6


def test_matrix_gradients_match_finite_differences(rng):
    for _ in range(50):
        d = int(rng.integers(1, 11))
        W, V = rng.standard_normal((2, d, d))
        M = _sym(rng, d)
        _, gW, gV = matrix_loss_grad(W, V, M)
        fW = central_diff(lambda X: matrix_loss_grad(X, V, M)[0], W)
        fV = central_diff(lambda X: matrix_loss_grad(W, X, M)[0], V)
        scale = max(np.linalg.norm(gW), np.linalg.norm(gV), 1.0)
        assert np.linalg.norm(gW - fW) / scale <= 1e-6
        assert np.linalg.norm(gV - fV) / scale <= 1e-6


@given(st.integers(1, 30), st.floats(1e-4, 0.5), st.integers(0, 2 ** 32 - 1))
def test_step_is_quarter_gradient_step(p, eta, seed):
    rng = np.random.default_rng(seed)
    w, v, phi = rng.standard_normal((3, p))
    _, gw, gv = vector_loss_grad(w, v, phi)
    out = vector_step(VectorState(w, v), phi, eta)
    np.testing.assert_allclose(out.w, w - eta / 4 * gw, rtol=0, atol=1e-14 * (1 + np.abs(w).max()))
    np.testing.assert_allclose(out.v, v - eta / 4 * gv, rtol=0, atol=1e-14 * (1 + np.abs(v).max()))


def test_matrix_step_is_quarter_gradient_step_for_symmetric_factors(rng):
    W, V = rng.standard_normal((2, 5, 5))
    M = _sym(rng, 5)
    _, gW, gV = matrix_loss_grad(W, V, M)
    out = matrix_step(MatrixState(W, V), M, 0.05)
    np.testing.assert_allclose(out.W, W - 0.05 / 4 * gW, atol=1e-13)
    np.testing.assert_allclose(out.V, V - 0.05 / 4 * gV, atol=1e-13)


def test_matrix_first_step(rng):
    M = _sym(rng, 4)
    a, eta = 1e-3, 0.05
    out = matrix_step(MatrixState(a * np.eye(4), a * np.eye(4)), M, eta)
    np.testing.assert_allclose(out.W, a * (np.eye(4) + eta * M), atol=1e-15)
    np.testing.assert_allclose(out.V, a * (np.eye(4) - eta * M), atol=1e-15)


def test_matrix_step_equivariance(rng):
    Q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    W, V = rng.standard_normal((2, 6, 6))
    M = _sym(rng, 6)
    a = matrix_step(MatrixState(W, V), M, 0.03)
    b = matrix_step(MatrixState(Q @ W @ Q.T, Q @ V @ Q.T), Q @ M @ Q.T, 0.03)
    np.testing.assert_allclose(b.W, Q @ a.W @ Q.T, atol=1e-10)
    np.testing.assert_allclose(b.V, Q @ a.V @ Q.T, atol=1e-10)


def test_stationary_points(rng):
    p = 12
    phi = rng.standard_normal(p)
    for _ in range(10):
        idx = rng.random(p) < 0.5
        w = np.where(idx & (phi > 0), np.sqrt(np.abs(phi)), 0.0)
        v = np.where(idx & (phi < 0), np.sqrt(np.abs(phi)), 0.0)
        _, gw, gv = vector_loss_grad(w, v, phi)
        assert np.max(np.abs(gw)) <= 1e-12 and np.max(np.abs(gv)) <= 1e-12
    # W W^T - V V^T = M makes the residual vanish
    M = _sym(rng, 4)
    W = np.linalg.cholesky(M + 10 * np.eye(4))
    V = np.sqrt(10) * np.eye(4)
    out = matrix_step(MatrixState(W, V), M, 0.1)
    np.testing.assert_allclose(out.W, W, atol=1e-12)
    np.testing.assert_allclose(out.V, V, atol=1e-12)


def test_sign_flip_symmetry(rng):
    phi = rng.standard_normal(8)
    cfg = SolverConfig(alpha=0.1, eta=0.05, t_max=50, record_stride=5)
    a = run_vector(phi, cfg)
    b = run_vector(-phi, cfg)
    for ra, rb in zip(a.records, b.records):
        np.testing.assert_array_equal(ra.beta, -rb.beta)
    W, V = rng.standard_normal((2, 4, 4)) * 0.3
    M = _sym(rng, 4)
    x = matrix_step(MatrixState(W, V), M, 0.05)
    y = matrix_step(MatrixState(V, W), -M, 0.05)
    np.testing.assert_allclose(x.beta, -y.beta, atol=1e-14)


def test_loss_nonincreasing():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        p = int(rng.integers(2, 51))
        phi = rng.standard_normal(p)
        traj = run_vector(phi, SolverConfig(1e-3, 0.05, 600, 1))
        assert not traj.diverged
        assert np.all(np.diff(traj.losses[1:]) <= 1e-12)


def test_t_max_zero():
    traj = run_vector(np.ones(3), SolverConfig(t_max=0))
    assert len(traj) == 1 and traj.records[0].t == 0
    np.testing.assert_array_equal(traj.records[0].beta, 0.0)
    traj = run_matrix(np.eye(3), SolverConfig.matrix_defaults(t_max=0))
    np.testing.assert_array_equal(traj.records[0].beta, 0.0)


def test_records_include_endpoints():
    traj = run_vector(np.ones(2), SolverConfig(t_max=25, record_stride=10))
    assert traj.ts.tolist() == [0, 10, 20, 25]


def test_solver_config_validation():
    for kw in ({"alpha": 0}, {"eta": -1}, {"t_max": -1}, {"record_stride": 0}, {"t_max": 1.5}):
        with pytest.raises(ValueError):
            SolverConfig(**kw)


def test_divergence_flag():
    traj = run_vector(np.full(3, 10.0), SolverConfig(alpha=1.0, eta=5.0, t_max=200))
    assert traj.diverged and traj.diverged_at is not None
    assert len(traj) >= 1


def test_support_entries_monotone():
    link = get_link("identity")
    for seed in range(10):
        b = gen_sparse_beta(200, 4, make_rng(seed, 2))
        inst = gen_vector_sim(b, IIDUnivariate(), link, 0.5, 800, seed, 1.0)
        traj = run_vector(plain_moment(inst), SolverConfig(1e-5, 0.005, 4000, 10))
        mags = np.abs(traj.betas[:, inst.support])
        stop = int(np.argmin(traj.losses))
        assert np.all(np.diff(mags[:stop + 1], axis=0) >= -1e-12)


def test_matrix_symmetry_and_recovery():
    d, r = 25, 3
    n = math.ceil(r * d * math.log(d) / 0.25 ** 2)
    link = get_link("f5")
    mu = mc_mu_star(link, samples=400_000)[0]
    B = gen_lowrank_beta(d, r, make_rng(0, 2))
    inst = gen_matrix_sim(B, IIDUnivariate(), link, 0.5, n, 0, mu)
    traj = run_matrix(plain_moment(inst), SolverConfig.matrix_defaults(t_max=3000, record_stride=50),
                      Truth.from_instance(inst))
    for rec in traj.records:
        assert np.max(np.abs(rec.beta - rec.beta.T)) <= 1e-10
    dists = [dist_metric(rec.beta, B) for rec in traj.records[1:]]
    assert min(dists) <= 0.35


def test_threshold_examples():
    b = np.array([0.5, 1e-6, -0.3])
    np.testing.assert_array_equal(threshold_vector(b, 1e-3), [0.5, 0, -0.3])
    np.testing.assert_array_equal(threshold_vector(b, 0), b)
    np.testing.assert_array_equal(threshold_vector(b, 1.0), 0.0)
    with pytest.raises(ValueError):
        threshold_vector(b, -1)


def test_threshold_matrix_examples(rng):
    Q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    B = (Q * [0.9, 1e-5, 0.0]) @ Q.T
    B = (B + B.T) / 2
    out = threshold_matrix(B, 1e-3)
    assert np.linalg.matrix_rank(out, tol=1e-8) == 1
    assert matrix_rank(B, 1e-3) == 1
    np.testing.assert_allclose(threshold_matrix(B, 0), B, atol=1e-10)
    np.testing.assert_allclose(threshold_matrix(B, 2.0), 0.0, atol=1e-15)
    with pytest.raises(ValueError):
        threshold_matrix(np.array([[0, 1.0], [0, 0]]), 0.1)


def test_normalize_examples():
    np.testing.assert_allclose(normalize([3.0, 4.0], "sigma_half", np.eye(2)), [0.6, 0.8])
    u = np.array([0.6, 0.8])
    np.testing.assert_allclose(normalize(u), u, atol=1e-12)
    with pytest.raises(ValueError):
        normalize(np.zeros(3))
    with pytest.raises(ValueError):
        normalize(u, "sigma_half")
    with pytest.raises(ValueError):
        normalize(u, "bogus")


def test_snapshot_round_trip(tmp_path):
    traj = run_vector(np.array([1.0, -0.5]), SolverConfig(t_max=30, record_stride=7),
                      Truth(np.array([1.0, 0.0]), 1.0, np.array([0])))
    path = tmp_path / "t.snapshots.json"
    save_snapshots(traj, path)
    back = load_snapshots(path)
    assert isinstance(back, Trajectory)
    assert back.ts.tolist() == traj.ts.tolist()
    np.testing.assert_array_equal(back.betas, traj.betas)
    assert traj.to_csv().splitlines()[0] == "t,loss,dist_sq,max_off_support"
