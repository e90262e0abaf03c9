"""Gradient descent on over-parameterized quadratic losses.

Vector signals are written ``beta = w*w - v*v`` and matrix signals
``beta = W W^T - V V^T``. Both losses have the form
``<beta, beta> - 2 <beta, Phi>``; the updates below are plain gradient steps
with the factor 4 of the gradient folded into the stepsize, i.e. one step with
stepsize ``eta`` equals a gradient step of size ``eta / 4``.
"""

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from .linalg import check_symmetric, jacobi_eigh
from .robust import MomentEstimate, _moment_value
from .score import GaussianVector

DIVERGENCE_LIMIT = 1e12


class DivergenceError(FloatingPointError):
    """An iterate became non-finite or exceeded the divergence guard."""

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


@dataclass(frozen=True)
class SolverConfig:
    alpha: float = 1e-5
    eta: float = 0.005
    t_max: int = 5000
    record_stride: int = 10

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if int(self.t_max) != self.t_max or self.t_max < 0:
            raise ValueError("t_max must be a nonnegative integer")
        if int(self.record_stride) != self.record_stride or self.record_stride < 1:
            raise ValueError("record_stride must be a positive integer")

    @classmethod
    def vector_defaults(cls, **kw):
        return cls(**{"alpha": 1e-5, "eta": 0.005, **kw})

    @classmethod
    def matrix_defaults(cls, **kw):
        return cls(**{"alpha": 1e-3, "eta": 0.005, **kw})


@dataclass
class VectorState:
    w: np.ndarray
    v: np.ndarray
    t: int = 0

    @property
    def beta(self):
        return self.w * self.w - self.v * self.v


@dataclass
class MatrixState:
    W: np.ndarray
    V: np.ndarray
    t: int = 0

    @property
    def beta(self):
        return self.W @ self.W.T - self.V @ self.V.T


@dataclass
class Truth:
    """Ground truth used for trajectory diagnostics."""

    beta_star: np.ndarray
    mu_star: float = 1.0
    support: Optional[np.ndarray] = None

    @classmethod
    def from_instance(cls, inst):
        mu = 1.0 if inst.mu_star is None else float(inst.mu_star)
        return cls(inst.beta_star, mu, getattr(inst, "support", None))


@dataclass
class TrajectoryRecord:
    t: int
    beta: np.ndarray
    loss: float
    dist_sq: Optional[float] = None
    max_off_support: Optional[float] = None


@dataclass
class Trajectory:
    records: List[TrajectoryRecord] = field(default_factory=list)
    config: Optional[SolverConfig] = None
    kind: str = "vector"
    final_state: object = None
    diverged: bool = False
    diverged_at: Optional[int] = None

    def __len__(self):
        return len(self.records)

    @property
    def ts(self):
        return np.array([r.t for r in self.records], dtype=int)

    @property
    def losses(self):
        return np.array([r.loss for r in self.records])

    @property
    def betas(self):
        return np.stack([r.beta for r in self.records])

    def dist_sq(self):
        return np.array([np.nan if r.dist_sq is None else r.dist_sq for r in self.records])

    def max_off_support(self):
        return np.array([np.nan if r.max_off_support is None else r.max_off_support
                         for r in self.records])

    def to_csv(self, fh=None):
        """Write ``t, loss[, dist_sq][, max_off_support]`` with 17 significant digits."""
        has_dist = any(r.dist_sq is not None for r in self.records)
        has_off = any(r.max_off_support is not None for r in self.records)
        header = ["t", "loss"] + (["dist_sq"] if has_dist else []) + \
            (["max_off_support"] if has_off else [])
        out = io.StringIO() if fh is None else fh
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(header)
        for r in self.records:
            row = [str(r.t), _fmt(r.loss)]
            if has_dist:
                row.append(_fmt(r.dist_sq))
            if has_off:
                row.append(_fmt(r.max_off_support))
            writer.writerow(row)
        return out.getvalue() if fh is None else None

    def snapshots_to_dict(self):
        return {
            "kind": self.kind,
            "config": None if self.config is None else asdict(self.config),
            "diverged": self.diverged,
            "t": [int(r.t) for r in self.records],
            "loss": [float(r.loss) for r in self.records],
            "beta": [r.beta.tolist() for r in self.records],
        }

    @classmethod
    def from_snapshots(cls, data):
        config = None if data.get("config") is None else SolverConfig(**data["config"])
        records = [TrajectoryRecord(int(t), np.asarray(b, dtype=float), float(loss))
                   for t, b, loss in zip(data["t"], data["beta"], data["loss"])]
        return cls(records, config, data.get("kind", "vector"), None, bool(data.get("diverged")))


def _fmt(x):
    if x is None:
        return ""
    return format(float(x), ".17g")


def save_snapshots(traj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(traj.snapshots_to_dict(), fh)
        fh.write("\n")


def load_snapshots(path):
    with open(path, encoding="utf-8") as fh:
        return Trajectory.from_snapshots(json.load(fh))


# -- losses and steps --------------------------------------------------------

def quadratic_loss(beta, phi):
    phi = _moment_value(phi)
    return float(np.sum(beta * beta) - 2.0 * np.sum(beta * phi))


def vector_loss_grad(w, v, phi):
    """Loss ``<b, b> - 2 <b, Phi>`` at ``b = w*w - v*v`` and its gradients."""
    phi = _moment_value(phi)
    w = np.asarray(w, dtype=float)
    v = np.asarray(v, dtype=float)
    if not (w.shape == v.shape == phi.shape):
        raise ValueError(f"shape mismatch: w {w.shape}, v {v.shape}, Phi {phi.shape}")
    beta = w * w - v * v
    resid = beta - phi
    loss = float(beta @ beta - 2.0 * beta @ phi)
    return loss, 4.0 * resid * w, -4.0 * resid * v


def matrix_loss_grad(W, V, M):
    """Loss ``<B, B> - 2 <B, M>`` at ``B = W W^T - V V^T`` and its gradients."""
    M = _moment_value(M)
    W = np.asarray(W, dtype=float)
    V = np.asarray(V, dtype=float)
    if not (W.shape == V.shape and W.shape[0] == M.shape[0] == M.shape[1]):
        raise ValueError(f"shape mismatch: W {W.shape}, V {V.shape}, M {M.shape}")
    beta = W @ W.T - V @ V.T
    resid = beta - M
    sym = resid + resid.T
    loss = float(np.sum(beta * beta) - 2.0 * np.sum(beta * M))
    return loss, 2.0 * sym @ W, -2.0 * sym @ V


def _check_finite(*arrays, t=None):
    for a in arrays:
        if not np.all(np.isfinite(a)) or np.max(np.abs(a)) > DIVERGENCE_LIMIT:
            raise DivergenceError(f"iterate diverged at step {t}", t)


def vector_step(state, phi, eta):
    if not eta > 0:
        raise ValueError("eta must be positive")
    phi = _moment_value(phi)
    resid = state.beta - phi
    w = state.w - eta * resid * state.w
    v = state.v + eta * resid * state.v
    _check_finite(w, v, t=state.t + 1)
    return VectorState(w, v, state.t + 1)


def matrix_step(state, M, eta):
    if not eta > 0:
        raise ValueError("eta must be positive")
    M = check_symmetric(_moment_value(M), tol=1e-10, name="M")
    resid = state.beta - M
    W = state.W - eta * resid @ state.W
    V = state.V + eta * resid @ state.V
    _check_finite(W, V, t=state.t + 1)
    return MatrixState(W, V, state.t + 1)


def step_bound(phi, beta):
    """Stepsize ceiling ``1 / (2 (||Phi||_inf + max|beta|))`` keeping w, v positive."""
    phi = _moment_value(phi)
    return 1.0 / (2.0 * (np.max(np.abs(phi)) + np.max(np.abs(beta))))


# -- full runs ---------------------------------------------------------------

def _record(beta, phi, t, truth, is_matrix):
    rec = TrajectoryRecord(int(t), beta.copy(), quadratic_loss(beta, phi))
    if truth is not None:
        target = truth.mu_star * truth.beta_star
        rec.dist_sq = float(np.sum((beta - target) ** 2))
        if not is_matrix and truth.support is not None:
            off = np.ones(beta.size, dtype=bool)
            off[np.asarray(truth.support, dtype=int)] = False
            rec.max_off_support = float(np.max(np.abs(beta[off]))) if off.any() else 0.0
    return rec


def _run(state, phi, config, truth, step, is_matrix):
    phi_val = _moment_value(phi)
    traj = Trajectory(config=config, kind="matrix" if is_matrix else "vector")
    traj.records.append(_record(state.beta, phi_val, 0, truth, is_matrix))
    stride = config.record_stride
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            for t in range(1, config.t_max + 1):
                state = step(state, phi_val, config.eta)
                if t % stride == 0 or t == config.t_max:
                    traj.records.append(_record(state.beta, phi_val, t, truth, is_matrix))
    except DivergenceError as exc:
        traj.diverged = True
        traj.diverged_at = exc.t
    traj.final_state = state
    return traj


def _vector_step_fast(state, phi, eta, check):
    w, v = state.w, state.v
    resid = w * w - v * v - phi
    w = w - eta * resid * w
    v = v + eta * resid * v
    if check:
        _check_finite(w, v, t=state.t + 1)
    return VectorState(w, v, state.t + 1)


def run_vector(phi, config, truth=None):
    """Run the vector solver from ``w0 = v0 = alpha * 1`` for ``config.t_max`` steps.

    Records ``beta_t`` every ``record_stride`` steps (always at ``t = 0`` and
    ``t = t_max``). With ``truth``, each record also carries
    ``||beta_t - mu* beta*||^2`` and the largest off-support magnitude. A
    divergent run stops early and comes back with ``diverged=True``.
    """
    phi_val = _moment_value(phi)
    if phi_val.ndim != 1:
        raise ValueError("vector solver needs a vector moment estimate")
    p = phi_val.size
    state = VectorState(np.full(p, config.alpha), np.full(p, config.alpha), 0)

    def step(s, ph, eta):
        t = s.t + 1
        check = t % 25 == 0 or t % config.record_stride == 0 or t == config.t_max
        return _vector_step_fast(s, ph, eta, check)

    return _run(state, phi_val, config, truth, step, is_matrix=False)


def run_matrix(M, config, truth=None):
    """Run the matrix solver from ``W0 = V0 = alpha * I``; see :func:`run_vector`."""
    M_val = check_symmetric(_moment_value(M), tol=1e-10, name="M")
    d = M_val.shape[0]
    state = MatrixState(config.alpha * np.eye(d), config.alpha * np.eye(d), 0)

    def step(s, M, eta):
        W, V = s.W, s.V
        resid = W @ W.T - V @ V.T - M
        W = W - eta * resid @ W
        V = V + eta * resid @ V
        _check_finite(W, V, t=s.t + 1)
        return MatrixState(W, V, s.t + 1)

    return _run(state, M_val, config, truth, step, is_matrix=True)


# -- post-processing ---------------------------------------------------------

def threshold_vector(beta, lam):
    if lam < 0:
        raise ValueError("threshold must be nonnegative")
    beta = np.asarray(beta, dtype=float)
    return np.where(np.abs(beta) >= lam, beta, 0.0)


def threshold_matrix(beta, lam):
    """Keep the eigenpairs of a symmetric matrix with ``|eigenvalue| >= lam``."""
    if lam < 0:
        raise ValueError("threshold must be nonnegative")
    beta = check_symmetric(beta, tol=1e-10, name="beta")
    eigvals, eigvecs = jacobi_eigh(beta)
    keep = np.abs(eigvals) >= lam
    out = (eigvecs[:, keep] * eigvals[keep]) @ eigvecs[:, keep].T
    return 0.5 * (out + out.T)


def matrix_rank(beta, lam):
    """Number of eigenvalues of a symmetric matrix with magnitude at least ``lam``."""
    eigvals, _ = jacobi_eigh(check_symmetric(beta, tol=1e-10, name="beta"))
    return int(np.sum(np.abs(eigvals) >= lam))


def normalize(beta, mode="l2", sigma=None):
    """Scale ``beta`` to unit norm.

    ``mode`` is ``"l2"``, ``"frobenius"`` or ``"sigma_half"``; the last divides
    by ``||Sigma^{1/2} beta||_2`` and needs ``sigma`` (a covariance matrix or a
    :class:`GaussianVector`).
    """
    beta = np.asarray(beta, dtype=float)
    mode = mode.lower()
    if mode == "sigma_half":
        if sigma is None:
            raise ValueError("sigma_half normalization needs a covariance")
        cov = sigma.covariance if isinstance(sigma, GaussianVector) else np.asarray(sigma)
        norm = float(np.sqrt(max(beta @ cov @ beta, 0.0)))
    elif mode in ("l2", "frobenius"):
        norm = float(np.linalg.norm(beta))
    else:
        raise ValueError(f"unknown normalization {mode!r}")
    if norm <= 1e-14:
        raise ValueError("cannot normalize a zero estimate")
    return beta / norm
