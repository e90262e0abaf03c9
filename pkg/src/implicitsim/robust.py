"""Moment estimates ``(1/n) sum_i y_i S(x_i)`` and their heavy-tail robust versions.

Vector data are robustified by elementwise Winsorization at level ``tau``;
matrix data by a spectral shrinkage that maps every singular value
``sigma -> psi(kappa * sigma) / kappa``.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .score import score_matrix, score_vector
from .simgen import MatrixSimInstance

PLAIN_VECTOR = "PlainVector"
TRUNCATED_VECTOR = "TruncatedVector"
PLAIN_MATRIX = "PlainMatrixSymmetrized"
SHRUNK_MATRIX = "ShrunkMatrixSymmetrized"
MODES = (PLAIN_VECTOR, TRUNCATED_VECTOR, PLAIN_MATRIX, SHRUNK_MATRIX)

_CHUNK = 4096


@dataclass(frozen=True, eq=False)
class MomentEstimate:
    """Target that the over-parameterized solvers descend toward."""

    value: np.ndarray
    mode: str
    tau: Optional[float] = None
    kappa: Optional[float] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown moment mode {self.mode!r}")
        value = np.asarray(self.value, dtype=float)
        if self.mode in (PLAIN_MATRIX, SHRUNK_MATRIX):
            if value.ndim != 2 or np.max(np.abs(value - value.T)) > 1e-12:
                raise ValueError("matrix moment estimates must be symmetric")
        object.__setattr__(self, "value", value)

    @property
    def is_matrix(self):
        return self.mode in (PLAIN_MATRIX, SHRUNK_MATRIX)

    def to_dict(self):
        return {"mode": self.mode, "tau": self.tau, "kappa": self.kappa,
                "value": self.value.tolist()}


def _moment_value(phi):
    return phi.value if isinstance(phi, MomentEstimate) else np.asarray(phi, dtype=float)


def winsorize(a, tau):
    """Sign-preserving clip ``sign(a) * min(|a|, tau)``."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    return np.clip(a, -tau, tau)


def theory_tau(n, p, moment_bound=1.0):
    """Truncation level ``(M n / log p)^{1/4} / 2``."""
    return (moment_bound * n / math.log(p)) ** 0.25 / 2.0


def simulation_tau(n, p):
    """Truncation level ``2 (n / log p)^{1/4}`` used in the published simulations."""
    return 2.0 * (n / math.log(p)) ** 0.25


def theory_kappa(n, d, moment_bound=1.0):
    """Shrinkage parameter ``sqrt(log(4d) / (n d M))``."""
    return math.sqrt(math.log(4 * d) / (n * d * moment_bound))


def simulation_kappa(n, d):
    """Shrinkage parameter ``2 sqrt(log(4d) / (n d))`` used in the published simulations."""
    return 2.0 * math.sqrt(math.log(4 * d) / (n * d))


def empirical_fourth_moment(y):
    y = np.asarray(y, dtype=float)
    return float(np.mean(y ** 4))


def _require_rows(instance):
    if instance.n == 0:
        raise ValueError("moment estimate needs at least one observation")


def plain_moment(instance, model=None):
    """``(1/n) sum y_i S(x_i)``; matrix data are symmetrized."""
    _require_rows(instance)
    model = instance.design if model is None else model
    y = instance.responses
    n = instance.n
    if isinstance(instance, MatrixSimInstance):
        acc = np.zeros(instance.beta_star.shape)
        for start in range(0, n, _CHUNK):
            S = score_matrix(model, instance.covariates[start:start + _CHUNK])
            acc += np.einsum("n,nij->ij", y[start:start + _CHUNK], S)
        value = (acc + acc.T) / (2.0 * n)
        return MomentEstimate(value, PLAIN_MATRIX)
    S = score_vector(model, instance.covariates)
    return MomentEstimate(y @ S / n, PLAIN_VECTOR)


def truncated_moment_vector(instance, model=None, tau=None):
    """``(1/n) sum winsorize(y_i) * winsorize(S(x_i))`` at level ``tau``."""
    _require_rows(instance)
    if tau is None:
        raise ValueError("tau is required")
    model = instance.design if model is None else model
    y = winsorize(instance.responses, tau)
    S = winsorize(score_vector(model, instance.covariates), tau)
    return MomentEstimate(y @ S / instance.n, TRUNCATED_VECTOR, tau=float(tau))


def psi(x):
    """Influence function ``sign(x) log(1 + |x| + x^2/2)``: linear near 0, logarithmic far out."""
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    return np.sign(x) * np.log1p(ax + 0.5 * ax * ax)


def spectral_shrink(A, kappa):
    """Robust shrinkage ``H(A, kappa)`` of one matrix or a stack of matrices.

    Equivalent to dilating ``kappa * A`` into the symmetric block matrix
    ``[[0, kA], [kA^T, 0]]``, applying ``psi`` to its spectrum, taking the
    top-right block and dividing by ``kappa``. Because ``psi`` is odd, that is
    the same as mapping each singular value ``s`` of ``A`` to
    ``psi(kappa s) / kappa`` while keeping the singular vectors.
    """
    if not kappa > 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    A = np.asarray(A, dtype=float)
    if not np.all(np.isfinite(A)):
        raise ValueError("spectral_shrink needs finite input")
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    shrunk = psi(kappa * s) / kappa
    return (U * shrunk[..., None, :]) @ Vt


def robust_moment_matrix(instance, model=None, kappa=None):
    """``(1/2n) sum [H(y_i S(X_i), kappa) + H(y_i S(X_i), kappa)^T]``."""
    _require_rows(instance)
    if kappa is None:
        raise ValueError("kappa is required")
    model = instance.design if model is None else model
    y = instance.responses
    n = instance.n
    acc = np.zeros(instance.beta_star.shape)
    for start in range(0, n, _CHUNK):
        S = score_matrix(model, instance.covariates[start:start + _CHUNK])
        H = spectral_shrink(y[start:start + _CHUNK, None, None] * S, kappa)
        acc += H.sum(axis=0)
    value = (acc + acc.T) / (2.0 * n)
    return MomentEstimate(value, SHRUNK_MATRIX, kappa=float(kappa))


def resolve_level(instance, kind, rule="simulation", value=None, moment_bound=None):
    """Truncation level ``tau`` (``kind="tau"``) or shrinkage ``kappa`` for an instance.

    An explicit ``value`` wins. Otherwise ``rule`` picks the simulation or the
    theory formula; the theory formula uses ``moment_bound`` and falls back to
    the empirical fourth moment of the responses.
    """
    if value is not None:
        return float(value)
    if rule not in ("simulation", "theory"):
        raise ValueError(f"unknown rule {rule!r}")
    n = instance.n
    if rule == "theory" and moment_bound is None:
        moment_bound = empirical_fourth_moment(instance.responses)
    if kind == "tau":
        p = instance.p
        return simulation_tau(n, p) if rule == "simulation" else theory_tau(n, p, moment_bound)
    if kind == "kappa":
        d = instance.d
        return simulation_kappa(n, d) if rule == "simulation" else theory_kappa(n, d, moment_bound)
    raise ValueError(f"unknown level kind {kind!r}")


def robust_moment(instance, model=None, spec=None):
    """Moment estimate selected by a config block ``{"kind": "none" | "tau" | "kappa", ...}``."""
    spec = spec or {}
    kind = spec.get("kind", "none")
    if kind == "none":
        return plain_moment(instance, model)
    is_matrix = isinstance(instance, MatrixSimInstance)
    if kind == "tau" and is_matrix or kind == "kappa" and not is_matrix:
        raise ValueError("tau applies to vector data, kappa to matrix data")
    level = resolve_level(instance, kind, spec.get("rule", "simulation"), spec.get("value"),
                          spec.get("moment_bound"))
    if kind == "tau":
        return truncated_moment_vector(instance, model, level)
    return robust_moment_matrix(instance, model, level)
