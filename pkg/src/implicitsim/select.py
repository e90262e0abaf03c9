"""Stopping-time selection by out-of-sample prediction with a box-kernel link estimate."""

import csv
import io
import math
from dataclasses import dataclass
from typing import List

import numpy as np

from .optim import normalize
from .score import GaussianVector
from .simgen import MatrixSimInstance, index_values


@dataclass(frozen=True, eq=False)
class KernelPredictor:
    """Nadaraya-Watson regression of ``y`` on a single index with a box kernel.

    Anchors are stored sorted by index so a query costs two binary searches.
    """

    anchor_indices: np.ndarray
    anchor_responses: np.ndarray
    h: float
    R: float
    center: float = 0.0

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("bandwidth h must be positive")
        if not self.R > 0:
            raise ValueError("window radius R must be positive")
        z = np.asarray(self.anchor_indices, dtype=float)
        y = np.asarray(self.anchor_responses, dtype=float)
        if z.shape != y.shape:
            raise ValueError("anchor arrays must have equal length")
        order = np.argsort(z, kind="stable")
        object.__setattr__(self, "anchor_indices", z[order])
        object.__setattr__(self, "anchor_responses", y[order])
        object.__setattr__(self, "_cumsum", np.concatenate([[0.0], np.cumsum(y[order])]))

    def __call__(self, z):
        return kernel_predict(self, z)


def default_bandwidth(n, c_h=1.0):
    return c_h * n ** (-1.0 / 3.0)


def default_radius(n):
    return 2.0 * math.sqrt(math.log(n)) if n > 1 else 1.0


def _normalization_mode(instance):
    if isinstance(instance, MatrixSimInstance):
        return "frobenius"
    if isinstance(instance.design, GaussianVector):
        return "sigma_half"
    return "l2"


def normalize_for(instance, beta):
    """Normalize an estimate the way the instance's design calls for."""
    return normalize(beta, _normalization_mode(instance), sigma=instance.design)


def _estimate_norm(instance, beta):
    if _normalization_mode(instance) == "sigma_half":
        return instance.design.sigma_norm(beta)
    return float(np.linalg.norm(beta))


def fit_kernel(instance, beta_hat, h=None, R=None, c_h=1.0):
    """Fit the link predictor on ``(y_i, <x_i, beta_hat>)``.

    ``beta_hat`` must already be normalized (unit ``Sigma^{1/2}``-norm for
    Gaussian vector designs, unit l2/Frobenius norm otherwise). Defaults are
    ``h = c_h n^{-1/3}`` and ``R = 2 sqrt(log n)``.
    """
    if instance.n == 0:
        raise ValueError("cannot fit a kernel predictor on an empty instance")
    beta_hat = np.asarray(beta_hat, dtype=float)
    norm = _estimate_norm(instance, beta_hat)
    if abs(norm - 1.0) > 1e-6:
        raise ValueError(f"beta_hat must be normalized (norm={norm:.6g})")
    n = instance.n
    h = default_bandwidth(n, c_h) if h is None else h
    R = default_radius(n) if R is None else R
    center = 0.0
    if isinstance(instance.design, GaussianVector) and not isinstance(instance, MatrixSimInstance):
        center = float(instance.design.mean @ beta_hat)
    return KernelPredictor(index_values(instance, beta_hat), instance.responses, h, R, center)


def kernel_predict(kp, z):
    """Box-kernel estimate at ``z``; zero outside the window and where no anchor is within ``h``."""
    z = np.asarray(z, dtype=float)
    lo = np.searchsorted(kp.anchor_indices, z - kp.h, side="left")
    hi = np.searchsorted(kp.anchor_indices, z + kp.h, side="right")
    count = hi - lo
    total = kp._cumsum[hi] - kp._cumsum[lo]
    out = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    out = np.where(np.abs(z - kp.center) <= kp.R, out, 0.0)
    return float(out) if out.ndim == 0 else out


def prediction_risk(kp, test_instance, beta_hat):
    """Mean squared error of the kernel predictor on a held-out instance."""
    if test_instance.n == 0:
        raise ValueError("test instance is empty")
    z = index_values(test_instance, np.asarray(beta_hat, dtype=float))
    resid = test_instance.responses - kernel_predict(kp, z)
    return float(np.mean(resid * resid))


# -- stopping time -----------------------------------------------------------

@dataclass
class SelectionResult:
    t_selected: int
    candidate_t: List[int]
    train_loss: List[float]
    test_risk: List[float]
    selected_index: int
    plateau: tuple = None

    def to_csv(self, fh=None):
        out = io.StringIO() if fh is None else fh
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["candidate_t", "train_loss", "test_risk", "selected"])
        for k, (t, loss, risk) in enumerate(zip(self.candidate_t, self.train_loss, self.test_risk)):
            writer.writerow([str(t), format(loss, ".17g"), format(risk, ".17g"),
                             "1" if k == self.selected_index else "0"])
        return out.getvalue() if fh is None else None


def find_plateau(losses, rel_tol=1e-3, window=3):
    """Longest run of records whose last ``window`` relative loss changes are all small.

    Returns ``(start, stop)`` record indices (inclusive) or ``None``.
    """
    losses = np.asarray(losses, dtype=float)
    if losses.size < window + 1:
        return None
    prev = losses[:-1]
    scale = np.maximum(np.abs(prev), np.finfo(float).tiny)
    small = np.abs(np.diff(losses)) <= rel_tol * scale
    # record k (k >= window) is flat when changes k-window+1 .. k are all small
    flat = np.zeros(losses.size, dtype=bool)
    for k in range(window, losses.size):
        flat[k] = small[k - window:k].all()
    best, best_len, start = None, 0, None
    for k in range(losses.size + 1):
        if k < losses.size and flat[k]:
            if start is None:
                start = k
        elif start is not None:
            if k - start > best_len:
                best, best_len = (start, k - 1), k - start
            start = None
    return best


def select_stopping_time(trajectory, train, test, m=10, plateau_rel_tol=1e-3, c_h=1.0,
                         window=3):
    """Pick ``t`` among ``m`` plateau candidates by out-of-sample kernel prediction risk.

    For each candidate the iterate is normalized, the kernel link is fitted on
    ``train`` and its squared prediction error measured on ``test``. Ties go
    to the smallest ``t``. If no plateau of at least ``m`` records exists, the
    candidates are spread over the whole trajectory.
    """
    n_rec = len(trajectory)
    if n_rec < m:
        raise ValueError(f"trajectory has {n_rec} records, fewer than m={m}")
    losses = trajectory.losses
    plateau = find_plateau(losses, plateau_rel_tol, window)
    if plateau is None or plateau[1] - plateau[0] + 1 < m:
        lo, hi = 0, n_rec - 1
    else:
        lo, hi = plateau
    idx = np.unique(np.round(np.linspace(lo, hi, m)).astype(int))
    cand_t, cand_loss, risks = [], [], []
    for k in idx:
        rec = trajectory.records[k]
        try:
            beta_hat = normalize_for(train, rec.beta)
        except ValueError:
            risk = math.inf
        else:
            kp = fit_kernel(train, beta_hat, c_h=c_h)
            risk = prediction_risk(kp, test, beta_hat)
        cand_t.append(int(rec.t))
        cand_loss.append(float(rec.loss))
        risks.append(risk)
    best = int(np.argmin(risks))
    return SelectionResult(cand_t[best], cand_t, cand_loss, risks, best, plateau)


def select_known_link(trajectory, test, link, rule="min"):
    """Stopping time for a known link: compare ``f(<x', beta_t/||beta_t||>)`` with ``y'``.

    ``rule="min"`` returns the record minimizing the test error;
    ``rule="first_increase"`` returns the first record whose successor has a
    strictly larger error (falling back to the minimum).
    """
    errors = []
    for rec in trajectory.records:
        norm = np.linalg.norm(rec.beta)
        if norm <= 1e-14:
            errors.append(math.inf)
            continue
        pred = link(index_values(test, rec.beta / norm))
        errors.append(float(np.mean((test.responses - pred) ** 2)))
    errors = np.asarray(errors)
    k = int(np.argmin(errors))
    if rule == "first_increase":
        for j in range(len(errors) - 1):
            if np.isfinite(errors[j]) and errors[j] < errors[j + 1]:
                k = j
                break
    elif rule != "min":
        raise ValueError(f"unknown rule {rule!r}")
    return int(trajectory.records[k].t), errors
