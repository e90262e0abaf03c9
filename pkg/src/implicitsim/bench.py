"""Metrics, the l1 baseline and Monte-Carlo experiment drivers.

An experiment is a grid of sample sizes crossed with seeded trials. Every
trial owns a seed derived from the master seed and the trial index only, so
the same trial sees the same ``beta*`` and nested data at every grid point
(common random numbers). Rows are returned in (grid, trial) order no matter
how many worker threads ran them.
"""

import csv
import io
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from .linalg import NotConvergedError
from .optim import (DivergenceError, SolverConfig, Truth, matrix_rank, run_matrix,
                    run_vector, threshold_vector)
from .robust import robust_moment
from .score import GaussianVector, IIDUnivariate, StandardGaussian, design_from_dict
from .select import (fit_kernel, normalize_for, prediction_risk, select_known_link,
                     select_stopping_time)
from .simgen import (MatrixSimInstance, gen_lowrank_beta, gen_matrix_sim, gen_sparse_beta,
                     gen_vector_sim, get_link, make_rng, mc_mu_star, split_half, split_seed)

SCHEMA_LINE = "#schema=v1"

_STREAM_BETA = 2


class ConfigError(ValueError):
    """The experiment description is malformed."""


# -- metrics -----------------------------------------------------------------

def dist_metric(beta_hat, beta_star):
    """``min(||b/||b|| - beta*||, ||b/||b|| + beta*||)`` in the Frobenius norm."""
    beta_hat = np.asarray(beta_hat, dtype=float)
    beta_star = np.asarray(beta_star, dtype=float)
    if beta_hat.shape != beta_star.shape:
        raise ValueError(f"shape mismatch {beta_hat.shape} vs {beta_star.shape}")
    norm = np.linalg.norm(beta_hat)
    if not norm > 1e-14:
        raise ValueError("dist is undefined for a zero estimate")
    u = beta_hat / norm
    return float(min(np.linalg.norm(u - beta_star), np.linalg.norm(u + beta_star)))


def _dist_path(betas, beta_star):
    """``dist_metric`` for a stack of iterates; zero iterates get ``inf``."""
    flat = betas.reshape(betas.shape[0], -1)
    b = beta_star.ravel()
    norms = np.linalg.norm(flat, axis=1)
    out = np.full(flat.shape[0], np.inf)
    ok = norms > 1e-14
    u = flat[ok] / norms[ok, None]
    out[ok] = np.minimum(np.linalg.norm(u - b, axis=1), np.linalg.norm(u + b, axis=1))
    return out


def support_metrics(estimated, truth, p):
    """False discovery and true positive rates of an estimated support.

    ``FDR = |est minus truth| / max(|est|, 1)`` and ``TPR = |est and truth| / |truth|``;
    an empty true support gives ``TPR = 1``.
    """
    est = {int(i) for i in np.asarray(estimated, dtype=int).ravel()}
    tru = {int(i) for i in np.asarray(truth, dtype=int).ravel()}
    for idx in est | tru:
        if not 0 <= idx < p:
            raise IndexError(f"support index {idx} outside [0, {p})")
    fdr = len(est - tru) / max(len(est), 1)
    tpr = len(est & tru) / len(tru) if tru else 1.0
    return fdr, tpr


def l1_baseline(phi, lam):
    """Minimizer of ``<b, b> - 2 <b, phi> + lam ||b||_1``: soft-threshold at ``lam / 2``."""
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    phi = phi.value if hasattr(phi, "value") else np.asarray(phi, dtype=float)
    return np.sign(phi) * np.maximum(np.abs(phi) - 0.5 * lam, 0.0)


def l1_objective(beta, phi, lam):
    phi = phi.value if hasattr(phi, "value") else np.asarray(phi, dtype=float)
    return float(beta @ beta - 2.0 * beta @ phi + lam * np.abs(beta).sum())


def cv_l1(instance, moment, folds=5, n_lambdas=20, lam_range=(0.01, 2.0)):
    """l1 baseline with ``lam`` picked by K-fold cross-validation.

    The grid holds ``n_lambdas`` log-spaced values over ``lam_range * ||Phi||_inf``
    of the full-data moment. Each held-out fold scores a fit by the unpenalized
    loss ``<b, b> - 2 <b, Phi_fold>``. Folds are contiguous row blocks. Returns
    ``(beta, lam)`` refitted on all rows.
    """
    if instance.n < folds:
        raise ValueError("fewer rows than folds")
    phi_all = moment(instance).value
    scale = np.max(np.abs(phi_all))
    if scale == 0:
        return np.zeros_like(phi_all), 0.0
    grid = np.geomspace(lam_range[0], lam_range[1], n_lambdas) * scale
    edges = np.linspace(0, instance.n, folds + 1).astype(int)
    score = np.zeros(n_lambdas)
    rows = np.arange(instance.n)
    for k in range(folds):
        held = rows[edges[k]:edges[k + 1]]
        kept = np.concatenate([rows[:edges[k]], rows[edges[k + 1]:]])
        phi_tr = moment(instance.subset(kept)).value
        phi_te = moment(instance.subset(held)).value
        for j, lam in enumerate(grid):
            b = l1_baseline(phi_tr, lam)
            score[j] += b @ b - 2.0 * b @ phi_te
    lam = float(grid[int(np.argmin(score))])
    return l1_baseline(phi_all, lam), lam


def linear_fit_r2(x, y):
    """Least-squares line through ``(x, y)``; returns ``(slope, intercept, r2)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]), float(coef[1]), float(r2)


# -- configuration -----------------------------------------------------------

KINDS = ("trajectory", "rate_sweep_vector", "rate_sweep_matrix", "support_recovery",
         "one_bit", "prediction_risk")

_KIND_ALIASES = {
    "trajectory": "trajectory",
    "ratesweepvector": "rate_sweep_vector",
    "ratesweepmatrix": "rate_sweep_matrix",
    "supportrecovery": "support_recovery",
    "onebit": "one_bit",
    "predictionrisk": "prediction_risk",
}

_SELECTIONS = ("oracle", "out_of_sample", "fixed", "known_link")


def _canonical_kind(kind):
    key = str(kind).replace("_", "").replace("-", "").lower()
    if key not in _KIND_ALIASES:
        raise ConfigError(f"unknown experiment kind {kind!r}")
    return _KIND_ALIASES[key]


@dataclass
class ExperimentConfig:
    """Declarative description of one Monte-Carlo experiment.

    ``grid`` holds exactly one of ``rates`` (``n`` solved from the rate
    variable ``sqrt(s log p / n)`` or ``sqrt(r d log d / n)`` and rounded up),
    ``sample_factors`` (``n = c * s log p`` or ``c * r d log d``) or ``n``.
    """

    kind: str
    design: dict = field(default_factory=lambda: {"family": "standard_gaussian"})
    link: str = "identity"
    p: Optional[int] = None
    s: Optional[int] = None
    d: Optional[int] = None
    r: Optional[int] = None
    noise_sigma: float = 0.5
    grid: dict = field(default_factory=dict)
    trials: int = 1
    solver: Optional[SolverConfig] = None
    robust: dict = field(default_factory=lambda: {"kind": "none"})
    selection: dict = field(default_factory=lambda: {"kind": "oracle"})
    threshold: Optional[float] = None
    baseline: bool = False
    mu_star: Optional[float] = None
    c_h: float = 1.0
    master_seed: int = 0

    @property
    def is_matrix(self):
        return self.d is not None

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "kind" not in data:
            raise ConfigError("config needs a 'kind'")
        kw = dict(data)
        kw["kind"] = _canonical_kind(kw["kind"])
        if isinstance(kw.get("design"), str):
            kw["design"] = {"family": kw["design"]}
        if isinstance(kw.get("robust"), str):
            kw["robust"] = {"kind": kw["robust"]}
        if isinstance(kw.get("selection"), str):
            kw["selection"] = {"kind": kw["selection"]}
        solver = kw.pop("solver", None) or {}
        try:
            cfg = cls(**kw)
            defaults = SolverConfig.matrix_defaults if cfg.is_matrix else SolverConfig.vector_defaults
            cfg.solver = defaults(**solver)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        if int(self.trials) != self.trials or self.trials < 1:
            raise ConfigError("trials must be a positive integer")
        if self.is_matrix:
            if self.r is None or not 1 <= self.r <= self.d:
                raise ConfigError("matrix experiments need 1 <= r <= d")
            if self.kind == "rate_sweep_vector":
                raise ConfigError("rate_sweep_vector needs p and s, not d")
        else:
            if self.p is None or self.s is None or not 1 <= self.s <= self.p:
                raise ConfigError("vector experiments need 1 <= s <= p")
            if self.kind == "rate_sweep_matrix":
                raise ConfigError("rate_sweep_matrix needs d and r")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be nonnegative")
        keys = [k for k in ("rates", "sample_factors", "n") if k in self.grid]
        if len(keys) > 1:
            raise ConfigError("grid takes exactly one of rates, sample_factors, n")
        if keys and len(self.grid[keys[0]]) == 0:
            raise ConfigError("grid must be nonempty")
        rk = self.robust.get("kind", "none")
        if rk not in ("none", "tau", "kappa"):
            raise ConfigError(f"unknown robustification {rk!r}")
        if rk == "tau" and self.is_matrix or rk == "kappa" and not self.is_matrix:
            raise ConfigError("tau applies to vector data, kappa to matrix data")
        if self.robust.get("rule", "simulation") not in ("simulation", "theory"):
            raise ConfigError("robust rule must be 'simulation' or 'theory'")
        sk = self.selection.get("kind", "oracle")
        if sk not in _SELECTIONS:
            raise ConfigError(f"unknown selection {sk!r}")
        if sk == "fixed" and "t" not in self.selection:
            raise ConfigError("fixed selection needs 't'")
        try:
            get_link(self.link)
            design = self.make_design()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.is_matrix and not isinstance(design, IIDUnivariate):
            raise ConfigError("matrix experiments need an i.i.d. design")
        self.sample_sizes()

    # grid

    def _complexity(self):
        if self.is_matrix:
            return self.r * self.d * math.log(self.d)
        return self.s * math.log(self.p)

    def grid_values(self):
        if "n" in self.grid:
            return [float(v) for v in self.grid["n"]]
        if "sample_factors" in self.grid:
            return [float(v) for v in self.grid["sample_factors"]]
        if "rates" in self.grid:
            return [float(v) for v in self.grid["rates"]]
        if self.kind == "one_bit":
            return [5.0]
        lo, hi = (0.15, 0.35) if self.is_matrix else (0.25, 0.4)
        return [float(v) for v in np.linspace(lo, hi, 8)]

    def grid_key(self):
        for key in ("n", "sample_factors", "rates"):
            if key in self.grid:
                return key
        return "sample_factors" if self.kind == "one_bit" else "rates"

    def sample_sizes(self):
        key = self.grid_key()
        out = []
        for v in self.grid_values():
            if key == "n":
                n = int(v)
            elif key == "sample_factors":
                n = int(math.ceil(v * self._complexity()))
            else:
                if not v > 0:
                    raise ConfigError("rates must be positive")
                n = int(math.ceil(self._complexity() / v ** 2))
            if n < 2:
                raise ConfigError(f"grid value {v} gives fewer than two samples")
            out.append(n)
        return out

    def rate_of(self, n):
        return math.sqrt(self._complexity() / n)

    def make_design(self):
        dim = None if self.is_matrix else self.p
        return design_from_dict(self.design, dim=dim)

    @property
    def lam(self):
        return 5.0 * self.solver.alpha if self.threshold is None else float(self.threshold)


@dataclass
class MetricsRow:
    kind: str
    grid_index: int
    grid_value: float
    n: int
    rate: float
    trial: int
    seed: int
    selected_t: Optional[int] = None
    dist: Optional[float] = None
    fdr: Optional[float] = None
    tpr: Optional[float] = None
    rank: Optional[int] = None
    risk: Optional[float] = None
    baseline_dist: Optional[float] = None
    baseline_fdr: Optional[float] = None
    baseline_tpr: Optional[float] = None
    error: str = ""
    wall_time: float = 0.0

    def __post_init__(self):
        for name in ("fdr", "tpr", "baseline_fdr", "baseline_tpr"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


CSV_COLUMNS = [f.name for f in fields(MetricsRow) if f.name != "wall_time"]


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def rows_to_csv(rows, fh=None, wall_time=False):
    """Metrics CSV with a ``#schema=v1`` comment line.

    Wall time is left out unless asked for, so reruns are byte-identical.
    """
    cols = CSV_COLUMNS + (["wall_time"] if wall_time else [])
    out = io.StringIO() if fh is None else fh
    out.write(SCHEMA_LINE + "\n")
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(cols)
    for row in rows:
        writer.writerow([_cell(getattr(row, c)) for c in cols])
    return out.getvalue() if fh is None else None


def read_rows_csv(text):
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    return list(reader)


# -- runner ------------------------------------------------------------------

class _Context:
    """Per-experiment constants shared by every task (read only)."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.design = cfg.make_design()
        self.link = get_link(cfg.link)
        self.sizes = cfg.sample_sizes()
        self.values = cfg.grid_values()
        self.mu_star = cfg.mu_star
        if self.mu_star is None:
            if self.link.kind in ("identity", "sign"):
                self.mu_star = mc_mu_star(self.link)[0]
            elif self.link.f_prime is not None and self._gaussian_index():
                # the index is exactly N(0, 1) here, so only MC error remains
                self.mu_star = mc_mu_star(self.link, seed=cfg.master_seed)[0]

    def _gaussian_index(self):
        d = self.design
        if isinstance(d, IIDUnivariate):
            return isinstance(d.family, StandardGaussian)
        return isinstance(d, GaussianVector) and not np.any(d.mean)


def _moment_fn(ctx):
    spec = ctx.cfg.robust

    def moment(inst):
        return robust_moment(inst, ctx.design, spec)

    return moment


def _make_instance(ctx, n, seed):
    cfg = ctx.cfg
    rng = make_rng(seed, _STREAM_BETA)
    if cfg.is_matrix:
        beta = gen_lowrank_beta(cfg.d, cfg.r, rng)
        return gen_matrix_sim(beta, ctx.design, ctx.link, cfg.noise_sigma, n, seed, ctx.mu_star)
    beta = gen_sparse_beta(cfg.p, cfg.s, rng)
    if isinstance(ctx.design, GaussianVector):
        beta = beta / ctx.design.sigma_norm(beta)
    return gen_vector_sim(beta, ctx.design, ctx.link, cfg.noise_sigma, n, seed, ctx.mu_star)


def _solve(ctx, inst, moment, t_max=None, truth=True):
    cfg = ctx.cfg
    solver = cfg.solver
    if t_max is not None:
        solver = SolverConfig(solver.alpha, solver.eta, int(t_max), solver.record_stride)
    tr = None
    if truth and inst.mu_star is not None:
        tr = Truth.from_instance(inst)
    run = run_matrix if cfg.is_matrix else run_vector
    traj = run(moment(inst), solver, tr)
    if traj.diverged:
        raise DivergenceError("solver diverged", t=traj.diverged_at)
    return traj


def _final_beta(ctx, inst, moment, t):
    """Iterate ``t`` of a full-data run."""
    if t == 0:
        return np.zeros_like(inst.beta_star)
    cfg = ctx.cfg
    solver = SolverConfig(cfg.solver.alpha, cfg.solver.eta, int(t), int(t))
    run = run_matrix if cfg.is_matrix else run_vector
    traj = run(moment(inst), solver)
    if traj.diverged:
        raise DivergenceError("solver diverged", t=traj.diverged_at)
    return traj.records[-1].beta


def _select(ctx, inst, moment):
    """Return ``(t, beta_hat)`` per the configured selection policy."""
    sel = ctx.cfg.selection
    kind = sel.get("kind", "oracle")
    if kind == "fixed":
        t = int(sel["t"])
        return t, _final_beta(ctx, inst, moment, t)
    if kind == "oracle":
        traj = _solve(ctx, inst, moment, truth=False)
        dist = _dist_path(traj.betas, inst.beta_star)
        k = int(np.argmin(dist))
        return int(traj.records[k].t), traj.records[k].beta
    train, test = split_half(inst)
    if kind == "known_link":
        traj = _solve(ctx, train, moment, truth=False)
        t, _ = select_known_link(traj, test, ctx.link, sel.get("rule", "min"))
        rec = traj.records[list(traj.ts).index(t)]
        return t, rec.beta
    traj = _solve(ctx, train, moment, truth=False)
    m = int(sel.get("m", 10))
    res = select_stopping_time(traj, train, test, m=min(m, len(traj)),
                               plateau_rel_tol=float(sel.get("plateau_rel_tol", 1e-3)),
                               c_h=ctx.cfg.c_h)
    return res.t_selected, _final_beta(ctx, inst, moment, res.t_selected)


def _run_task(ctx, gi, trial):
    cfg = ctx.cfg
    n = ctx.sizes[gi]
    seed = split_seed(cfg.master_seed, trial)
    row = MetricsRow(cfg.kind, gi, ctx.values[gi], n, cfg.rate_of(n), trial, seed)
    start = time.perf_counter()
    try:
        _fill_row(ctx, row, n, seed)
    except DivergenceError:
        row.error = "divergence"
    except (ValueError, FloatingPointError, np.linalg.LinAlgError, NotConvergedError) as exc:
        msg = str(exc)
        row.error = "zero_estimate" if "zero estimate" in msg else type(exc).__name__
    row.wall_time = time.perf_counter() - start
    return row


def _fill_row(ctx, row, n, seed):
    cfg = ctx.cfg
    if cfg.kind == "prediction_risk":
        # oracle direction; kernel fitted on n rows, risk measured on n fresh rows
        inst = _make_instance(ctx, 2 * n, seed)
        train, test = split_half(inst)
        beta = normalize_for(train, inst.beta_star)
        kp = fit_kernel(train, beta, c_h=cfg.c_h)
        row.risk = prediction_risk(kp, test, beta)
        return
    n_data = 2 * n if cfg.kind == "one_bit" else n
    inst = _make_instance(ctx, n_data, seed)
    moment = _moment_fn(ctx)
    t, beta = _select(ctx, inst, moment)
    row.selected_t = t
    if cfg.kind == "support_recovery":
        if cfg.is_matrix:
            row.rank = matrix_rank(beta, cfg.lam)
        else:
            est = np.flatnonzero(threshold_vector(beta, cfg.lam))
            row.fdr, row.tpr = support_metrics(est, inst.support, cfg.p)
    if cfg.baseline and not cfg.is_matrix:
        b_hat, _ = cv_l1(inst, moment)
        row.baseline_fdr, row.baseline_tpr = support_metrics(
            np.flatnonzero(b_hat), inst.support, cfg.p)
        if np.any(b_hat):
            row.baseline_dist = dist_metric(b_hat, inst.beta_star)
    row.dist = dist_metric(beta, inst.beta_star)


def run_experiment(cfg, threads=1):
    """Run every (grid point, trial) task and return the rows in order."""
    if isinstance(cfg, dict):
        cfg = ExperimentConfig.from_dict(cfg)
    ctx = _Context(cfg)
    tasks = [(gi, trial) for gi in range(len(ctx.sizes)) for trial in range(cfg.trials)]
    if threads <= 1:
        return [_run_task(ctx, gi, trial) for gi, trial in tasks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda task: _run_task(ctx, *task), tasks))


def summarize(rows, field_name="dist"):
    """Mean of ``field_name`` per grid point over error-free rows.

    Returns a list of ``(grid_index, n, rate, mean, count)``.
    """
    groups = {}
    for row in rows:
        v = getattr(row, field_name)
        if row.error or v is None:
            continue
        groups.setdefault(row.grid_index, (row.n, row.rate, []))[2].append(float(v))
    return [(gi, n, rate, float(np.mean(vals)), len(vals))
            for gi, (n, rate, vals) in sorted(groups.items())]
