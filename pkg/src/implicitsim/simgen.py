"""Synthetic single index model data with hidden ground truth.

Randomness flows through counter-based Philox generators. A dataset seed is
split into independent child streams (covariates, noise), so datasets that
share a seed but differ in ``n`` are nested: the smaller one is a prefix of
the larger one.
"""

import json
import math
import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .score import GaussianVector, IIDUnivariate, design_from_dict, design_to_dict

SCHEMA = "implicitsim.instance/v1"

_STREAM_COVARIATES = 0
_STREAM_NOISE = 1
_STREAM_BETA = 2
_STREAM_MU = 3


# -- random streams ---------------------------------------------------------

def make_rng(seed, stream=None):
    """Philox generator for ``seed``, optionally on a numbered child stream."""
    seq = np.random.SeedSequence(int(seed))
    if stream is not None:
        seq = np.random.SeedSequence(int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.Philox(seq))


def split_seed(master_seed, *keys):
    """Derive an independent 64-bit seed from a master seed and integer keys."""
    seq = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in keys))
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def _as_rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return make_rng(rng)


# -- link functions ----------------------------------------------------------

def _sech2(x):
    return 1.0 / np.cosh(x) ** 2


_SQRT5 = math.sqrt(5.0)
_SQRT7 = math.sqrt(7.0)

_CATALOG = {
    "identity": (lambda x: x, lambda x: np.ones_like(x)),
    "f1": (lambda x: 8 * x + 4 * np.sin(x), lambda x: 8 + 4 * np.cos(x)),
    "f2": (lambda x: 4 * x + 7 * np.tanh(x) + np.cos(x) ** 2,
           lambda x: 4 + 7 * _sech2(x) - np.sin(2 * x)),
    "f3": (lambda x: x / 2 + 4 * np.sin(x) + _SQRT5 * np.cos(x) ** 2,
           lambda x: 0.5 + 4 * np.cos(x) - _SQRT5 * np.sin(2 * x)),
    "f4": (lambda x: 4 * np.sin(x) + 2 * np.cos(x) ** 2,
           lambda x: 4 * np.cos(x) - 2 * np.sin(2 * x)),
    "f5": (lambda x: _SQRT7 * x + 3 * np.cos(x) ** 2,
           lambda x: _SQRT7 - 3 * np.sin(2 * x)),
    "f6": (lambda x: x / 2 + 4 * np.tanh(x), lambda x: 0.5 + 4 * _sech2(x)),
    "f7": (lambda x: x + 3 * np.sin(x), lambda x: 1 + 3 * np.cos(x)),
    "f8": (lambda x: 10 * np.tanh(x) + 8 * np.sin(x),
           lambda x: 10 * _sech2(x) + 8 * np.cos(x)),
    "sin": (np.sin, np.cos),
}


def _sign(x):
    return np.where(np.asarray(x) >= 0, 1.0, -1.0)


@dataclass(frozen=True, eq=False)
class LinkSpec:
    """A link function ``f`` with optional derivative.

    ``kind`` is ``"identity"``, ``"f1"`` ... ``"f8"``, ``"sign"`` or
    ``"custom"``; ``name`` is what gets written to metadata.
    """

    kind: str
    f: Callable
    f_prime: Optional[Callable] = None
    name: str = ""

    def __call__(self, x):
        return self.f(np.asarray(x, dtype=float))


def get_link(name):
    """Look up a catalog link by name (``identity``, ``f1``..``f8``, ``sin``, ``sign``)."""
    key = str(name).lower()
    if key == "sign":
        return LinkSpec("sign", _sign, None, "sign")
    if key not in _CATALOG:
        raise ValueError(f"unknown link {name!r}")
    f, fp = _CATALOG[key]
    kind = key if key in ("identity",) or key.startswith("f") else "custom"
    return LinkSpec(kind, f, fp, key)


def custom_link(f, f_prime=None, name="custom"):
    return LinkSpec("custom", f, f_prime, name)


def mc_mu_star(link, samples=200_000, seed=0, index_sampler=None):
    """Monte-Carlo estimate of ``mu* = E[f'(Z)]`` and its standard error.

    ``Z`` is standard normal unless ``index_sampler(rng, samples)`` is given
    (e.g. to draw ``<x, beta*>`` under a non-Gaussian design). The identity
    link returns ``(1.0, 0.0)`` and the sign link returns the closed form
    ``sqrt(2/pi)`` with zero error.
    """
    if link.kind == "identity":
        return 1.0, 0.0
    if link.kind == "sign":
        return math.sqrt(2.0 / math.pi), 0.0
    if link.f_prime is None:
        raise ValueError(f"link {link.name!r} has no derivative; mu* is undefined")
    if samples < 2:
        raise ValueError("need at least two samples")
    rng = make_rng(seed, _STREAM_MU)
    z = rng.standard_normal(samples) if index_sampler is None else index_sampler(rng, samples)
    vals = np.asarray(link.f_prime(np.asarray(z, dtype=float)), dtype=float)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(samples))


# -- ground truth ------------------------------------------------------------

def gen_sparse_beta(p, s, rng):
    """s-sparse unit vector with entries ``+-1/sqrt(s)`` on a uniform random support."""
    if not 1 <= s <= p:
        raise ValueError(f"need 1 <= s <= p, got s={s}, p={p}")
    rng = _as_rng(rng)
    # Fisher-Yates prefix: the first s slots of a partial shuffle
    idx = np.arange(p)
    for i in range(s):
        j = i + int(rng.integers(p - i))
        idx[i], idx[j] = idx[j], idx[i]
    support = np.sort(idx[:s])
    signs = np.where(rng.integers(0, 2, size=s) == 1, 1.0, -1.0)
    beta = np.zeros(p)
    beta[support] = signs / math.sqrt(s)
    return beta


def haar_orthogonal(d, rng):
    rng = _as_rng(rng)
    Q, R = np.linalg.qr(rng.standard_normal((d, d)))
    return Q * np.where(np.diag(R) < 0, -1.0, 1.0)


def gen_lowrank_beta(d, r, rng):
    """Symmetric rank-r matrix ``U S U^T`` with unit Frobenius norm."""
    if not 1 <= r <= d:
        raise ValueError(f"need 1 <= r <= d, got r={r}, d={d}")
    rng = _as_rng(rng)
    U = haar_orthogonal(d, rng)
    diag = np.zeros(d)
    positions = gen_sparse_beta(d, r, rng)
    diag[:] = positions
    beta = (U * diag) @ U.T
    return 0.5 * (beta + beta.T)


# -- instances ---------------------------------------------------------------

@dataclass(eq=False)
class SimInstance:
    covariates: np.ndarray
    responses: np.ndarray
    beta_star: np.ndarray
    support: np.ndarray
    link: LinkSpec
    noise_sigma: float
    seed: int
    mu_star: Optional[float] = None
    design: object = field(default_factory=IIDUnivariate)

    @property
    def n(self):
        return self.responses.shape[0]

    @property
    def p(self):
        return self.beta_star.shape[0]

    def subset(self, rows):
        return _subset(self, rows)


@dataclass(eq=False)
class MatrixSimInstance:
    covariates: np.ndarray
    responses: np.ndarray
    beta_star: np.ndarray
    rank: int
    link: LinkSpec
    noise_sigma: float
    seed: int
    mu_star: Optional[float] = None
    design: object = field(default_factory=IIDUnivariate)

    @property
    def n(self):
        return self.responses.shape[0]

    @property
    def d(self):
        return self.beta_star.shape[0]

    def subset(self, rows):
        return _subset(self, rows)


def _subset(inst, rows):
    rows = np.asarray(rows)
    return dataclasses.replace(inst, covariates=inst.covariates[rows],
                               responses=inst.responses[rows])


def split_half(inst):
    """Even train/test split: first half trains, second half tests."""
    half = inst.n // 2
    return inst.subset(np.arange(half)), inst.subset(np.arange(half, inst.n))


def design_norm(beta, design):
    """Identifiability norm: ``||Sigma^{1/2} beta||`` for Gaussian designs, else l2."""
    if isinstance(design, GaussianVector):
        return design.sigma_norm(beta)
    return float(np.linalg.norm(beta))


def _check_instance_vector(inst):
    norm = design_norm(inst.beta_star, inst.design)
    if abs(norm - 1.0) > 1e-10:
        raise ValueError(f"beta_star violates the identifiability norm (norm={norm!r})")
    nz = np.flatnonzero(inst.beta_star)
    if not np.array_equal(nz, np.sort(np.asarray(inst.support))):
        raise ValueError("support does not match the nonzeros of beta_star")


def _check_instance_matrix(inst):
    B = inst.beta_star
    if np.max(np.abs(B - B.T)) > 1e-12:
        raise ValueError("beta_star is not symmetric")
    fro = np.linalg.norm(B)
    if abs(fro - 1.0) > 1e-10:
        raise ValueError(f"beta_star must have unit Frobenius norm (got {fro!r})")
    rank = int(np.sum(np.abs(np.linalg.eigvalsh(B)) > 1e-10))
    if rank != inst.rank:
        raise ValueError(f"beta_star has rank {rank}, expected {inst.rank}")


def gen_vector_sim(beta_star, model, link, noise_sigma, n, seed, mu_star=None):
    """Draw ``n`` rows ``y = f(<x, beta*>) + N(0, noise_sigma^2)``."""
    beta_star = np.asarray(beta_star, dtype=float)
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be nonnegative")
    if n < 0:
        raise ValueError("n must be nonnegative")
    p = beta_star.size
    if isinstance(model, GaussianVector) and model.dim != p:
        raise ValueError("design dimension does not match beta_star")
    X = model.sample(make_rng(seed, _STREAM_COVARIATES), (n, p))
    X = np.asarray(X, dtype=float).reshape(n, p)
    eps = make_rng(seed, _STREAM_NOISE).standard_normal(n) * noise_sigma
    y = link(X @ beta_star) + eps
    inst = SimInstance(X, y, beta_star, np.flatnonzero(beta_star), link, float(noise_sigma),
                       int(seed), mu_star, model)
    _check_instance_vector(inst)
    return inst


def gen_matrix_sim(beta_star, model, link, noise_sigma, n, seed, mu_star=None):
    """Draw ``n`` pairs ``y = f(tr(X^T beta*)) + N(0, noise_sigma^2)`` with i.i.d. entries."""
    beta_star = np.asarray(beta_star, dtype=float)
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be nonnegative")
    if n < 0:
        raise ValueError("n must be nonnegative")
    if not isinstance(model, IIDUnivariate):
        raise TypeError("matrix designs need an i.i.d. univariate model")
    d = beta_star.shape[0]
    X = np.asarray(model.sample(make_rng(seed, _STREAM_COVARIATES), (n, d, d)), dtype=float)
    X = X.reshape(n, d, d)
    eps = make_rng(seed, _STREAM_NOISE).standard_normal(n) * noise_sigma
    index = np.einsum("nij,ij->n", X, beta_star)
    y = link(index) + eps
    rank = int(np.sum(np.abs(np.linalg.eigvalsh(beta_star)) > 1e-10))
    inst = MatrixSimInstance(X, y, beta_star, rank, link, float(noise_sigma), int(seed),
                             mu_star, model)
    _check_instance_matrix(inst)
    return inst


def index_values(inst, beta):
    """Single-index values ``<x_i, beta>`` (or ``tr(X_i^T beta)``) for every row."""
    X = inst.covariates
    if X.ndim == 3:
        return np.einsum("nij,ij->n", X, beta)
    return X @ beta


# -- JSON layout -------------------------------------------------------------

def instance_to_dict(inst):
    is_matrix = isinstance(inst, MatrixSimInstance)
    meta = {
        "kind": "matrix" if is_matrix else "vector",
        "seed": int(inst.seed),
        "link": inst.link.name,
        "noise_sigma": inst.noise_sigma,
        "n": int(inst.n),
        "mu_star": inst.mu_star,
        "design": design_to_dict(inst.design),
    }
    if is_matrix:
        meta.update(d=int(inst.d), rank=int(inst.rank))
    else:
        meta.update(p=int(inst.p), s=int(len(inst.support)))
    out = {
        "schema": SCHEMA,
        "metadata": meta,
        "covariates": inst.covariates.tolist(),
        "responses": inst.responses.tolist(),
        "beta_star": inst.beta_star.tolist(),
    }
    if not is_matrix:
        out["support"] = [int(i) for i in inst.support]
    return out


def instance_from_dict(data):
    if data.get("schema") != SCHEMA:
        raise ValueError(f"unsupported dataset schema {data.get('schema')!r}")
    meta = data["metadata"]
    link = get_link(meta["link"])
    beta = np.asarray(data["beta_star"], dtype=float)
    design = design_from_dict(meta["design"], dim=beta.shape[0])
    y = np.asarray(data["responses"], dtype=float)
    n = y.shape[0]
    if meta["kind"] == "matrix":
        d = beta.shape[0]
        X = np.asarray(data["covariates"], dtype=float).reshape(n, d, d)
        return MatrixSimInstance(X, y, beta, int(meta["rank"]), link, float(meta["noise_sigma"]),
                                 int(meta["seed"]), meta.get("mu_star"), design)
    X = np.asarray(data["covariates"], dtype=float).reshape(n, beta.shape[0])
    return SimInstance(X, y, beta, np.asarray(data["support"], dtype=int), link,
                       float(meta["noise_sigma"]), int(meta["seed"]), meta.get("mu_star"), design)


def save_instance(inst, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(instance_to_dict(inst), fh)
        fh.write("\n")


def load_instance(path):
    with open(path, encoding="utf-8") as fh:
        return instance_from_dict(json.load(fh))


def design_mu_star(link, design, beta_star, samples=200_000, seed=0, chunk=20_000):
    """``mu*`` with the index ``<x, beta*>`` drawn from the actual covariate design."""
    beta_star = np.asarray(beta_star, dtype=float)

    def sampler(rng, m):
        out = np.empty(m)
        for start in range(0, m, chunk):
            k = min(chunk, m - start)
            X = np.asarray(design.sample(rng, (k,) + beta_star.shape), dtype=float)
            X = X.reshape((k,) + beta_star.shape)
            out[start:start + k] = X.reshape(k, -1) @ beta_star.ravel()
        return out

    return mc_mu_star(link, samples, seed, index_sampler=sampler)
