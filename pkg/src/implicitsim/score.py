"""Covariate distributions and their score functions ``S(x) = -grad log p0(x)``.

Two model shapes are supported: a multivariate Gaussian ``N(mu, Sigma)`` for
vector covariates, and i.i.d. univariate families whose score is applied
entrywise (to vectors or to matrix covariates alike).
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .linalg import check_symmetric, spd_sqrt

__all__ = [
    "StandardGaussian",
    "StudentT",
    "Gamma",
    "Custom",
    "IIDUnivariate",
    "GaussianVector",
    "score_vector",
    "score_matrix",
    "spd_sqrt",
    "design_from_dict",
    "design_to_dict",
]

_MAX_CONDITION = 1e12


class CovariateSupportError(ValueError):
    """A covariate value lies outside the support of the declared density."""


@dataclass(frozen=True)
class StandardGaussian:
    name = "standard_gaussian"

    def score(self, x):
        return np.asarray(x, dtype=float)

    def in_support(self, x):
        return np.isfinite(x)

    def sample(self, rng, size):
        return rng.standard_normal(size)


@dataclass(frozen=True)
class StudentT:
    """Student's t with ``dof`` degrees of freedom; score ``(dof+1) x / (dof + x^2)``."""

    dof: float = 5.0
    name = "student_t"

    def __post_init__(self):
        if not self.dof > 2:
            raise ValueError(f"StudentT needs dof > 2 for finite variance, got {self.dof}")

    def score(self, x):
        x = np.asarray(x, dtype=float)
        return (self.dof + 1.0) * x / (self.dof + x * x)

    def in_support(self, x):
        return np.isfinite(x)

    def sample(self, rng, size):
        return rng.standard_t(self.dof, size)


@dataclass(frozen=True)
class Gamma:
    """Gamma(shape k, scale theta); score ``1/theta - (k - 1)/x`` on ``x > 0``."""

    shape: float = 8.0
    scale: float = 0.1
    name = "gamma"

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0):
            raise ValueError("Gamma shape and scale must be positive")

    def score(self, x):
        x = np.asarray(x, dtype=float)
        return 1.0 / self.scale - (self.shape - 1.0) / x

    def in_support(self, x):
        return np.isfinite(x) & (x > 0)

    def sample(self, rng, size):
        return rng.gamma(self.shape, self.scale, size)


@dataclass(frozen=True, eq=False)
class Custom:
    """User supplied density with its log-density derivative.

    The density must integrate to one (within 1e-3) over ``grid`` by the
    trapezoid rule; this is checked at construction. Sampling is not supported.
    """

    density: Callable
    log_density_gradient: Callable
    grid: np.ndarray = field(default_factory=lambda: np.linspace(-10.0, 10.0, 20001))
    name = "custom"

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        values = np.asarray(self.density(grid), dtype=float)
        if np.any(values < 0):
            raise ValueError("density must be nonnegative on the grid")
        mass = float(np.sum(0.5 * (values[1:] + values[:-1]) * np.diff(grid)))
        if abs(mass - 1.0) > 1e-3:
            raise ValueError(f"density integrates to {mass:.6f} on the grid, expected 1")

    def score(self, x):
        x = np.asarray(x, dtype=float)
        return -np.asarray(self.log_density_gradient(x), dtype=float)

    def in_support(self, x):
        x = np.asarray(x, dtype=float)
        return np.isfinite(x) & (np.asarray(self.density(x)) > 0)

    def sample(self, rng, size):
        raise NotImplementedError("sampling from a Custom density is not supported")


@dataclass(frozen=True)
class IIDUnivariate:
    """Covariates with i.i.d. entries drawn from a univariate ``family``."""

    family: object = field(default_factory=StandardGaussian)

    def score(self, x):
        x = np.asarray(x, dtype=float)
        if not np.all(self.family.in_support(x)):
            raise CovariateSupportError(
                f"covariate entry outside the support of {self.family.name}")
        return self.family.score(x)

    def sample(self, rng, size):
        return self.family.sample(rng, size)


@dataclass(frozen=True, eq=False)
class GaussianVector:
    """Multivariate normal ``N(mean, covariance)`` with a cached inverse."""

    mean: np.ndarray
    covariance: np.ndarray
    covariance_inverse: np.ndarray = field(init=False, repr=False)
    _chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).ravel()
        cov = check_symmetric(self.covariance, tol=1e-10, name="covariance")
        if cov.shape != (mean.size, mean.size):
            raise ValueError("mean and covariance dimensions disagree")
        if np.count_nonzero(cov - np.diag(np.diag(cov))) == 0:
            diag = np.diag(cov)
            cond = np.inf if diag.min() <= 0 else diag.max() / diag.min()
        else:
            eig = np.linalg.eigvalsh(cov)
            cond = np.inf if eig[0] <= 0 else eig[-1] / eig[0]
        if cond > _MAX_CONDITION:
            raise ValueError(f"covariance is singular or ill conditioned (cond={cond:.3g})")
        chol = np.linalg.cholesky(cov)
        eye = np.eye(mean.size)
        chol_inv = np.linalg.solve(chol, eye)
        inv = chol_inv.T @ chol_inv
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "covariance_inverse", 0.5 * (inv + inv.T))
        object.__setattr__(self, "_chol", chol)

    @classmethod
    def standard(cls, p):
        return cls(np.zeros(p), np.eye(p))

    @property
    def dim(self):
        return self.mean.size

    def score(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected covariates of dimension {self.dim}, got {x.shape[-1]}")
        return (x - self.mean) @ self.covariance_inverse

    def sample(self, rng, size):
        n = size[0] if isinstance(size, tuple) else size
        z = rng.standard_normal((n, self.dim))
        return self.mean + z @ self._chol.T

    def sigma_norm(self, beta):
        """``||Sigma^{1/2} beta||_2`` computed as ``sqrt(beta' Sigma beta)``."""
        beta = np.asarray(beta, dtype=float)
        return float(np.sqrt(max(beta @ self.covariance @ beta, 0.0)))


def score_vector(model, x):
    """Score of a single covariate vector (or a batch of rows)."""
    x = np.asarray(x, dtype=float)
    if isinstance(model, GaussianVector):
        return model.score(x)
    if isinstance(model, IIDUnivariate):
        return model.score(x)
    raise TypeError(f"unsupported score model {type(model).__name__}")


def score_matrix(model, X):
    """Entrywise score of a matrix covariate; only defined for i.i.d. models."""
    if isinstance(model, GaussianVector):
        raise TypeError("matrix score is only defined for i.i.d. univariate models")
    if not isinstance(model, IIDUnivariate):
        raise TypeError(f"unsupported score model {type(model).__name__}")
    return model.score(np.asarray(X, dtype=float))


def design_to_dict(model):
    if isinstance(model, GaussianVector):
        return {"family": "gaussian_vector", "mean": model.mean.tolist(),
                "covariance": model.covariance.tolist()}
    fam = model.family
    if isinstance(fam, StandardGaussian):
        return {"family": "standard_gaussian"}
    if isinstance(fam, StudentT):
        return {"family": "student_t", "dof": fam.dof}
    if isinstance(fam, Gamma):
        return {"family": "gamma", "shape": fam.shape, "scale": fam.scale}
    raise ValueError("custom densities cannot be serialized")


def design_from_dict(spec, dim: Optional[int] = None):
    """Build a score model from its JSON description.

    ``{"family": "gaussian_vector"}`` without ``mean``/``covariance`` gives the
    standard normal in dimension ``dim``.
    """
    if isinstance(spec, str):
        spec = {"family": spec}
    family = spec.get("family")
    if family == "standard_gaussian":
        return IIDUnivariate(StandardGaussian())
    if family == "student_t":
        return IIDUnivariate(StudentT(float(spec.get("dof", 5.0))))
    if family == "gamma":
        return IIDUnivariate(Gamma(float(spec.get("shape", 8.0)), float(spec.get("scale", 0.1))))
    if family == "gaussian_vector":
        if "covariance" in spec:
            cov = np.asarray(spec["covariance"], dtype=float)
            mean = np.asarray(spec.get("mean", np.zeros(cov.shape[0])), dtype=float)
            return GaussianVector(mean, cov)
        if dim is None:
            raise ValueError("gaussian_vector design without covariance needs a dimension")
        return GaussianVector.standard(dim)
    raise ValueError(f"unknown design family {family!r}")
