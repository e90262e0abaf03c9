"""scikit-learn style front ends.

``ImplicitSparseSIM`` and ``ImplicitLowRankSIM`` wrap the whole pipeline:
moment estimate, over-parameterized gradient descent, stopping-time selection
by out-of-sample kernel prediction, and a full-data refit at the chosen time.
"""

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .optim import DivergenceError, SolverConfig, run_matrix, run_vector, threshold_vector
from .robust import (plain_moment, robust_moment_matrix, simulation_kappa, simulation_tau,
                     truncated_moment_vector)
from .score import GaussianVector, IIDUnivariate, StandardGaussian, score_vector
from .select import fit_kernel, normalize_for, select_stopping_time
from .simgen import MatrixSimInstance, SimInstance, get_link, split_half


def _model(design, p=None):
    if design is None:
        return IIDUnivariate(StandardGaussian())
    if isinstance(design, (IIDUnivariate, GaussianVector)):
        return design
    return IIDUnivariate(design)


class ScoreTransformer(TransformerMixin, BaseEstimator):
    """Map covariates to their score ``S(x) = -grad log p0(x)``.

    Parameters
    ----------
    design : score model or univariate family, default=None
        ``None`` means i.i.d. standard normal entries.
    """

    def __init__(self, design=None):
        self.design = design

    def fit(self, X, y=None):
        X = check_array(X)
        self.n_features_in_ = X.shape[1]
        self.model_ = _model(self.design)
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return score_vector(self.model_, X)


class _ImplicitSIMBase(RegressorMixin, BaseEstimator):

    def _solver(self):
        return SolverConfig(self.alpha, self.eta, int(self.t_max), int(self.record_stride))

    def _pipeline(self, inst, moment, run):
        train, test = split_half(inst)
        traj = run(moment(train), self._solver())
        if traj.diverged:
            raise DivergenceError("solver diverged while selecting the stopping time",
                                  t=traj.diverged_at)
        res = select_stopping_time(traj, train, test, m=min(self.m, len(traj)),
                                   plateau_rel_tol=self.plateau_rel_tol, c_h=self.c_h)
        t = res.t_selected
        full = run(moment(inst), SolverConfig(self.alpha, self.eta, t, max(t, 1)))
        if full.diverged:
            raise DivergenceError("solver diverged on the full data", t=full.diverged_at)
        self.stopping_time_ = t
        self.selection_ = res
        self.trajectory_ = traj
        self.coef_ = full.records[-1].beta
        self.direction_ = normalize_for(inst, self.coef_)
        self.predictor_ = fit_kernel(inst, self.direction_, c_h=self.c_h)
        return self

    def predict(self, X):
        check_is_fitted(self, "predictor_")
        return self.predictor_(self._index(X))


class ImplicitSparseSIM(_ImplicitSIMBase):
    """Sparse single index regression by implicitly regularized gradient descent.

    Parameters
    ----------
    design : score model or univariate family, default=None
        Known covariate density. ``None`` means i.i.d. standard normal.
    alpha, eta : float
        Initialization magnitude and stepsize of the ``w*w - v*v`` solver.
    t_max, record_stride : int
        Iteration budget and snapshot spacing.
    tau : {None, "auto"} or float, default=None
        Winsorization level for heavy tails; ``"auto"`` uses ``2 (n / log p)^{1/4}``.
    m : int, default=10
        Number of stopping-time candidates.
    plateau_rel_tol : float, default=1e-3
    c_h : float, default=1.0
        Kernel bandwidth constant, ``h = c_h n^{-1/3}``.
    threshold : float or None
        If set, ``coef_`` entries below it are zeroed (support estimate).

    Attributes
    ----------
    coef_ : ndarray of shape (n_features,)
        Iterate at the selected stopping time (scale ``mu* beta*``).
    direction_ : ndarray
        ``coef_`` normalized to the identifiable scale.
    stopping_time_ : int
    trajectory_ : Trajectory
        Training-half trajectory used for selection.
    """

    def __init__(self, design=None, alpha=1e-5, eta=0.005, t_max=5000, record_stride=10,
                 tau=None, m=10, plateau_rel_tol=1e-3, c_h=1.0, threshold=None):
        self.design = design
        self.alpha = alpha
        self.eta = eta
        self.t_max = t_max
        self.record_stride = record_stride
        self.tau = tau
        self.m = m
        self.plateau_rel_tol = plateau_rel_tol
        self.c_h = c_h
        self.threshold = threshold

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        n, p = X.shape
        if n < 4:
            raise ValueError("need at least 4 samples to split and select")
        model = _model(self.design)
        self.n_features_in_ = p
        self.model_ = model
        inst = SimInstance(X, y.astype(float), np.zeros(p), np.array([], dtype=int),
                           get_link("identity"), 0.0, 0, None, model)
        if self.tau is None:
            def moment(data):
                return plain_moment(data, model)
        else:
            def moment(data):
                tau = simulation_tau(data.n, p) if self.tau == "auto" else float(self.tau)
                return truncated_moment_vector(data, model, tau)
        self._pipeline(inst, moment, run_vector)
        if self.threshold is not None:
            self.coef_ = threshold_vector(self.coef_, self.threshold)
        self.support_ = np.flatnonzero(self.coef_)
        return self

    def _index(self, X):
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X @ self.direction_


class ImplicitLowRankSIM(_ImplicitSIMBase):
    """Low-rank symmetric matrix single index regression.

    ``X`` has shape ``(n, d, d)``; entries are i.i.d. from ``design``. Parameters
    mirror :class:`ImplicitSparseSIM` with ``kappa`` (``"auto"`` gives
    ``2 sqrt(log(4d) / (n d))``) in place of ``tau``.
    """

    def __init__(self, design=None, alpha=1e-3, eta=0.005, t_max=5000, record_stride=10,
                 kappa=None, m=10, plateau_rel_tol=1e-3, c_h=1.0):
        self.design = design
        self.alpha = alpha
        self.eta = eta
        self.t_max = t_max
        self.record_stride = record_stride
        self.kappa = kappa
        self.m = m
        self.plateau_rel_tol = plateau_rel_tol
        self.c_h = c_h

    def _check_3d(self, X):
        X = check_array(X, allow_nd=True)
        if X.ndim != 3 or X.shape[1] != X.shape[2]:
            raise ValueError("X must have shape (n, d, d)")
        return X

    def fit(self, X, y):
        X = self._check_3d(X)
        y = check_array(np.asarray(y), ensure_2d=False)
        if y.shape[0] != X.shape[0]:
            raise ValueError("X and y have different numbers of samples")
        n, d, _ = X.shape
        if n < 4:
            raise ValueError("need at least 4 samples to split and select")
        model = _model(self.design)
        if not isinstance(model, IIDUnivariate):
            raise ValueError("matrix covariates need an i.i.d. design")
        self.n_features_in_ = d * d
        self.model_ = model
        inst = MatrixSimInstance(X, y.astype(float), np.zeros((d, d)), 0, get_link("identity"),
                                 0.0, 0, None, model)
        if self.kappa is None:
            def moment(data):
                return plain_moment(data, model)
        else:
            def moment(data):
                k = simulation_kappa(data.n, d) if self.kappa == "auto" else float(self.kappa)
                return robust_moment_matrix(data, model, k)
        return self._pipeline(inst, moment, run_matrix)

    def _index(self, X):
        X = self._check_3d(X)
        if X.shape[1] * X.shape[2] != self.n_features_in_:
            raise ValueError("matrix size differs from the fitted one")
        return np.einsum("nij,ij->n", X, self.direction_)
