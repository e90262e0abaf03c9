"""Implicit regularization for sparse and low-rank single index models."""

__version__ = "0.1.0"

from .bench import (ExperimentConfig, MetricsRow, cv_l1, dist_metric, l1_baseline,
                    run_experiment, support_metrics)
from .estimators import ImplicitLowRankSIM, ImplicitSparseSIM, ScoreTransformer
from .optim import (DivergenceError, SolverConfig, Trajectory, Truth, normalize, run_matrix,
                    run_vector, threshold_matrix, threshold_vector)
from .robust import (MomentEstimate, plain_moment, psi, robust_moment_matrix, spectral_shrink,
                     truncated_moment_vector, winsorize)
from .score import (Custom, Gamma, GaussianVector, IIDUnivariate, StandardGaussian, StudentT,
                    score_matrix, score_vector)
from .select import (KernelPredictor, fit_kernel, kernel_predict, prediction_risk,
                     select_stopping_time)
from .simgen import (MatrixSimInstance, SimInstance, gen_matrix_sim, gen_vector_sim, get_link,
                     load_instance, save_instance)
