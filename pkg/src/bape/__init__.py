"""Active-learning posterior estimation with a Gaussian-process model of the log-joint."""

from .acquisition import Utility, ev_utility, ned_utility, select_next
from .baselines import AbcConfig, MhConfig, mh_chain, run_abc, run_mcmc_de, run_mcmc_r, run_rand
from .density import GridDensity, RectGrid, kde, kl_divergence, normalize_exp, trapezoid_integrate
from .errors import (
    DegenerateDensity,
    EstimationFailure,
    InvalidArgument,
    NumericalFailure,
    OracleFailure,
)
from .evaluation import (
    Evaluator,
    aggregate_trials,
    estimate_functional,
    kl_vs_truth,
    reconstruction_mse,
    relative_error,
)
from .gp import GPHyperParams, GPPosterior, TrainingSet, fit, fit_log_joint, predict
from .loop import BapeConfig, run_agpr, run_bape, run_bo_ei
from .problems import (
    ParamSpace,
    make_bernoulli_1d,
    make_gaussian_mixture,
    make_problem,
    make_trimodal_2d,
)

__version__ = "0.1.0"
