"""The active posterior-estimation loop.

Each iteration refits the log-joint GP on every query so far, scores a
fresh batch of uniform random candidates with the acquisition utility and
queries the oracle at the best one. BO-EI and AGPR share the loop and
differ only in the utility.
"""

from dataclasses import dataclass

import numpy as np

from .acquisition import Utility, select_next
from .errors import InvalidArgument, NumericalFailure, OracleFailure
from .gp import fit_log_joint
from .records import Checkpoint, ExperimentTrace, RegressionEstimate, checkpoint_schedule

NED_GRID_COUNTS = {1: 201, 2: 41, 3: 15}

__all__ = [
    "NED_GRID_COUNTS",
    "BapeConfig",
    "run_bape",
    "run_bo_ei",
    "run_agpr",
    "rng_streams",
    "make_checkpoint",
]


@dataclass
class BapeConfig:
    utility: str = "EV"
    candidate_count: int = None
    n_init: int = 10
    cv_period: int = 20
    ned_outer_samples: int = 10
    ned_inner_samples: int = 1
    ned_eval_grid: object = None
    seed: int = 0
    cv_max_points: int = 500

    def __post_init__(self):
        self.utility = self.utility.upper()
        if self.utility not in Utility.KINDS:
            raise InvalidArgument(f"unknown utility {self.utility!r}")
        for name in ("n_init", "cv_period", "ned_outer_samples", "ned_inner_samples"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be >= 1")
        if self.candidate_count is not None and self.candidate_count < 1:
            raise InvalidArgument("candidate_count must be >= 1")

    def candidates_for(self, dim):
        if self.candidate_count is not None:
            return self.candidate_count
        if self.utility == "NED":
            return 256
        return 10_000 if dim <= 3 else 100_000

    def to_dict(self):
        return {
            "utility": self.utility,
            "candidate_count": self.candidate_count,
            "n_init": self.n_init,
            "cv_period": self.cv_period,
            "ned_outer_samples": self.ned_outer_samples,
            "ned_inner_samples": self.ned_inner_samples,
            "ned_eval_grid": None if self.ned_eval_grid is None else self.ned_eval_grid.header(),
            "seed": self.seed,
            "cv_max_points": self.cv_max_points,
        }


def rng_streams(seed, names=("design", "candidates", "cv", "utility", "chain")):
    """Independent named generators derived from one seed."""
    children = np.random.SeedSequence(int(seed)).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


def make_checkpoint(evaluator, estimate, queries, hyperparams=None, flags=()):
    metrics, extra_flags = ({}, []) if evaluator is None else evaluator(estimate)
    return Checkpoint(int(queries), dict(metrics), list(flags) + list(extra_flags), hyperparams)


def _query(problem, log, theta, utility=None):
    try:
        loglik = problem.oracle(theta)
    except OracleFailure:
        log.total_queries += 1
        raise
    return log.add(theta, loglik, problem.prior.log_pdf(theta), utility=utility)


def run_bape(problem, cfg, budget, evaluator=None, checkpoints=None, method=None):
    """Run the active loop for ``budget`` oracle queries.

    ``evaluator`` maps an estimate to ``(metrics, flags)`` at each
    checkpoint. Oracle or repeated GP failures end the run early with the
    partial trace kept and ``status`` set to ``"aborted: ..."``.
    """
    if budget < cfg.n_init:
        raise InvalidArgument(f"budget {budget} is below n_init {cfg.n_init}")
    rngs = rng_streams(cfg.seed)
    space = problem.space
    grid = cfg.ned_eval_grid
    if cfg.utility == "NED" and grid is None:
        if space.dim not in NED_GRID_COUNTS:
            raise InvalidArgument("NED needs an explicit evaluation grid above 3 dimensions")
        grid = space.grid([NED_GRID_COUNTS[space.dim]] * space.dim)
    utility = Utility(
        cfg.utility, grid=grid, outer=cfg.ned_outer_samples, inner=cfg.ned_inner_samples
    )
    schedule = checkpoint_schedule(budget, checkpoints)
    trace = ExperimentTrace(
        method or cfg.utility, problem.name, cfg.seed, schedule, config=cfg.to_dict()
    )
    log = trace.query_log
    n_candidates = cfg.candidates_for(space.dim)
    tuned = None
    fits = 0
    try:
        for theta in space.sample_uniform(rngs["design"], cfg.n_init):
            _query(problem, log, theta)
            n = log.total_queries
            if n in schedule and n < cfg.n_init:
                gp = fit_log_joint(*log.training_data(), rng=rngs["cv"], cv_max_points=cfg.cv_max_points)
                trace.add_checkpoint(
                    make_checkpoint(evaluator, RegressionEstimate(gp), n, gp.hyperparams.to_dict())
                )
        while True:
            do_cv = fits % cfg.cv_period == 0
            gp = fit_log_joint(
                *log.training_data(),
                tuned=tuned,
                cv=do_cv,
                rng=rngs["cv"],
                cv_max_points=cfg.cv_max_points,
            )
            if do_cv:
                tuned = (gp.hyperparams.signal_variance, gp.hyperparams.noise_variance)
            fits += 1
            n = log.total_queries
            if n in schedule:
                trace.add_checkpoint(
                    make_checkpoint(evaluator, RegressionEstimate(gp), n, gp.hyperparams.to_dict())
                )
            if n >= budget:
                break
            candidates = space.sample_uniform(rngs["candidates"], n_candidates)
            theta, _, score = select_next(gp, utility, candidates, rngs["utility"])
            _query(problem, log, theta, utility=score)
    except (OracleFailure, NumericalFailure) as exc:
        trace.status = f"aborted: {exc}"
    return trace


def run_bo_ei(problem, cfg, budget, evaluator=None, checkpoints=None):
    """Expected improvement on the log-joint (incumbent = best observed log-joint)."""
    cfg = BapeConfig(**{**cfg.to_dict(), "utility": "EI", "ned_eval_grid": None})
    return run_bape(problem, cfg, budget, evaluator, checkpoints, method="BO-EI")


def run_agpr(problem, cfg, budget, evaluator=None, checkpoints=None):
    """Maximum posterior variance of the log-joint GP."""
    cfg = BapeConfig(**{**cfg.to_dict(), "utility": "AGPR", "ned_eval_grid": None})
    return run_bape(problem, cfg, budget, evaluator, checkpoints, method="AGPR")
