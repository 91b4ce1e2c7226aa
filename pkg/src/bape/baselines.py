"""Comparison methods: Metropolis-Hastings (density estimation or regression
on its queries), rejection ABC and uniform random queries.

All methods count every oracle call toward the budget, including
rejected MCMC proposals and discarded ABC draws.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, NumericalFailure, OracleFailure
from .gp import fit_log_joint
from .loop import make_checkpoint, rng_streams
from .records import (
    ExperimentTrace,
    PriorEstimate,
    QueryLog,
    RegressionEstimate,
    SampleEstimate,
    checkpoint_schedule,
)

__all__ = [
    "MhConfig",
    "MhResult",
    "AbcConfig",
    "DISTANCES",
    "mh_chain",
    "run_mcmc_de",
    "run_mcmc_r",
    "run_abc",
    "run_rand",
    "PROPOSAL_MULTIPLIERS",
]

PROPOSAL_MULTIPLIERS = (0.25, 0.5, 1.0, 2.0, 4.0)


@dataclass
class MhConfig:
    proposal_std: float
    steps: int
    burn_in: int = 0
    seed: int = 0

    def __post_init__(self):
        if not self.proposal_std > 0:
            raise InvalidArgument("proposal_std must be positive")
        if self.steps < 1:
            raise InvalidArgument("steps must be >= 1")
        if not 0 <= self.burn_in < self.steps:
            raise InvalidArgument("burn_in must satisfy 0 <= burn_in < steps")

    def to_dict(self):
        return {
            "proposal_std": float(self.proposal_std),
            "steps": int(self.steps),
            "burn_in": int(self.burn_in),
            "seed": int(self.seed),
        }


@dataclass
class AbcConfig:
    epsilon: float
    distance: str = "relative_sum"
    max_proposals: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise InvalidArgument("epsilon must be positive")
        if self.distance not in DISTANCES:
            raise InvalidArgument(f"unknown distance {self.distance!r}")

    def to_dict(self):
        return {
            "epsilon": float(self.epsilon),
            "distance": self.distance,
            "max_proposals": int(self.max_proposals),
            "seed": int(self.seed),
        }


def _relative_sum(simulated, observed):
    return abs(float(np.sum(observed)) - float(np.sum(simulated))) / float(np.sum(observed))


DISTANCES = {"relative_sum": _relative_sum}


@dataclass
class MhResult:
    """Chain output.

    ``states[i]`` is the chain state after step ``i`` (index 0 is the start),
    ``query_counts[i]`` the oracle calls made by then and ``state_records[i]``
    the query-log index holding that state (``-1`` when not recorded).
    """

    states: np.ndarray
    query_counts: np.ndarray
    accepted: np.ndarray
    state_records: np.ndarray
    query_log: QueryLog
    burn_in: int = 0

    @property
    def n_accepted(self):
        return int(self.accepted.sum())

    @property
    def samples(self):
        return self.states[self.burn_in:]

    def samples_upto(self, queries):
        keep = self.query_counts[self.burn_in:] <= queries
        return self.states[self.burn_in:][keep]

    def accepted_upto(self, queries):
        return int(self.accepted[self.query_counts <= queries].sum())


def mh_chain(
    log_likelihood,
    space,
    cfg,
    rng,
    log_prior=None,
    max_queries=None,
    start=None,
    record=True,
):
    """Random-walk Metropolis-Hastings with an isotropic Gaussian proposal.

    The target is ``log_likelihood + log_prior``. Proposals outside the
    space are rejected without calling ``log_likelihood`` (and without
    counting a query). Stops after ``cfg.steps`` steps or once
    ``max_queries`` calls have been made.
    """
    d = space.dim
    log = QueryLog()

    def evaluate(theta):
        ll = float(log_likelihood(theta))
        lp = 0.0 if log_prior is None else float(log_prior(theta))
        if record:
            log.add(theta, ll, lp)
        else:
            log.total_queries += 1
        return ll + lp

    x = space.sample_uniform(rng, 1)[0] if start is None else np.asarray(start, dtype=float)
    lx = evaluate(x)
    states = [x]
    counts = [log.total_queries]
    accepted = [False]
    current_record = 0 if record else -1
    records = [current_record]

    block = 4096
    step = 0
    while step < cfg.steps:
        if max_queries is not None and log.total_queries >= max_queries:
            break
        n = min(block, cfg.steps - step)
        jumps = rng.standard_normal((n, d)) * cfg.proposal_std
        log_u = np.log(rng.random(n))
        for i in range(n):
            if max_queries is not None and log.total_queries >= max_queries:
                break
            step += 1
            prop = x + jumps[i]
            took = False
            if space.contains(prop):
                lp = evaluate(prop)
                if record:
                    log.records[-1].accepted = False
                if lp > -np.inf and (lx == -np.inf or lp >= lx or log_u[i] < lp - lx):
                    x, lx, took = prop, lp, True
                    if record:
                        log.records[-1].accepted = True
                        current_record = len(log.records) - 1
            states.append(x)
            counts.append(log.total_queries)
            accepted.append(took)
            records.append(current_record)
    burn = min(cfg.burn_in, len(states) - 1)
    return MhResult(
        np.array(states),
        np.array(counts),
        np.array(accepted),
        np.array(records),
        log,
        burn,
    )


def _chain_trace(problem, cfg, budget, method, schedule):
    rngs = rng_streams(cfg.seed)
    trace = ExperimentTrace(method, problem.name, cfg.seed, schedule, config=cfg.to_dict())
    try:
        result = mh_chain(
            problem.oracle,
            problem.space,
            cfg,
            rngs["chain"],
            log_prior=problem.prior.log_pdf,
            max_queries=budget,
        )
    except OracleFailure as exc:
        trace.status = f"aborted: {exc}"
        return trace, None, rngs
    trace.query_log = result.query_log
    trace.chain = list(zip(result.state_records.tolist(), result.query_counts.tolist()))
    return trace, result, rngs


def run_mcmc_de(problem, cfg, budget, evaluator=None, checkpoints=None):
    """MH on the log-joint; the estimate is built from the chain states."""
    schedule = checkpoint_schedule(budget, checkpoints)
    trace, result, _ = _chain_trace(problem, cfg, budget, "MCMC-DE", schedule)
    if result is None:
        return trace
    for q in schedule:
        if q > result.query_counts[-1]:
            break
        if result.accepted_upto(q) == 0:
            trace.add_checkpoint(make_checkpoint(evaluator, PriorEstimate(), q, flags=["no_accepted"]))
        else:
            estimate = SampleEstimate(result.samples_upto(q))
            trace.add_checkpoint(make_checkpoint(evaluator, estimate, q))
    return trace


def _regression_checkpoints(trace, evaluator, schedule, rngs, cv_max_points):
    log = trace.query_log
    for q in schedule:
        if q > log.total_queries:
            break
        pts, y = log.training_data(upto=q)
        if len(y) == 0:
            trace.add_checkpoint(make_checkpoint(None, None, q, flags=["no_data"]))
            continue
        try:
            gp = fit_log_joint(pts, y, rng=rngs["cv"], cv_max_points=cv_max_points)
        except NumericalFailure:
            trace.add_checkpoint(make_checkpoint(None, None, q, flags=["gp_failure"]))
            continue
        trace.add_checkpoint(
            make_checkpoint(evaluator, RegressionEstimate(gp), q, gp.hyperparams.to_dict())
        )


def run_mcmc_r(problem, cfg, budget, evaluator=None, checkpoints=None, cv_max_points=500):
    """Same chain as :func:`run_mcmc_de`; the estimate regresses on every query."""
    schedule = checkpoint_schedule(budget, checkpoints)
    trace, result, rngs = _chain_trace(problem, cfg, budget, "MCMC-R", schedule)
    _regression_checkpoints(trace, evaluator, schedule, rngs, cv_max_points)
    return trace


def run_rand(problem, budget, seed=0, evaluator=None, checkpoints=None, cv_max_points=500):
    """Uniform random queries, regressed with the same GP rules as the active loop."""
    if budget < 1:
        raise InvalidArgument("budget must be >= 1")
    rngs = rng_streams(seed)
    schedule = checkpoint_schedule(budget, checkpoints)
    trace = ExperimentTrace("RAND", problem.name, seed, schedule, config={"seed": int(seed)})
    log = trace.query_log
    try:
        for theta in problem.space.sample_uniform(rngs["design"], budget):
            try:
                loglik = problem.oracle(theta)
            except OracleFailure:
                log.total_queries += 1
                raise
            log.add(theta, loglik, problem.prior.log_pdf(theta))
    except OracleFailure as exc:
        trace.status = f"aborted: {exc}"
    _regression_checkpoints(trace, evaluator, schedule, rngs, cv_max_points)
    return trace


def run_abc(problem, cfg, budget=None, evaluator=None, checkpoints=None):
    """Rejection ABC: keep prior draws whose simulated data lands within ``epsilon``."""
    if problem.oracle.sampler is None:
        raise InvalidArgument(f"{problem.name} cannot simulate from its likelihood")
    budget = cfg.max_proposals if budget is None else budget
    rngs = rng_streams(cfg.seed)
    schedule = checkpoint_schedule(budget, checkpoints)
    trace = ExperimentTrace("ABC", problem.name, cfg.seed, schedule, config=cfg.to_dict())
    log = trace.query_log
    distance = DISTANCES[cfg.distance]
    observed = problem.observed
    kept = []
    kept_counts = []
    rng = rngs["chain"]
    try:
        for _ in range(budget):
            theta = problem.prior.sample(rng, 1)[0]
            try:
                simulated = problem.oracle.simulate(theta, rng)
            except OracleFailure:
                log.total_queries += 1
                raise
            keep = distance(simulated, observed) < cfg.epsilon
            log.add(theta, np.nan, problem.prior.log_pdf(theta), accepted=keep)
            if keep:
                kept.append(theta)
                kept_counts.append(log.total_queries)
    except OracleFailure as exc:
        trace.status = f"aborted: {exc}"
    kept = np.array(kept).reshape(-1, problem.space.dim)
    kept_counts = np.array(kept_counts, dtype=int)
    for q in schedule:
        if q > log.total_queries:
            break
        samples = kept[kept_counts <= q]
        if samples.shape[0] == 0:
            trace.add_checkpoint(make_checkpoint(evaluator, PriorEstimate(), q, flags=["no_accepted"]))
        else:
            trace.add_checkpoint(make_checkpoint(evaluator, SampleEstimate(samples), q))
    return trace
