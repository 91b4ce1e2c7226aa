"""Metrics on plug-in estimates and multi-trial aggregation."""

import csv
import math

import numpy as np

from .baselines import MhConfig, mh_chain
from .density import kde, kl_divergence, normalize_exp
from .errors import DegenerateDensity, EstimationFailure, InvalidArgument
from .gp import select_bandwidth
from .records import PriorEstimate, RegressionEstimate, SampleEstimate

__all__ = [
    "kl_vs_truth",
    "relative_error",
    "estimate_functional",
    "estimate_functionals",
    "reconstruction_mse",
    "aggregate_trials",
    "write_results_csv",
    "RESULT_COLUMNS",
    "gp_mean_function",
    "hdr_threshold",
    "in_hdr",
    "estimate_density",
    "Evaluator",
]

RESULT_COLUMNS = ("method", "queries", "metric", "mean", "stderr", "n_trials", "n_excluded")


def kl_vs_truth(estimate, truth):
    """KL(truth || estimate)."""
    return kl_divergence(truth, estimate)


def relative_error(t_hat, t_true):
    if t_true == 0:
        raise InvalidArgument("relative error against a zero true value")
    return abs(t_hat - t_true) / abs(t_true)


def gp_mean_function(gp):
    """Fast single-point GP mean, for long MCMC runs on the estimate."""
    hp = gp.hyperparams
    pts = gp.training.points
    alpha = hp.signal_variance * gp.alpha
    scale = 0.5 / hp.bandwidth ** 2
    mu0 = hp.prior_mean_const

    def mean(theta):
        d2 = np.sum((pts - theta) ** 2, axis=1)
        return mu0 + float(np.exp(-scale * d2) @ alpha)

    return mean


def estimate_functionals(log_joint_estimate, space, functionals, cfg):
    """Post-burn-in MH averages of several functionals from one chain.

    ``log_joint_estimate`` maps a single parameter vector to a real. No
    oracle is involved. Raises ``EstimationFailure`` when the chain never
    moves.
    """
    rng = np.random.default_rng(cfg.seed)
    result = mh_chain(log_joint_estimate, space, cfg, rng, record=False)
    if result.n_accepted == 0:
        raise EstimationFailure("the chain on the estimate accepted no proposals")
    samples = result.samples
    return {f.name: float(np.mean(f(samples))) for f in functionals}


def estimate_functional(log_joint_estimate, space, functional, cfg):
    return estimate_functionals(log_joint_estimate, space, [functional], cfg)[functional.name]


def reconstruction_mse(log_joint_estimate, test_points, true_log_joint):
    """Mean squared error of the exponentiated log-joint on a test set.

    Both sides are shifted by the largest true value first, so the metric
    ignores a common additive log constant.
    """
    test_points = np.atleast_2d(np.asarray(test_points, dtype=float))
    truth = np.asarray(true_log_joint, dtype=float).ravel()
    if truth.shape[0] == 0:
        raise InvalidArgument("empty test set")
    if truth.shape[0] != test_points.shape[0]:
        raise InvalidArgument("test points and true values differ in length")
    shift = truth.max()
    est = np.asarray(log_joint_estimate(test_points), dtype=float).ravel()
    with np.errstate(over="ignore"):
        diff = np.exp(est - shift) - np.exp(truth - shift)
    return float(np.mean(diff ** 2))


def hdr_threshold(density, mass=0.95):
    """Smallest node value ``t`` whose super-level set ``{p >= t}`` holds ``mass``."""
    values = density.values
    order = np.argsort(values)[::-1]
    cum = np.cumsum(values[order] * density.grid.weights[order])
    k = int(np.searchsorted(cum, mass * cum[-1]))
    return float(values[order[min(k, len(order) - 1)]])


def in_hdr(density, points, mass=0.95, log_density=None):
    """Mask of points inside the ``mass`` highest-density region of ``density``.

    With ``log_density`` (an unnormalized log-density callable) points are
    judged by their exact value; otherwise by the nearest grid node.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    t = hdr_threshold(density, mass)
    if log_density is not None:
        vals = np.exp(np.asarray(log_density(points), dtype=float) - density.log_normalizer)
        return vals >= t
    grid = density.grid
    idx = np.zeros(points.shape[0], dtype=int)
    for axis, (lo, hi, c) in enumerate(zip(grid.lows, grid.highs, grid.counts)):
        step = (hi - lo) / (c - 1)
        k = np.clip(np.rint((points[:, axis] - lo) / step), 0, c - 1).astype(int)
        idx = idx * c + k
    return density.values[idx] >= t


def estimate_density(estimate, grid, prior=None):
    """Grid density implied by any estimate type."""
    if isinstance(estimate, RegressionEstimate):
        return normalize_exp(estimate.gp.mean(grid.nodes), grid)
    if isinstance(estimate, SampleEstimate):
        n = estimate.samples.shape[0]
        return kde(estimate.samples, select_bandwidth(n, grid.dim), grid)
    if isinstance(estimate, PriorEstimate):
        if prior is None:
            raise InvalidArgument("a prior is needed to evaluate a prior estimate")
        with np.errstate(divide="ignore"):
            return normalize_exp(prior.log_pdf(grid.nodes), grid)
    raise InvalidArgument(f"cannot turn {type(estimate).__name__} into a density")


class Evaluator:
    """Maps an estimate to ``(metrics, flags)`` for one problem.

    Grid problems get ``kl``. Problems with functionals get ``T1``.. as
    relative errors. With a test set (``test_points``, ``test_values``),
    regression estimates also get ``mse``. ``metrics`` restricts the
    output to a subset of ``{"kl", "functionals", "mse"}``.
    """

    def __init__(
        self,
        problem,
        grid_truth=None,
        mh_steps=100_000,
        mh_burn_in=10_000,
        mh_seed=0,
        test_points=None,
        test_values=None,
        prior_draws=10_000,
        metrics=None,
    ):
        if metrics is not None:
            bad = set(metrics) - {"kl", "functionals", "mse"}
            if bad:
                raise InvalidArgument(f"unknown metric group {sorted(bad)[0]!r}")
        self.metrics = None if metrics is None else set(metrics)
        self.problem = problem
        self.truth = problem.truth if grid_truth is None else grid_truth
        self.mh_cfg = MhConfig(problem.proposal_scale, mh_steps, mh_burn_in, mh_seed)
        self.test_points = test_points
        self.test_values = test_values
        self.prior_draws = prior_draws

    def _functionals(self, estimate):
        fns = self.problem.functionals
        if isinstance(estimate, RegressionEstimate):
            values = estimate_functionals(
                gp_mean_function(estimate.gp), self.problem.space, fns, self.mh_cfg
            )
        else:
            if isinstance(estimate, SampleEstimate):
                samples = estimate.samples
            else:
                rng = np.random.default_rng(self.mh_cfg.seed)
                samples = self.problem.prior.sample(rng, self.prior_draws)
            values = {f.name: float(np.mean(f(samples))) for f in fns}
        out = {}
        for f in fns:
            out[f.name] = relative_error(values[f.name], f.true_value)
            out[f.name + "_value"] = values[f.name]
        return out

    def _wants(self, group):
        return self.metrics is None or group in self.metrics

    def __call__(self, estimate):
        metrics = {}
        flags = []
        if self.truth is not None and self._wants("kl"):
            try:
                dens = estimate_density(estimate, self.truth.grid, self.problem.prior)
                metrics["kl"] = kl_vs_truth(dens, self.truth)
            except DegenerateDensity:
                flags.append("degenerate_density")
        if self.problem.functionals and self._wants("functionals"):
            try:
                metrics.update(self._functionals(estimate))
            except EstimationFailure:
                flags.append("estimation_failure")
        if (
            self.test_points is not None
            and isinstance(estimate, RegressionEstimate)
            and self._wants("mse")
        ):
            metrics["mse"] = reconstruction_mse(
                estimate.gp.mean, self.test_points, self.test_values
            )
        return metrics, flags


def aggregate_trials(traces):
    """Mean and standard error per (method, checkpoint, metric).

    Traces of one method must share a checkpoint schedule. Flagged
    checkpoints, and checkpoints missing from aborted traces, are left out
    and counted in ``n_excluded``. Returns rows as dicts keyed by
    :data:`RESULT_COLUMNS`, sorted by method, queries and metric.
    """
    by_method = {}
    for tr in traces:
        by_method.setdefault(tr.method, []).append(tr)
    rows = []
    for method in sorted(by_method):
        group = by_method[method]
        schedule = list(group[0].schedule)
        if any(list(tr.schedule) != schedule for tr in group):
            raise InvalidArgument(f"traces of {method} have different checkpoint schedules")
        for q in schedule:
            values = {}
            excluded = 0
            for tr in group:
                cp = next((c for c in tr.checkpoints if c.queries == q), None)
                if cp is None or cp.flags:
                    excluded += 1
                    continue
                for name, v in cp.metrics.items():
                    values.setdefault(name, []).append(float(v))
            names = set(values)
            for name in sorted(names):
                vals = sorted(values[name])
                n = len(vals)
                mean = math.fsum(vals) / n
                if n > 1:
                    var = math.fsum((v - mean) ** 2 for v in vals) / (n - 1)
                    stderr = math.sqrt(var / n)
                else:
                    stderr = 0.0
                rows.append(
                    {
                        "method": method,
                        "queries": int(q),
                        "metric": name,
                        "mean": mean,
                        "stderr": stderr,
                        "n_trials": n,
                        "n_excluded": excluded + (len(group) - excluded - n),
                    }
                )
    return rows


def write_results_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_COLUMNS)
        for r in rows:
            writer.writerow(
                [
                    r["method"],
                    r["queries"],
                    r["metric"],
                    repr(float(r["mean"])),
                    repr(float(r["stderr"])),
                    r["n_trials"],
                    r["n_excluded"],
                ]
            )
