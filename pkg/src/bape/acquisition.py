"""Acquisition utilities over a fitted log-joint GP.

EV scores the variance of the log-normal induced at a point by the GP.
NED scores minus the expected one-step-ahead KL divergence between
posterior draws and the plug-in estimate after a hallucinated query.
EI and AGPR are the Bayesian-optimization and plain active-regression
baselines. :func:`select_next` turns any of them into an argmax.
"""

import math

import numpy as np
from scipy.stats import norm

from .density import KL_FLOOR
from .errors import InvalidArgument, NumericalFailure
from .gp import path_factor

__all__ = [
    "EV_SATURATION",
    "log_ev",
    "ev_from_moments",
    "ev_utility",
    "agpr_utility",
    "ei_from_moments",
    "ei_utility",
    "ned_utilities",
    "ned_utility",
    "Utility",
    "select_next",
]

EV_SATURATION = 700.0
_LOG_FLOOR = math.log(KL_FLOOR)


def log_ev(mean, var):
    """``log(exp(2m + v) (exp(v) - 1))``; ``-inf`` where the variance is zero."""
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    with np.errstate(divide="ignore"):
        big = var > 30.0
        tail = np.where(big, var + np.log1p(-np.exp(-np.where(big, var, 30.0))), 0.0)
        small = np.log(np.expm1(np.where(big, 0.0, var)))
        return 2.0 * mean + var + np.where(big, tail, small)


def ev_from_moments(mean, var):
    """EV values and an overflow mask; overflowing entries hold the largest float."""
    lev = log_ev(mean, var)
    overflow = lev > EV_SATURATION
    with np.errstate(over="ignore"):
        values = np.where(overflow, np.finfo(float).max, np.exp(np.minimum(lev, EV_SATURATION)))
    return values, overflow


def ev_utility(gp, theta):
    mean, var = gp.predict_many(np.asarray(theta, dtype=float).reshape(1, -1))
    values, _ = ev_from_moments(mean, var)
    return float(values[0])


def agpr_utility(gp, theta):
    _, var = gp.predict_many(np.asarray(theta, dtype=float).reshape(1, -1))
    return float(var[0])


def ei_from_moments(mean, var, best):
    mean = np.asarray(mean, dtype=float)
    sd = np.sqrt(np.maximum(np.asarray(var, dtype=float), 0.0))
    gain = mean - best
    out = np.maximum(gain, 0.0)
    live = sd > 0
    z = gain[live] / sd[live]
    out[live] = gain[live] * norm.cdf(z) + sd[live] * norm.pdf(z)
    return np.maximum(out, 0.0)


def ei_utility(gp, theta, best_so_far):
    mean, var = gp.predict_many(np.asarray(theta, dtype=float).reshape(1, -1))
    return float(ei_from_moments(mean, var, best_so_far)[0])


def _log_normalize(logv, weights):
    """Row-wise ``logv - log(sum_j w_j exp(logv_j))``."""
    peak = logv.max(axis=-1, keepdims=True)
    z = np.exp(logv - peak) @ weights
    return logv - peak - np.log(z)[..., None]


def _kl_rows(log_h, log_p, weights):
    """Trapezoid KL(h || p) per row with the same floor convention as ``kl_divergence``."""
    log_p = np.maximum(log_p, _LOG_FLOOR)
    live = log_h > _LOG_FLOOR
    integrand = np.where(live, np.exp(np.where(live, log_h, 0.0)) * (log_h - log_p), 0.0)
    return integrand @ weights


def ned_utilities(gp, candidates, grid, outer=10, inner=1, rng=None, chunk=512):
    """NED utility for each candidate.

    For candidate ``c`` and hallucinated value ``p`` the refit GP (same
    hyperparameters) is the current posterior updated by one noisy
    observation at ``c``. Its mean shifts by ``w (p - mu(c))`` and a draw
    from it is ``f + w (p - f(c) - eps)`` for a current-posterior draw ``f``,
    with ``w = k'(grid, c) / (var(c) + noise)``. Draws of ``p``, ``f`` and
    ``eps`` are shared across candidates, so utilities are compared under
    common random numbers.
    """
    rng = np.random.default_rng() if rng is None else rng
    candidates = np.atleast_2d(np.asarray(candidates, dtype=float))
    if outer < 1 or inner < 1:
        raise InvalidArgument("outer and inner sample counts must be >= 1")
    nodes = grid.nodes
    weights = grid.weights
    hp = gp.hyperparams
    n_grid = nodes.shape[0]
    n_paths = outer * inner

    mu_grid = gp.mean(nodes)
    p_noise = rng.standard_normal(outer)
    eps = rng.standard_normal(n_paths) * math.sqrt(hp.noise_variance)
    z_grid = rng.standard_normal((n_paths, n_grid))

    out = np.empty(candidates.shape[0])
    for start in range(0, candidates.shape[0], chunk):
        cand = candidates[start:start + chunk]
        m = cand.shape[0]
        mu_c, var_c = gp.predict_many(cand)
        # Grid block first: its Cholesky factor, and so the grid part of
        # every draw, is the same for every chunk.
        mean, chol = path_factor(gp, np.vstack([nodes, cand]))
        z = np.hstack([z_grid, rng.standard_normal((n_paths, m))])
        joint = mean[None, :] + z @ chol.T
        f_grid = joint[:, :n_grid]
        f_cand = joint[:, n_grid:]
        denom = var_c + hp.noise_variance
        degenerate = denom <= 1e-8 * hp.signal_variance
        w = gp.cross_covariance(nodes, cand) / np.where(degenerate, 1.0, denom)
        w[:, degenerate] = 0.0
        w = w.T

        total = np.zeros(m)
        for s in range(outer):
            p_plus = mu_c + np.sqrt(var_c) * p_noise[s]
            est = mu_grid[None, :] + w * (p_plus - mu_c)[:, None]
            log_est = _log_normalize(est, weights)
            for j in range(inner):
                k = s * inner + j
                path = f_grid[k][None, :] + w * (p_plus - f_cand[k] - eps[k])[:, None]
                total += _kl_rows(_log_normalize(path, weights), log_est, weights) / inner
        out[start:start + m] = -total / outer
    return out


def ned_utility(gp, theta_plus, grid, outer=10, inner=1, rng=None):
    return float(ned_utilities(gp, np.atleast_2d(theta_plus), grid, outer, inner, rng)[0])


class Utility:
    """Scoring rule used by :func:`select_next`.

    ``kind`` is one of ``EV``, ``NED``, ``EI``, ``AGPR``. Scores are
    monotone in the utility value; EV is ranked by its logarithm so that
    saturated values never tie.
    """

    KINDS = ("EV", "NED", "EI", "AGPR")

    def __init__(self, kind, best_so_far=None, grid=None, outer=10, inner=1):
        kind = kind.upper()
        if kind not in self.KINDS:
            raise InvalidArgument(f"unknown utility {kind!r}")
        if kind == "NED" and grid is None:
            raise InvalidArgument("NED needs an evaluation grid")
        self.kind = kind
        self.best_so_far = best_so_far
        self.grid = grid
        self.outer = outer
        self.inner = inner

    def scores(self, gp, candidates, rng):
        if self.kind == "NED":
            return ned_utilities(gp, candidates, self.grid, self.outer, self.inner, rng)
        mean, var = gp.predict_many(candidates)
        if self.kind == "EV":
            return log_ev(mean, var)
        if self.kind == "AGPR":
            return var
        best = self.best_so_far
        if best is None:
            best = float(gp.training.targets.max())
        return ei_from_moments(mean, var, best)


def select_next(gp, utility, candidates, rng=None):
    """Argmax of the utility over ``candidates``; ties go to the lowest index.

    Returns ``(theta, index, score)``.
    """
    candidates = np.atleast_2d(np.asarray(candidates, dtype=float))
    if candidates.shape[0] == 0:
        raise InvalidArgument("candidates must be non-empty")
    scores = np.asarray(utility.scores(gp, candidates, rng), dtype=float)
    nan = np.isnan(scores)
    if nan.all():
        raise NumericalFailure("every candidate utility is NaN")
    ranked = np.where(nan, -np.inf, scores)
    idx = int(np.argmax(ranked))
    return candidates[idx], idx, float(scores[idx])
