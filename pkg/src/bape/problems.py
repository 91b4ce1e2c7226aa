"""Benchmark problems with analytic ground truth, plus an external-simulator adapter.

Each constructor returns a :class:`Problem` bundling the bounded parameter
space, the prior, a counting likelihood oracle and whatever ground truth is
available (a grid density for d <= 3, closed-form functionals for the
mixture problem).
"""

import json
import math
import queue
import subprocess
import threading
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .density import default_grid, normalize_exp
from .errors import InvalidArgument, OracleFailure

__all__ = [
    "ParamSpace",
    "UniformPrior",
    "BetaPrior",
    "Oracle",
    "AnalyticOracle",
    "SubprocessOracle",
    "Functional",
    "Problem",
    "make_bernoulli_1d",
    "make_trimodal_2d",
    "make_gaussian_mixture",
    "make_problem",
    "mixture_functionals",
    "TRIMODAL_MEANS",
    "TRIMODAL_SD",
]


@dataclass(frozen=True, eq=False)
class ParamSpace:
    lows: np.ndarray
    highs: np.ndarray

    def __post_init__(self):
        lows = np.atleast_1d(np.asarray(self.lows, dtype=float))
        highs = np.atleast_1d(np.asarray(self.highs, dtype=float))
        if lows.shape != highs.shape or lows.ndim != 1:
            raise InvalidArgument("bounds must be matching 1-D sequences")
        if not np.all(lows < highs):
            raise InvalidArgument("every axis needs low < high")
        object.__setattr__(self, "lows", lows)
        object.__setattr__(self, "highs", highs)

    @property
    def dim(self):
        return self.lows.shape[0]

    @property
    def volume(self):
        return float(np.prod(self.highs - self.lows))

    def contains(self, theta):
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta > self.lows) and np.all(theta < self.highs))

    def sample_uniform(self, rng, n):
        return self.lows + (self.highs - self.lows) * rng.random((n, self.dim))

    def grid(self, counts=None):
        return default_grid(self.lows, self.highs, counts)


class UniformPrior:
    def __init__(self, space):
        self.space = space
        self._log_density = -math.log(space.volume)

    def log_pdf(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.ndim == 1:
            inside = np.all(theta >= self.space.lows) and np.all(theta <= self.space.highs)
            return self._log_density if inside else -np.inf
        inside = np.all((theta >= self.space.lows) & (theta <= self.space.highs), axis=1)
        return np.where(inside, self._log_density, -np.inf)

    def sample(self, rng, n):
        return self.space.sample_uniform(rng, n)


class BetaPrior:
    """Beta(a, b) on the unit interval."""

    def __init__(self, a, b):
        self.a = a
        self.b = b
        self._dist = stats.beta(a, b)

    def log_pdf(self, theta):
        theta = np.asarray(theta, dtype=float)
        x = theta[..., 0] if theta.ndim >= 1 else theta
        with np.errstate(divide="ignore"):
            out = self._dist.logpdf(x)
        return float(out) if np.ndim(out) == 0 else out

    def sample(self, rng, n):
        return rng.beta(self.a, self.b, size=(n, 1))


class Oracle:
    """Expensive log-likelihood; every call is counted."""

    sampler = None

    def __init__(self, dim):
        self.dim = dim
        self.count = 0
        self.wall_times = []
        self._lock = threading.Lock()

    def __call__(self, theta):
        theta = np.asarray(theta, dtype=float).ravel()
        if theta.shape[0] != self.dim:
            raise InvalidArgument(f"oracle expects dimension {self.dim}, got {theta.shape[0]}")
        with self._lock:
            self.count += 1
        start = time.perf_counter()
        try:
            return float(self._evaluate(theta))
        finally:
            self.wall_times.append(time.perf_counter() - start)

    def _evaluate(self, theta):
        raise NotImplementedError

    def simulate(self, theta, rng):
        """Draw synthetic data at ``theta``; counted like a likelihood query."""
        if self.sampler is None:
            raise InvalidArgument("this problem cannot simulate from its likelihood")
        with self._lock:
            self.count += 1
        return self.sampler(np.asarray(theta, dtype=float).ravel(), rng)


class AnalyticOracle(Oracle):
    def __init__(self, dim, loglik, sampler=None, check=None):
        super().__init__(dim)
        self._loglik = loglik
        self._check = check
        self.sampler = sampler

    def _evaluate(self, theta):
        if self._check is not None:
            self._check(theta)
        return self._loglik(theta[None, :])[0]


class SubprocessOracle(Oracle):
    """Likelihood served by an external process over a JSON line protocol.

    Each query writes ``{"theta": [...]}`` and reads back ``{"loglik": x}``.
    A timeout restarts the process so a late reply cannot be paired with
    the next request.
    """

    def __init__(self, command, dim, timeout=30.0):
        super().__init__(dim)
        if isinstance(command, str):
            command = [command]
        self.command = list(command)
        self.timeout = timeout
        self._proc = None
        self._lines = None
        self._start()

    def _start(self):
        self._proc = subprocess.Popen(
            self.command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            text=True,
            encoding="utf-8",
            bufsize=1,
        )
        lines = queue.Queue()
        self._lines = lines

        def pump(stream):
            for line in stream:
                lines.put(line)
            lines.put(None)

        threading.Thread(target=pump, args=(self._proc.stdout,), daemon=True).start()

    def _kill(self):
        if self._proc is not None and self._proc.poll() is None:
            self._proc.kill()
            self._proc.wait()

    def close(self):
        if self._proc is not None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=1.0)
            except subprocess.TimeoutExpired:
                self._kill()
            self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _evaluate(self, theta):
        if self._proc is None or self._proc.poll() is not None:
            self._start()
        request = json.dumps({"theta": [float(v) for v in theta]})
        try:
            self._proc.stdin.write(request + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            self._kill()
            raise OracleFailure(f"simulator process died: {exc}") from exc
        try:
            raw = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            self._kill()
            raise OracleFailure(f"simulator timed out after {self.timeout}s") from None
        if raw is None:
            self._kill()
            raise OracleFailure("simulator process exited")
        try:
            reply = json.loads(raw)
            value = float(reply["loglik"])
        except (ValueError, KeyError, TypeError) as exc:
            raise OracleFailure(f"malformed simulator reply: {raw.rstrip()!r}", raw=raw) from exc
        if math.isnan(value) or value == math.inf:
            raise OracleFailure(f"simulator returned {value}", raw=raw)
        return value


@dataclass(frozen=True)
class Functional:
    name: str
    evaluator: object
    true_value: float

    def __call__(self, x):
        return self.evaluator(np.atleast_2d(x))


@dataclass(eq=False)
class Problem:
    name: str
    space: ParamSpace
    prior: object
    oracle: Oracle
    log_likelihood: object
    truth: object = None
    functionals: list = field(default_factory=list)
    sampler: object = None
    proposal_scale: float = 1.0
    params: dict = field(default_factory=dict)
    observed: object = None

    def log_joint(self, x):
        """Vectorized, uncounted log-joint; for ground truth and test sets only."""
        x = np.atleast_2d(x)
        with np.errstate(divide="ignore"):
            return self.log_likelihood(x) + self.prior.log_pdf(x)


def _bernoulli_p(theta):
    return theta ** 2 + (1.0 - theta) ** 2


def make_bernoulli_1d(seed=0, n_obs=500, grid_counts=None):
    """Bimodal 1-D posterior: Beta(1.2, 1) prior, Bernoulli(th^2 + (1-th)^2) data."""
    rng = np.random.default_rng(seed)
    theta_star = rng.beta(1.2, 1.0)
    successes = int(np.sum(rng.random(n_obs) < _bernoulli_p(theta_star)))
    failures = n_obs - successes
    space = ParamSpace([0.0], [1.0])
    prior = BetaPrior(1.2, 1.0)

    def loglik(x):
        t = np.asarray(x, dtype=float)[:, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            log_p = np.log(_bernoulli_p(t))
            log_q = np.log(2.0 * t * (1.0 - t))
            # 0 * log 0 = 0 for the degenerate counts
            out = (successes * log_p if successes else 0.0) + (failures * log_q if failures else 0.0)
        return np.asarray(out, dtype=float) * np.ones_like(t)

    def check(theta):
        if not 0.0 < theta[0] < 1.0:
            raise InvalidArgument(f"theta must lie in (0, 1), got {theta[0]}")

    def simulate(theta, sim_rng):
        check(theta)
        return sim_rng.random(n_obs) < _bernoulli_p(theta[0])

    oracle = AnalyticOracle(1, loglik, sampler=simulate, check=check)
    problem = Problem(
        name="bernoulli_1d",
        space=space,
        prior=prior,
        oracle=oracle,
        log_likelihood=loglik,
        proposal_scale=0.05,
        params={"seed": seed, "n_obs": n_obs, "theta_star": float(theta_star)},
        observed=successes,
    )
    grid = space.grid(grid_counts)
    problem.truth = normalize_exp(problem.log_joint(grid.nodes), grid)
    return problem


TRIMODAL_MEANS = np.array([[0.2, 0.2], [0.5, 0.8], [0.8, 0.3]])
TRIMODAL_SD = 0.08


def _trimodal_logpdf(x):
    d2 = ((x[:, None, :] - TRIMODAL_MEANS[None, :, :]) ** 2).sum(axis=2)
    comp = -d2 / (2 * TRIMODAL_SD ** 2) - np.log(2 * np.pi * TRIMODAL_SD ** 2)
    return np.logaddexp.reduce(comp, axis=1) - np.log(3.0)


def make_trimodal_2d(grid_counts=None):
    """Equal-weight three-bump Gaussian mixture on the unit square (uniform prior)."""
    space = ParamSpace([0.0, 0.0], [1.0, 1.0])
    prior = UniformPrior(space)

    def loglik(x):
        return _trimodal_logpdf(np.asarray(x, dtype=float))

    problem = Problem(
        name="trimodal_2d",
        space=space,
        prior=prior,
        oracle=AnalyticOracle(2, loglik),
        log_likelihood=loglik,
        proposal_scale=TRIMODAL_SD,
    )
    grid = space.grid(grid_counts)
    problem.truth = normalize_exp(problem.log_joint(grid.nodes), grid)
    return problem


def mixture_functionals(d):
    """T1..T4 with true values for the two-component mixture at ``sigma^2 = d/4``.

    T3 sums ``d - 2`` terms, each with expectation ``(1 + sigma^2) / 2``.
    """
    s2 = d / 4.0

    def phi1(x):
        return x.sum(axis=1)

    def phi2(x):
        return (x ** 2).sum(axis=1)

    def phi3(x):
        return (x[:, : d - 2] ** 2 * x[:, 1 : d - 1]).sum(axis=1)

    def phi4(x):
        return (x[:, : d - 2] * x[:, 1 : d - 1] * x[:, 2:d]).sum(axis=1)

    return [
        Functional("T1", phi1, d / 2.0),
        Functional("T2", phi2, d / 2.0 * (1 + 2 * s2)),
        Functional("T3", phi3, (d - 2) / 2.0 * (1 + s2)),
        Functional("T4", phi4, (d - 2) / 2.0),
    ]


def make_gaussian_mixture(d=5):
    """Log-likelihood of an equal mixture of N(0, d/4 I) and N(1, d/4 I)."""
    if d < 3:
        raise InvalidArgument("the mixture functionals need d >= 3")
    s2 = d / 4.0
    sigma = math.sqrt(s2)
    lo, hi = -2 * sigma - 1, 2 * sigma + 2
    space = ParamSpace([lo] * d, [hi] * d)
    prior = UniformPrior(space)
    log_norm = -0.5 * d * math.log(2 * math.pi * s2)

    def loglik(x):
        x = np.asarray(x, dtype=float)
        a = -0.5 * np.sum(x ** 2, axis=1) / s2
        b = -0.5 * np.sum((x - 1.0) ** 2, axis=1) / s2
        return math.log(0.5) + log_norm + np.logaddexp(a, b)

    def sampler(rng, n):
        comp = rng.random(n) < 0.5
        return rng.standard_normal((n, d)) * sigma + comp[:, None].astype(float)

    return Problem(
        name=f"mixture_{d}d",
        space=space,
        prior=prior,
        oracle=AnalyticOracle(d, loglik),
        log_likelihood=loglik,
        functionals=mixture_functionals(d),
        sampler=sampler,
        proposal_scale=sigma,
        params={"d": d},
    )


def make_problem(spec):
    """Build a problem from a config mapping (``{"id": ..., **params}``) or an id string."""
    if isinstance(spec, str):
        spec = {"id": spec}
    spec = dict(spec)
    pid = spec.pop("id", None)
    grid = spec.pop("grid", None)
    if pid == "bernoulli_1d":
        return make_bernoulli_1d(seed=int(spec.get("seed", 0)), grid_counts=grid)
    if pid == "trimodal_2d":
        return make_trimodal_2d(grid_counts=grid)
    if pid == "mixture":
        return make_gaussian_mixture(int(spec.get("d", 5)))
    if pid in ("mixture_5d", "mixture_15d"):
        return make_gaussian_mixture(int(pid[len("mixture_"):-1]))
    if pid == "subprocess":
        for key in ("command", "lows", "highs"):
            if key not in spec:
                raise InvalidArgument(f"problem.{key} is required for the subprocess problem")
        space = ParamSpace(spec["lows"], spec["highs"])
        oracle = SubprocessOracle(spec["command"], space.dim, float(spec.get("timeout", 30.0)))

        def unavailable(x):
            raise InvalidArgument("the subprocess problem has no analytic log-likelihood")

        return Problem(
            name="subprocess",
            space=space,
            prior=UniformPrior(space),
            oracle=oracle,
            log_likelihood=unavailable,
            proposal_scale=float(spec.get("proposal_scale", 0.1)),
        )
    raise InvalidArgument(f"unknown problem id {pid!r}")
