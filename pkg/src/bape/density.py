"""Densities tabulated on rectangular grids.

Every posterior estimate on a low-dimensional problem is a :class:`GridDensity`:
non-negative node values that integrate to one under the tensor-product
trapezoidal rule.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateDensity, InvalidArgument

__all__ = [
    "RectGrid",
    "GridDensity",
    "default_grid",
    "trapezoid_integrate",
    "normalize_exp",
    "kl_divergence",
    "kde",
    "write_density",
    "read_density",
]

KL_FLOOR = 1e-300
DEFAULT_COUNTS = {1: 2001, 2: 201, 3: 100, 4: 40}


@dataclass(frozen=True, eq=False)
class RectGrid:
    lows: tuple
    highs: tuple
    counts: tuple
    _nodes: np.ndarray = field(default=None, repr=False)
    _weights: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        lows = tuple(float(v) for v in np.atleast_1d(self.lows))
        highs = tuple(float(v) for v in np.atleast_1d(self.highs))
        counts = tuple(int(v) for v in np.atleast_1d(self.counts))
        if not (len(lows) == len(highs) == len(counts)) or not lows:
            raise InvalidArgument("lows, highs and counts must have the same non-zero length")
        for lo, hi, c in zip(lows, highs, counts):
            if not lo < hi:
                raise InvalidArgument(f"axis bounds must satisfy low < high, got ({lo}, {hi})")
            if c < 2:
                raise InvalidArgument("each axis needs at least 2 points")
        object.__setattr__(self, "lows", lows)
        object.__setattr__(self, "highs", highs)
        object.__setattr__(self, "counts", counts)

    @property
    def dim(self):
        return len(self.counts)

    @property
    def size(self):
        return int(np.prod(self.counts))

    @property
    def shape(self):
        return self.counts

    def axes(self):
        return [np.linspace(lo, hi, c) for lo, hi, c in zip(self.lows, self.highs, self.counts)]

    @property
    def nodes(self):
        """``(size, dim)`` node coordinates in row-major order."""
        if self._nodes is None:
            mesh = np.meshgrid(*self.axes(), indexing="ij")
            nodes = np.stack([m.ravel() for m in mesh], axis=1)
            object.__setattr__(self, "_nodes", nodes)
        return self._nodes

    @property
    def weights(self):
        """Tensor-product trapezoid weights, flattened like :attr:`nodes`."""
        if self._weights is None:
            per_axis = []
            for lo, hi, c in zip(self.lows, self.highs, self.counts):
                w = np.full(c, (hi - lo) / (c - 1))
                w[0] *= 0.5
                w[-1] *= 0.5
                per_axis.append(w)
            weights = per_axis[0]
            for w in per_axis[1:]:
                weights = np.multiply.outer(weights, w)
            object.__setattr__(self, "_weights", np.asarray(weights).ravel())
        return self._weights

    def same_as(self, other):
        return (
            self.lows == other.lows and self.highs == other.highs and self.counts == other.counts
        )

    def header(self):
        axes = "; ".join(
            f"axis {i}: {lo!r} {hi!r} {c}"
            for i, (lo, hi, c) in enumerate(zip(self.lows, self.highs, self.counts))
        )
        return f"dim {self.dim}; {axes}"


def default_grid(lows, highs, counts=None):
    """Evaluation grid with the per-dimension default resolution."""
    lows = np.atleast_1d(lows)
    d = len(lows)
    if counts is None:
        if d not in DEFAULT_COUNTS:
            raise InvalidArgument(
                f"no full evaluation grid in {d} dimensions; use sample-based functionals"
            )
        counts = [DEFAULT_COUNTS[d]] * d
    return RectGrid(tuple(lows), tuple(np.atleast_1d(highs)), tuple(np.atleast_1d(counts)))


def trapezoid_integrate(values, grid):
    values = np.asarray(values, dtype=float).ravel()
    if values.shape[0] != grid.size:
        raise InvalidArgument(f"{values.shape[0]} values for a grid of {grid.size} nodes")
    if not np.all(np.isfinite(values)):
        raise InvalidArgument("values must be finite")
    return float(values @ grid.weights)


class GridDensity:
    """Normalized density on a grid; ``log_normalizer`` is log of the pre-normalization mass."""

    def __init__(self, grid, values, log_normalizer=0.0, check=True):
        values = np.asarray(values, dtype=float).ravel()
        if values.shape[0] != grid.size:
            raise InvalidArgument("values do not match the grid")
        if check:
            if not np.all(np.isfinite(values)) or values.min() < 0:
                raise InvalidArgument("density values must be finite and non-negative")
            mass = values @ grid.weights
            if abs(mass - 1.0) > 1e-6:
                raise InvalidArgument(f"density integrates to {mass}, not 1")
        self.grid = grid
        self.values = values
        self.log_normalizer = float(log_normalizer)

    def integral(self):
        return trapezoid_integrate(self.values, self.grid)


def normalize_exp(log_values, grid):
    """``exp(log_values)`` rescaled to unit trapezoid mass (max-shifted)."""
    log_values = np.asarray(log_values, dtype=float).ravel()
    if log_values.shape[0] != grid.size:
        raise InvalidArgument("log values do not match the grid")
    if np.any(np.isnan(log_values)) or np.any(log_values == np.inf):
        raise InvalidArgument("log values must be finite or -inf")
    peak = log_values.max()
    if peak == -np.inf:
        raise DegenerateDensity("all log values are -inf")
    w = np.exp(log_values - peak)
    z = float(w @ grid.weights)
    if not z > 0:
        raise DegenerateDensity("density has zero mass under the trapezoid rule")
    return GridDensity(grid, w / z, peak + np.log(z), check=False)


def kl_divergence(p, q):
    """``KL(p || q)`` by the trapezoid rule, with ``0 log 0 = 0`` and ``q`` floored."""
    if not p.grid.same_as(q.grid):
        raise InvalidArgument("densities live on different grids")
    pv = p.values
    qv = np.maximum(q.values, KL_FLOOR)
    live = pv > KL_FLOOR
    integrand = np.zeros_like(pv)
    integrand[live] = pv[live] * (np.log(pv[live]) - np.log(qv[live]))
    return float(integrand @ p.grid.weights)


def kde(samples, bandwidth, grid):
    """Isotropic Gaussian KDE evaluated on the grid and renormalized over it."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples.reshape(-1, grid.dim)
    if samples.shape[0] == 0:
        raise InvalidArgument("kde needs at least one sample")
    if samples.shape[1] != grid.dim:
        raise InvalidArgument("sample dimension does not match the grid")
    if not bandwidth > 0:
        raise InvalidArgument("bandwidth must be positive")
    nodes = grid.nodes
    log_raw = np.empty(grid.size)
    step = max(1, int(2e7 // samples.shape[0]))
    s2 = np.einsum("ij,ij->i", samples, samples)
    for start in range(0, grid.size, step):
        x = nodes[start:start + step]
        d2 = np.einsum("ij,ij->i", x, x)[:, None] + s2[None, :] - 2.0 * x @ samples.T
        log_raw[start:start + step] = logsumexp(
            -np.maximum(d2, 0.0) / (2.0 * bandwidth ** 2), axis=1
        )
    return normalize_exp(log_raw, grid)


def write_density(path, density, comments=None):
    """Write the text interchange format: header line, then one value per line."""
    lines = [f"# {c}" for c in (comments or [])]
    lines.append(density.grid.header())
    lines.extend(repr(float(v)) for v in density.values)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_header(text):
    parts = [p.strip() for p in text.split(";") if p.strip()]
    if not parts or not parts[0].startswith("dim "):
        raise InvalidArgument(f"bad density header: {text!r}")
    dim = int(parts[0].split()[1])
    lows, highs, counts = [], [], []
    for part in parts[1:]:
        label, rest = part.split(":", 1)
        lo, hi, c = rest.split()
        lows.append(float(lo))
        highs.append(float(hi))
        counts.append(int(c))
    if len(counts) != dim:
        raise InvalidArgument(f"header declares dim {dim} but lists {len(counts)} axes")
    return RectGrid(tuple(lows), tuple(highs), tuple(counts))


def read_density(path):
    """Read a density file; returns ``(GridDensity, comments)``."""
    comments = []
    header = None
    values = []
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                comments.append(line[1:].strip())
            elif header is None:
                header = line
            else:
                values.append(float(line))
    if header is None:
        raise InvalidArgument(f"{path}: missing header")
    grid = _parse_header(header)
    return GridDensity(grid, np.array(values)), comments
