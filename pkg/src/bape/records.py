"""Query logs, experiment traces and their JSONL form."""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument

__all__ = [
    "QueryRecord",
    "QueryLog",
    "Checkpoint",
    "ExperimentTrace",
    "RegressionEstimate",
    "SampleEstimate",
    "PriorEstimate",
    "checkpoint_schedule",
    "DEFAULT_CHECKPOINTS",
    "write_trace",
    "read_trace",
]

DEFAULT_CHECKPOINTS = (25, 50, 100, 200, 400, 800, 1600, 3200)


def checkpoint_schedule(budget, checkpoints=None):
    """Checkpoints not exceeding ``budget``, always ending at ``budget``."""
    points = DEFAULT_CHECKPOINTS if checkpoints is None else checkpoints
    out = sorted({int(q) for q in points if 0 < int(q) <= budget} | {int(budget)})
    return out


@dataclass
class QueryRecord:
    theta: list
    log_likelihood: float
    log_joint: float
    accepted: bool = None
    utility: float = None

    def to_dict(self):
        out = {
            "theta": [float(v) for v in self.theta],
            "log_likelihood": float(self.log_likelihood),
            "log_joint": float(self.log_joint),
        }
        if self.accepted is not None:
            out["accepted"] = bool(self.accepted)
        if self.utility is not None:
            out["utility"] = float(self.utility)
        return out

    @classmethod
    def from_dict(cls, data):
        return cls(
            theta=list(data["theta"]),
            log_likelihood=data["log_likelihood"],
            log_joint=data["log_joint"],
            accepted=data.get("accepted"),
            utility=data.get("utility"),
        )


class QueryLog:
    """Every oracle interaction of one run, in order.

    ``records`` holds the answered queries; ``total_queries`` also counts
    calls that produced no usable record (failed or discarded ones).
    """

    def __init__(self):
        self.records = []
        self.total_queries = 0

    def __len__(self):
        return len(self.records)

    def add(self, theta, log_likelihood, log_prior, accepted=None, utility=None):
        rec = QueryRecord(
            list(np.asarray(theta, dtype=float).ravel()),
            float(log_likelihood),
            float(log_likelihood + log_prior),
            accepted,
            utility,
        )
        self.records.append(rec)
        self.total_queries += 1
        return rec

    def training_data(self, upto=None):
        """Points and log-joint targets of the first ``upto`` records, finite targets only."""
        recs = self.records if upto is None else self.records[:upto]
        if not recs:
            return np.empty((0, 0)), np.empty(0)
        pts = np.array([r.theta for r in recs], dtype=float)
        y = np.array([r.log_joint for r in recs], dtype=float)
        keep = np.isfinite(y)
        return pts[keep], y[keep]

    def points(self):
        return np.array([r.theta for r in self.records], dtype=float)


@dataclass
class Checkpoint:
    queries: int
    metrics: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    hyperparams: dict = None

    def to_dict(self):
        out = {"queries": int(self.queries), "metrics": dict(self.metrics), "flags": list(self.flags)}
        if self.hyperparams is not None:
            out["hyperparams"] = dict(self.hyperparams)
        return out

    @classmethod
    def from_dict(cls, data):
        return cls(data["queries"], dict(data["metrics"]), list(data["flags"]), data.get("hyperparams"))


@dataclass
class ExperimentTrace:
    method: str
    problem: str
    seed: int
    schedule: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    query_log: QueryLog = field(default_factory=QueryLog)
    chain: list = None
    status: str = "complete"
    config: dict = field(default_factory=dict)

    def add_checkpoint(self, checkpoint):
        if self.checkpoints and checkpoint.queries <= self.checkpoints[-1].queries:
            raise InvalidArgument("checkpoint query counts must be strictly increasing")
        self.checkpoints.append(checkpoint)

    def metric(self, name, queries=None):
        """Metric value at ``queries`` (default: the last checkpoint)."""
        cps = self.checkpoints
        cp = cps[-1] if queries is None else next(c for c in cps if c.queries == queries)
        return cp.metrics.get(name)


@dataclass
class RegressionEstimate:
    """A GP fitted to the log-joint; its mean is the plug-in log-joint estimate."""

    gp: object

    def log_joint(self, x):
        return self.gp.mean(x)


@dataclass
class SampleEstimate:
    """Posterior samples (MCMC chain states or retained ABC draws)."""

    samples: np.ndarray


@dataclass
class PriorEstimate:
    """Stand-in used when a sampler has no accepted states yet."""


def write_trace(path, trace):
    """Write one JSON object per line: header, queries, chain, checkpoints, end."""
    lines = [
        {
            "type": "header",
            "method": trace.method,
            "problem": trace.problem,
            "seed": int(trace.seed),
            "schedule": [int(q) for q in trace.schedule],
            "config": trace.config,
        }
    ]
    lines.extend({"type": "query", **r.to_dict()} for r in trace.query_log.records)
    if trace.chain is not None:
        lines.append({"type": "chain", "steps": [[int(a), int(b)] for a, b in trace.chain]})
    lines.extend({"type": "checkpoint", **c.to_dict()} for c in trace.checkpoints)
    lines.append(
        {"type": "end", "total_queries": int(trace.query_log.total_queries), "status": trace.status}
    )
    with open(path, "w", encoding="utf-8") as fh:
        for obj in lines:
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def read_trace(path):
    """Load a trace file. Raises ``InvalidArgument`` when the file is truncated."""
    trace = None
    ended = False
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            kind = obj.pop("type")
            if kind == "header":
                trace = ExperimentTrace(
                    obj["method"], obj["problem"], obj["seed"], obj["schedule"], config=obj["config"]
                )
            elif trace is None:
                raise InvalidArgument(f"{path}: first line must be the header")
            elif kind == "query":
                trace.query_log.records.append(QueryRecord.from_dict(obj))
            elif kind == "chain":
                trace.chain = [tuple(s) for s in obj["steps"]]
            elif kind == "checkpoint":
                trace.checkpoints.append(Checkpoint.from_dict(obj))
            elif kind == "end":
                trace.query_log.total_queries = obj["total_queries"]
                trace.status = obj["status"]
                ended = True
    if trace is None or not ended:
        raise InvalidArgument(f"{path}: incomplete trace")
    return trace
