"""Run configuration files (TOML).

Top-level keys::

    budget = 100            # oracle queries per trial
    trials = 20
    seed = 0                # trial i uses seed + i
    output = "runs/fig7b"   # relative paths resolve against the config file
    checkpoints = [25, 50, 100]   # optional, default log-spaced schedule
    jobs = 4                # optional worker count, default: all cores

    [problem]
    id = "trimodal_2d"      # bernoulli_1d | trimodal_2d | mixture | subprocess
    # any further keys are problem parameters (d, seed, command, ...)

    [evaluation]            # all optional
    grid = [201, 201]       # truth/evaluation grid counts per axis
    mh_steps = 100000       # chain length for functional estimates
    mh_burn_in = 10000
    test_points = 10000     # uniform test set size for the "mse" metric
    test_seed = 12345
    mh_seed = 0             # functional chains use mh_seed + trial seed
    metrics = ["mse"]       # subset of kl, functionals, mse (default: all)

    [methods.EV]            # table name = method label in outputs
    kind = "bape"           # bape | bo_ei | agpr | mcmc_de | mcmc_r | abc | rand
    utility = "EV"

Method keys by kind:

* ``bape``/``bo_ei``/``agpr``: ``utility``, ``candidate_count``, ``n_init``,
  ``cv_period``, ``ned_outer_samples``, ``ned_inner_samples``,
  ``ned_grid`` (counts per axis), ``cv_max_points``.
* ``mcmc_de``/``mcmc_r``: ``proposal_std`` (absolute) or
  ``proposal_multiplier`` (times the problem's natural scale, default 1),
  ``sweep`` (list of multipliers; every one is run and the best reported
  under the table name), ``steps``, ``burn_in``, ``cv_max_points``.
* ``abc``: ``epsilon``, ``distance``.
* ``rand``: ``cv_max_points``.
"""

import os
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import InvalidArgument

__all__ = ["MethodSpec", "RunConfig", "load_config", "parse_config", "METHOD_KINDS"]

METHOD_KINDS = {
    "bape": {"utility", "candidate_count", "n_init", "cv_period", "ned_outer_samples",
             "ned_inner_samples", "ned_grid", "cv_max_points"},
    "mcmc_de": {"proposal_std", "proposal_multiplier", "sweep", "steps", "burn_in"},
    "mcmc_r": {"proposal_std", "proposal_multiplier", "sweep", "steps", "burn_in",
               "cv_max_points"},
    "abc": {"epsilon", "distance"},
    "rand": {"cv_max_points"},
}
METHOD_KINDS["bo_ei"] = METHOD_KINDS["bape"] - {"utility", "ned_outer_samples",
                                               "ned_inner_samples", "ned_grid"}
METHOD_KINDS["agpr"] = METHOD_KINDS["bo_ei"]

_TOP_KEYS = {"budget", "trials", "seed", "output", "checkpoints", "jobs", "problem",
             "evaluation", "methods"}
_EVAL_KEYS = {"grid", "mh_steps", "mh_burn_in", "test_points", "test_seed", "mh_seed",
              "metrics"}


@dataclass
class MethodSpec:
    name: str
    kind: str
    params: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    problem: dict
    methods: list
    budget: int
    trials: int = 1
    seed: int = 0
    checkpoints: list = None
    output: str = "."
    evaluation: dict = field(default_factory=dict)
    jobs: int = None

    def trial_seeds(self):
        return [self.seed + i for i in range(self.trials)]


def _require_int(value, key, minimum):
    if isinstance(value, bool) or not isinstance(value, int):
        raise InvalidArgument(f"config key '{key}' must be an integer, got {value!r}")
    if value < minimum:
        raise InvalidArgument(f"config key '{key}' must be >= {minimum}, got {value}")
    return value


def parse_config(data, base_dir="."):
    """Validate a parsed config mapping; errors name the offending key."""
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise InvalidArgument(f"unknown config key '{sorted(unknown)[0]}'")
    for key in ("budget", "problem", "methods"):
        if key not in data:
            raise InvalidArgument(f"missing config key '{key}'")
    budget = _require_int(data["budget"], "budget", 1)
    trials = _require_int(data.get("trials", 1), "trials", 1)
    seed = _require_int(data.get("seed", 0), "seed", 0)
    jobs = data.get("jobs")
    if jobs is not None:
        _require_int(jobs, "jobs", 1)
    problem = data["problem"]
    if not isinstance(problem, dict) or "id" not in problem:
        raise InvalidArgument("config key 'problem.id' is required")
    checkpoints = data.get("checkpoints")
    if checkpoints is not None:
        if not isinstance(checkpoints, list) or not checkpoints:
            raise InvalidArgument("config key 'checkpoints' must be a non-empty list")
        for q in checkpoints:
            _require_int(q, "checkpoints", 1)
    evaluation = dict(data.get("evaluation", {}))
    bad = set(evaluation) - _EVAL_KEYS
    if bad:
        raise InvalidArgument(f"unknown config key 'evaluation.{sorted(bad)[0]}'")
    methods = data["methods"]
    if not isinstance(methods, dict) or not methods:
        raise InvalidArgument("config key 'methods' must hold at least one method table")
    specs = []
    for name, table in methods.items():
        if not isinstance(table, dict) or "kind" not in table:
            raise InvalidArgument(f"config key 'methods.{name}.kind' is required")
        params = dict(table)
        kind = params.pop("kind")
        if kind not in METHOD_KINDS:
            raise InvalidArgument(f"config key 'methods.{name}.kind' has unknown value {kind!r}")
        extra = set(params) - METHOD_KINDS[kind]
        if extra:
            raise InvalidArgument(f"unknown config key 'methods.{name}.{sorted(extra)[0]}'")
        if kind == "abc" and "epsilon" not in params:
            raise InvalidArgument(f"config key 'methods.{name}.epsilon' is required")
        specs.append(MethodSpec(name, kind, params))
    output = data.get("output", ".")
    if not os.path.isabs(output):
        output = os.path.normpath(os.path.join(base_dir, output))
    return RunConfig(
        problem=dict(problem),
        methods=specs,
        budget=budget,
        trials=trials,
        seed=seed,
        checkpoints=checkpoints,
        output=output,
        evaluation=evaluation,
        jobs=jobs,
    )


def load_config(path):
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise InvalidArgument(f"{path}: {exc}") from exc
    return parse_config(data, base_dir=os.path.dirname(os.path.abspath(path)))
