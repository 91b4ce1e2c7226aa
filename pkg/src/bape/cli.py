"""Command-line experiment runner.

``run`` executes every (method, trial) pair of a config and writes one
JSONL trace per pair plus ``results.csv``. ``truth`` writes a problem's
ground-truth density. ``eval`` recomputes checkpoint metrics from stored
traces without touching any oracle.
"""

import argparse
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .baselines import AbcConfig, MhConfig, run_abc, run_mcmc_de, run_mcmc_r, run_rand
from .config import load_config
from .density import read_density, write_density
from .errors import DegenerateDensity, InvalidArgument
from .evaluation import Evaluator, aggregate_trials, write_results_csv
from .gp import GPHyperParams, TrainingSet, fit
from .loop import BapeConfig, run_bape
from .problems import make_problem
from .records import PriorEstimate, RegressionEstimate, SampleEstimate, read_trace, write_trace

__all__ = [
    "main",
    "cmd_run",
    "cmd_truth",
    "cmd_eval",
    "expand_methods",
    "run_trial",
    "trace_path",
    "parse_grid_spec",
]

REGRESSION_KINDS = ("bape", "bo_ei", "agpr", "mcmc_r", "rand")
MH_STEP_FACTOR = 1000


def expand_methods(cfg):
    """``(label, kind, params, group)`` per run; sweeps expand to one label per multiplier."""
    out = []
    for spec in cfg.methods:
        params = dict(spec.params)
        sweep = params.pop("sweep", None)
        if sweep is None:
            out.append((spec.name, spec.kind, params, None))
            continue
        for m in sweep:
            sub = dict(params, proposal_multiplier=float(m))
            sub.pop("proposal_std", None)
            out.append((f"{spec.name}@{float(m):g}", spec.kind, sub, spec.name))
    return out


def trace_path(output, label, seed):
    safe = label.replace(os.sep, "_")
    return os.path.join(output, f"trace_{safe}_{seed}.jsonl")


def _problem_spec(cfg):
    spec = dict(cfg.problem)
    if "grid" in cfg.evaluation:
        spec["grid"] = list(cfg.evaluation["grid"])
    return spec


def _test_set(problem, evaluation):
    n = evaluation.get("test_points")
    if not n:
        return None, None
    rng = np.random.default_rng(int(evaluation.get("test_seed", 12345)))
    pts = problem.space.sample_uniform(rng, int(n))
    return pts, problem.log_joint(pts)


def build_evaluator(problem, evaluation, seed, truth=None):
    pts, vals = _test_set(problem, evaluation)
    return Evaluator(
        problem,
        grid_truth=truth,
        mh_steps=int(evaluation.get("mh_steps", 100_000)),
        mh_burn_in=int(evaluation.get("mh_burn_in", 10_000)),
        mh_seed=int(evaluation.get("mh_seed", 0)) + int(seed),
        test_points=pts,
        test_values=vals,
        metrics=evaluation.get("metrics"),
    )


def _mh_config(problem, params, budget, seed):
    std = params.get("proposal_std")
    if std is None:
        std = float(params.get("proposal_multiplier", 1.0)) * problem.proposal_scale
    steps = int(params.get("steps", MH_STEP_FACTOR * budget))
    return MhConfig(float(std), steps, int(params.get("burn_in", 0)), seed)


def _bape_config(problem, kind, params, seed):
    utility = {"bo_ei": "EI", "agpr": "AGPR"}.get(kind, params.get("utility", "EV"))
    grid = params.get("ned_grid")
    return BapeConfig(
        utility=utility,
        candidate_count=params.get("candidate_count"),
        n_init=int(params.get("n_init", 10)),
        cv_period=int(params.get("cv_period", 20)),
        ned_outer_samples=int(params.get("ned_outer_samples", 10)),
        ned_inner_samples=int(params.get("ned_inner_samples", 1)),
        ned_eval_grid=None if grid is None else problem.space.grid(list(grid)),
        seed=seed,
        cv_max_points=int(params.get("cv_max_points", 500)),
    )


def run_trial(cfg, label, kind, params, seed, problem=None):
    """One (method, seed) run; returns the trace and the oracle's call tally."""
    own = problem is None
    if own:
        problem = make_problem(_problem_spec(cfg))
    try:
        evaluator = build_evaluator(problem, cfg.evaluation, seed)
        budget = cfg.budget
        cps = cfg.checkpoints
        if kind in ("bape", "bo_ei", "agpr"):
            bcfg = _bape_config(problem, kind, params, seed)
            trace = run_bape(problem, bcfg, budget, evaluator, cps, method=label)
        elif kind in ("mcmc_de", "mcmc_r"):
            mcfg = _mh_config(problem, params, budget, seed)
            if kind == "mcmc_de":
                trace = run_mcmc_de(problem, mcfg, budget, evaluator, cps)
            else:
                trace = run_mcmc_r(
                    problem, mcfg, budget, evaluator, cps, int(params.get("cv_max_points", 500))
                )
        elif kind == "abc":
            acfg = AbcConfig(
                float(params["epsilon"]), params.get("distance", "relative_sum"), budget, seed
            )
            trace = run_abc(problem, acfg, budget, evaluator, cps)
        elif kind == "rand":
            trace = run_rand(
                problem, budget, seed, evaluator, cps, int(params.get("cv_max_points", 500))
            )
        else:
            raise InvalidArgument(f"unknown method kind {kind!r}")
        trace.method = label
        trace.config = dict(trace.config, kind=kind, problem=cfg.problem)
        tally = problem.oracle.count
    finally:
        if own and hasattr(problem.oracle, "close"):
            problem.oracle.close()
    return trace, tally


def _run_job(args):
    cfg, label, kind, params, seed, path = args
    start = time.time()
    trace, tally = run_trial(cfg, label, kind, params, seed)
    if trace.query_log.total_queries != tally:
        raise RuntimeError(
            f"{label}/{seed}: trace counts {trace.query_log.total_queries} queries, oracle saw {tally}"
        )
    write_trace(path, trace)
    meta = {
        "started": start,
        "wall_seconds": time.time() - start,
        "oracle_calls": tally,
        "status": trace.status,
    }
    with open(path[: -len(".jsonl")] + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True)
    return tally


def _completed(path):
    if not os.path.exists(path):
        return False
    try:
        read_trace(path)
    except (InvalidArgument, ValueError, KeyError):
        return False
    return True


def _report_metric(rows):
    names = {r["metric"] for r in rows}
    for name in ("kl", "T1", "mse"):
        if name in names:
            return name
    return sorted(names)[0] if names else None


def sweep_best_rows(rows, groups, budget):
    """Rows relabelled with the sweep name for the member with the best final metric."""
    out = []
    metric = _report_metric(rows)
    for name, members in groups.items():
        best, best_val = None, math.inf
        for label in members:
            final = [
                r["mean"]
                for r in rows
                if r["method"] == label and r["metric"] == metric and r["queries"] == budget
            ]
            if final and final[0] < best_val:
                best, best_val = label, final[0]
        if best is not None:
            out.extend(dict(r, method=name) for r in rows if r["method"] == best)
    return out


def cmd_run(path, force=False, jobs=None, seed=None, out=sys.stdout, output=None):
    cfg = load_config(path)
    if seed is not None:
        cfg.seed = int(seed)
    if output is not None:
        cfg.output = output
    jobs = cfg.jobs if jobs is None else int(jobs)
    if jobs is None:
        jobs = os.cpu_count() or 1
    os.makedirs(cfg.output, exist_ok=True)
    runs = expand_methods(cfg)
    pending = []
    paths = []
    for label, kind, params, _ in runs:
        for s in cfg.trial_seeds():
            p = trace_path(cfg.output, label, s)
            paths.append(p)
            if force or not _completed(p):
                pending.append((cfg, label, kind, params, s, p))
    if jobs > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            tallies = list(pool.map(_run_job, pending))
    else:
        tallies = [_run_job(job) for job in pending]
    traces = [read_trace(p) for p in paths]
    rows = aggregate_trials(traces)
    groups = {}
    for label, _, _, group in runs:
        if group is not None:
            groups.setdefault(group, []).append(label)
    rows = rows + sweep_best_rows(rows, groups, cfg.budget)
    rows.sort(key=lambda r: (r["method"], r["queries"], r["metric"]))
    write_results_csv(os.path.join(cfg.output, "results.csv"), rows)
    aborted = [t for t in traces if t.status != "complete"]
    print(
        f"{len(pending)} trials run, {len(paths) - len(pending)} skipped, "
        f"{sum(tallies)} oracle queries executed, {len(aborted)} aborted",
        file=out,
    )
    return 0


def parse_grid_spec(text, dim=None):
    """``"201x201"`` or ``"2001"`` to per-axis counts; ``"default"`` to ``None``."""
    if text in (None, "", "default"):
        return None
    try:
        counts = [int(c) for c in text.lower().split("x")]
    except ValueError:
        raise InvalidArgument(f"bad grid spec {text!r}; expected e.g. 201x201") from None
    if dim is not None and len(counts) == 1 and dim > 1:
        counts = counts * dim
    return counts


def _problem_from_id(problem_id, grid=None):
    spec = {"id": problem_id}
    if problem_id.startswith("mixture") and ":" in problem_id:
        spec = {"id": "mixture", "d": int(problem_id.split(":", 1)[1])}
    if grid is not None:
        spec["grid"] = grid
    return spec


def cmd_truth(problem_id, grid_spec, output, out=sys.stdout):
    spec = _problem_from_id(problem_id)
    if spec["id"].startswith("mixture"):
        raise InvalidArgument(
            f"{problem_id}: no full grid at d >= 5; use sample-based functionals instead"
        )
    probe = make_problem(spec)
    spec["grid"] = parse_grid_spec(grid_spec, probe.space.dim)
    problem = make_problem(spec) if spec["grid"] is not None else probe
    if problem.truth is None:
        raise InvalidArgument(f"{problem_id} has no analytic grid truth")
    comments = [f"problem: {problem.name}"]
    if problem.params:
        comments.append("params: " + json.dumps(problem.params, sort_keys=True))
    write_density(output, problem.truth, comments)
    print(f"wrote {problem.name} truth on {problem.truth.grid.header()} to {output}", file=out)
    return 0


def rebuild_estimate(trace, queries, flags=()):
    """Estimate a trace held at ``queries`` oracle calls, rebuilt from its log."""
    kind = trace.config.get("kind")
    log = trace.query_log
    cp = next((c for c in trace.checkpoints if c.queries == queries), None)
    if kind in REGRESSION_KINDS:
        if cp is None or cp.hyperparams is None:
            return None
        pts, y = log.training_data(upto=queries)
        return RegressionEstimate(fit(GPHyperParams(**cp.hyperparams), TrainingSet(pts, y)))
    if "no_accepted" in flags:
        return PriorEstimate()
    if kind == "mcmc_de":
        burn = int(trace.config.get("burn_in", 0))
        steps = trace.chain[burn:]
        idx = [r for r, q in steps if q <= queries]
        return SampleEstimate(np.array([log.records[i].theta for i in idx], dtype=float))
    if kind == "abc":
        kept = [r.theta for r in log.records[:queries] if r.accepted]
        return SampleEstimate(np.array(kept, dtype=float))
    raise InvalidArgument(f"cannot rebuild estimates for method kind {kind!r}")


def cmd_eval(trace_paths, truth_path, out=sys.stdout):
    """Print ``method,seed,queries,metric,stored,recomputed`` for every checkpoint."""
    truth, comments = read_density(truth_path)
    truth_problem = next(
        (c.split(":", 1)[1].strip() for c in comments if c.startswith("problem:")), None
    )
    print("method,seed,queries,metric,stored,recomputed", file=out)
    for path in trace_paths:
        trace = read_trace(path)
        if truth_problem is not None and truth_problem != trace.problem:
            raise InvalidArgument(
                f"{path}: trace is for {trace.problem} but the truth file is for {truth_problem}"
            )
        spec = dict(trace.config.get("problem") or {"id": trace.problem})
        if spec.get("id") == "subprocess":
            raise InvalidArgument(f"{path}: subprocess traces have no grid truth")
        spec["grid"] = list(truth.grid.counts)
        problem = make_problem(spec)
        if not problem.space.grid(list(truth.grid.counts)).same_as(truth.grid):
            raise InvalidArgument(f"{path}: truth grid does not cover the problem's space")
        evaluator = build_evaluator(problem, {}, trace.seed, truth=truth)
        for cp in trace.checkpoints:
            try:
                est = rebuild_estimate(trace, cp.queries, cp.flags)
            except DegenerateDensity:
                est = None
            if est is None:
                continue
            metrics, _ = evaluator(est)
            for name in sorted(metrics):
                stored = cp.metrics.get(name, float("nan"))
                print(
                    f"{trace.method},{trace.seed},{cp.queries},{name},{stored!r},{metrics[name]!r}",
                    file=out,
                )
    return 0


def _parser():
    parser = argparse.ArgumentParser(prog="bape", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run every method and trial of a config file")
    run.add_argument("config")
    run.add_argument("--force", action="store_true", help="re-run trials whose traces exist")
    run.add_argument("--jobs", type=int, default=None, help="worker processes")
    run.add_argument("--seed", type=int, default=None, help="override the base seed")
    run.add_argument("--output", default=None, help="override the output directory")
    truth = sub.add_parser("truth", help="write a problem's ground-truth grid density")
    truth.add_argument("problem")
    truth.add_argument("grid", help="counts per axis, e.g. 201x201, or 'default'")
    truth.add_argument("out")
    ev = sub.add_parser("eval", help="recompute metrics from stored traces")
    ev.add_argument("traces", nargs="+")
    ev.add_argument("--truth", required=True)
    return parser


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.config, args.force, args.jobs, args.seed, output=args.output)
        if args.command == "truth":
            return cmd_truth(args.problem, args.grid, args.out)
        return cmd_eval(args.traces, args.truth)
    except (InvalidArgument, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
