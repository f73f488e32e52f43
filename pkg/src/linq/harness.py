"""Experiment orchestration: instance specs, seeded trials, oracle scoring and CSV/JSON reports.

An experiment is a JSON document::

    {
      "name": "oppq-standard",
      "instance": {"generator": "random_linear", "n_states": 200, "n_actions": 5,
                   "n_features": 10, "discount": 0.9, "seed": 0},
      "algorithm": {"name": "oppq", "epsilon": 0.1, "delta": 0.1},
      "trials": 20,
      "base_seed": 0,
      "success_epsilon": 0.1,
      "sweep": {"axis": "N", "values": [100000, 400000]}
    }

``instance`` may instead be ``{"path": "instance.json"}`` (relative to the
spec file). Either form accepts ``xi`` / ``xi_seed`` to mix the kernel with
random noise while keeping the features. Trial ``t`` is seeded with
``base_seed + t``; sweep points reuse the same trial seeds.
"""

import copy
import csv
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_discount, check_positive_int
from .instances import (
    AnchorsNotFound,
    find_anchors,
    make_lower_bound_instance,
    make_random_linear_mdp,
    make_random_tabular_mdp,
    make_soft_aggregation_mdp,
    perturb_kernel,
)
from .mdp import dumps_instance, linear_mdp_from_dict
from .oppq import DEFAULT_CONSTANTS, OPPQLearner, monotonicity_audit
from .oracle import DEFAULT_TOL, ExactSolution, dumps_solution, instance_hash, policy_error, solve_optimal
from .ppq import PPQLearner
from .sampling import GenerativeModel

SCHEMA_VERSION = 1
GENERATORS = ("random_linear", "soft_aggregation", "lower_bound")
ALGORITHMS = ("ppq", "oppq")
AXES = ("N", "epsilon", "gamma", "xi")
FLAG_TOL = 1e-9
TRIAL_COLUMNS = (
    "point", "axis_value", "trial", "seed", "status", "samples_used", "samples_expected", "policy_error",
    "success", "monotone_ok", "underestimate_ok", "clip_ok", "R", "R_outer", "m", "m1", "per_round", "error",
)
SWEEP_COLUMNS = (
    "point", "axis_value", "trials", "failed", "median", "p10", "p90", "success_rate", "total_samples",
)

_INSTANCE_KEYS = {
    "random_linear": {"n_states", "n_actions", "n_features", "discount", "seed", "anchored", "support_fraction"},
    "soft_aggregation": {"n_states", "n_actions", "n_features", "discount", "seed"},
    "lower_bound": {"inner_states", "inner_actions", "discount", "seed"},
}
_ALGORITHM_KEYS = {
    "ppq": {"total_samples", "rounds_coefficient"},
    "oppq": {"epsilon", "delta"} | set(DEFAULT_CONSTANTS),
}


class SpecError(ValueError):
    """An experiment spec failed validation; the message names the field."""


def _require(doc, key, where):
    if key not in doc:
        raise SpecError(f"{where}.{key} is required")
    return doc[key]


def _reject_unknown(doc, allowed, where):
    extra = sorted(set(doc) - set(allowed))
    if extra:
        raise SpecError(f"{where} has unknown field(s): {', '.join(extra)}")


def _field(fn, doc, key, where, *args):
    try:
        return fn(_require(doc, key, where), *args)
    except SpecError:
        raise
    except (TypeError, ValueError) as exc:
        raise SpecError(f"{where}.{key}: {exc}") from None


def _validate_instance(doc):
    if not isinstance(doc, dict):
        raise SpecError("instance must be an object")
    common = {"xi", "xi_seed", "name"}
    if "path" in doc:
        _reject_unknown(doc, common | {"path"}, "instance")
    else:
        gen = _require(doc, "generator", "instance")
        if gen not in GENERATORS:
            raise SpecError(f"instance.generator must be one of {GENERATORS}, got {gen!r}")
        _reject_unknown(doc, _INSTANCE_KEYS[gen] | common | {"generator"}, "instance")
        size_keys = ("inner_states", "inner_actions") if gen == "lower_bound" else ("n_states", "n_actions", "n_features")
        for key in size_keys:
            _field(check_positive_int, doc, key, "instance", key)
        _field(check_discount, doc, "discount", "instance")
        _field(_check_seed, doc, "seed", "instance")
        if "support_fraction" in doc and not 0.0 < float(doc["support_fraction"]) <= 1.0:
            raise SpecError("instance.support_fraction must lie in (0, 1]")
    if "xi" in doc and not 0.0 <= float(doc["xi"]) <= 1.0:
        raise SpecError(f"instance.xi must lie in [0, 1], got {doc['xi']!r}")
    if "xi_seed" in doc:
        _field(_check_seed, doc, "xi_seed", "instance")


def _validate_algorithm(doc):
    if not isinstance(doc, dict):
        raise SpecError("algorithm must be an object")
    name = _require(doc, "name", "algorithm")
    if name not in ALGORITHMS:
        raise SpecError(f"algorithm.name must be one of {ALGORITHMS}, got {name!r}")
    _reject_unknown(doc, _ALGORITHM_KEYS[name] | {"name"}, "algorithm")
    if name == "ppq":
        _field(check_positive_int, doc, "total_samples", "algorithm", "total_samples")
        if "rounds_coefficient" in doc and not float(doc["rounds_coefficient"]) > 0:
            raise SpecError("algorithm.rounds_coefficient must be positive")
    else:
        for key in ("epsilon", "delta"):
            val = _require(doc, key, "algorithm")
            if not 0.0 < float(val) < 1.0:
                raise SpecError(f"algorithm.{key} must lie in (0, 1), got {val!r}")
        for key in DEFAULT_CONSTANTS:
            if key in doc and not float(doc[key]) > 0:
                raise SpecError(f"algorithm.{key} must be positive")


def _check_seed(x):
    if isinstance(x, bool) or not isinstance(x, int) or not 0 <= x < 2**64:
        raise ValueError(f"seed must be an integer in [0, 2^64), got {x!r}")
    return x


@dataclass
class ExperimentSpec:
    """Validated experiment description; see the module docstring for the JSON form."""

    instance: dict
    algorithm: dict | None = None
    trials: int = 1
    base_seed: int = 0
    output: str | None = None
    success_epsilon: float | None = None
    sweep: dict | None = None
    name: str = "experiment"
    base_dir: str = field(default=".", repr=False, compare=False)

    def __post_init__(self):
        _validate_instance(self.instance)
        if self.algorithm is not None:
            _validate_algorithm(self.algorithm)
        try:
            self.trials = check_positive_int(self.trials, "trials")
            self.base_seed = _check_seed(self.base_seed)
        except ValueError as exc:
            raise SpecError(str(exc)) from None
        if self.success_epsilon is None:
            alg = self.algorithm or {}
            self.success_epsilon = float(alg.get("epsilon", 0.1))
        elif not float(self.success_epsilon) > 0:
            raise SpecError("success_epsilon must be positive")
        if self.sweep is not None:
            self._validate_sweep()

    def _validate_sweep(self):
        sw = self.sweep
        if not isinstance(sw, dict):
            raise SpecError("sweep must be an object")
        _reject_unknown(sw, {"axis", "values"}, "sweep")
        axis = _require(sw, "axis", "sweep")
        if axis not in AXES:
            raise SpecError(f"sweep.axis must be one of {AXES}, got {axis!r}")
        values = _require(sw, "values", "sweep")
        if not isinstance(values, list) or not values:
            raise SpecError("sweep.values must be a non-empty list")
        alg = (self.algorithm or {}).get("name")
        if axis == "N" and alg != "ppq":
            raise SpecError("sweep.axis 'N' requires algorithm 'ppq'")
        if axis == "epsilon" and alg != "oppq":
            raise SpecError("sweep.axis 'epsilon' requires algorithm 'oppq'")
        if axis == "gamma" and "path" in self.instance:
            raise SpecError("sweep.axis 'gamma' requires a generated instance")
        for k in range(len(values)):
            spec = self.point(k)
            _validate_instance(spec.instance)
            _validate_algorithm(spec.algorithm)

    @classmethod
    def from_dict(cls, doc, base_dir="."):
        if not isinstance(doc, dict):
            raise SpecError("spec must be a JSON object")
        _reject_unknown(doc, {"instance", "algorithm", "trials", "base_seed", "output", "success_epsilon", "sweep",
                              "name"}, "spec")
        return cls(
            instance=copy.deepcopy(_require(doc, "instance", "spec")),
            algorithm=copy.deepcopy(doc.get("algorithm")),
            trials=doc.get("trials", 1),
            base_seed=doc.get("base_seed", 0),
            output=doc.get("output"),
            success_epsilon=doc.get("success_epsilon"),
            sweep=copy.deepcopy(doc.get("sweep")),
            name=doc.get("name", "experiment"),
            base_dir=base_dir,
        )

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SpecError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc, base_dir=os.path.dirname(os.path.abspath(path)))

    def to_dict(self):
        out = {"name": self.name, "instance": self.instance, "algorithm": self.algorithm, "trials": self.trials,
               "base_seed": self.base_seed, "success_epsilon": self.success_epsilon, "output": self.output}
        if self.sweep is not None:
            out["sweep"] = self.sweep
        return copy.deepcopy(out)

    def point(self, k):
        """The single-point spec for sweep value ``k`` (no sweep section)."""
        value = self.sweep["values"][k]
        inst, alg = copy.deepcopy(self.instance), copy.deepcopy(self.algorithm)
        axis = self.sweep["axis"]
        if axis == "N":
            alg["total_samples"] = value
        elif axis == "epsilon":
            alg["epsilon"] = value
        elif axis == "gamma":
            inst["discount"] = value
        else:
            inst["xi"] = value
        return ExperimentSpec(inst, alg, self.trials, self.base_seed, self.output, self.success_epsilon, None,
                              self.name, self.base_dir)


# --- problems ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Problem:
    """A linear instance plus the (possibly misspecified) kernel the learner samples from."""

    lm: object
    mdp: object
    anchors: object
    metadata: dict
    xi: float = 0.0

    @property
    def features(self):
        return self.lm.features

    @property
    def rewards(self):
        return self.lm.rewards

    def instance_text(self):
        return dumps_instance(self.lm, self.metadata)

    def key(self):
        """Hash of the serialized instance and the misspecification, keying the oracle cache."""
        return instance_hash(self.instance_text() + f"xi={self.xi!r}\n")


def build_problem(instance, base_dir="."):
    """Materialize an instance section into a :class:`Problem`."""
    _validate_instance(instance)
    if "path" in instance:
        path = os.path.join(base_dir, instance["path"])
        with open(path) as fh:
            doc = json.load(fh)
        lm, meta = linear_mdp_from_dict(doc)
        anchors = find_anchors(lm.features)
    else:
        gen = instance["generator"]
        seed = instance["seed"]
        if gen == "random_linear":
            lm, anchors = make_random_linear_mdp(
                instance["n_states"], instance["n_actions"], instance["n_features"], instance["discount"], seed,
                anchored=instance.get("anchored", True), support_fraction=instance.get("support_fraction", 0.05),
            )
        elif gen == "soft_aggregation":
            lm, anchors = make_soft_aggregation_mdp(
                instance["n_states"], instance["n_actions"], instance["n_features"], instance["discount"], seed,
            )
        else:
            inner = make_random_tabular_mdp(instance["inner_states"], instance["inner_actions"],
                                            instance["discount"], seed)
            lm, anchors, _ = make_lower_bound_instance(inner)
        meta = {"seed": seed, "generator": gen, "name": instance.get("name")}
    xi = float(instance.get("xi", 0.0))
    mdp = lm.mdp
    if xi > 0:
        # the noise seed does not depend on xi, so a xi sweep perturbs along one direction
        mdp = perturb_kernel(lm, xi, instance.get("xi_seed", 7919))
    return Problem(lm, mdp, anchors, meta, xi)


def solve_problem(problem, cache_path=None, tol=DEFAULT_TOL):
    """Exact solution of the sampled kernel, read from / written to ``cache_path`` when given."""
    key = problem.key()
    if cache_path is not None and os.path.exists(cache_path):
        with open(cache_path) as fh:
            doc = json.load(fh)
        if doc.get("instance_sha256") == key and doc.get("tol") == tol:
            return ExactSolution.from_dict(doc)
    solution = solve_optimal(problem.mdp, tol)
    if cache_path is not None:
        _write_text(cache_path, dumps_solution(solution, key))
    return solution


# --- trials ------------------------------------------------------------------


def make_learner(algorithm, anchors):
    alg = dict(algorithm)
    name = alg.pop("name")
    if name == "ppq":
        return PPQLearner(representative=anchors, **alg)
    return OPPQLearner(anchors=anchors, **alg)


def _realized(learner):
    cfg = learner.config_
    out = dict.fromkeys(("R", "R_outer", "m", "m1", "per_round"), "")
    if isinstance(learner, PPQLearner):
        out.update(R=cfg.n_rounds, per_round=cfg.per_round)
    else:
        out.update(R=cfg.n_inner, R_outer=cfg.n_outer, m=cfg.m, m1=cfg.m1)
    return out


def _flags(problem, learner, solution):
    horizon = 1.0 / (1.0 - problem.mdp.discount)
    if isinstance(learner, PPQLearner):
        ws = learner.params_.w[None, :]
        clip_ok = all(0.0 <= t["target_min"] and t["target_max"] <= horizon for t in learner.trace_)
    else:
        ws = learner.params_.matrix
        clip_ok = all(0.0 <= t["w_bar_min"] and t["w_bar_max"] <= horizon for t in learner.trace_)
    report = monotonicity_audit(problem.mdp, problem.features, problem.rewards, ws, FLAG_TOL, solution)
    return {
        "monotone_ok": report.backup_gap <= FLAG_TOL,
        "underestimate_ok": report.optimality_gap <= FLAG_TOL,
        "clip_ok": bool(clip_ok),
    }


def run_trial(problem, algorithm, seed, solution, success_epsilon):
    """One seeded run; returns a record dict including ``wall_time_ms``. Exceptions propagate."""
    t0 = time.perf_counter()
    model = GenerativeModel(problem.mdp, seed)
    learner = make_learner(algorithm, problem.anchors)
    learner.fit(model, problem.features, problem.rewards)
    wall_ms = (time.perf_counter() - t0) * 1000.0
    err = policy_error(problem.mdp, learner.policy_, solution=solution)
    rec = {
        "seed": seed,
        "status": "ok",
        "samples_used": model.samples_used,
        "samples_expected": learner.config_.samples_required,
        "policy_error": err,
        "success": err <= success_epsilon,
        **_flags(problem, learner, solution),
        **_realized(learner),
        "error": "",
        "wall_time_ms": wall_ms,
    }
    return rec


def _failed(seed, exc):
    rec = dict.fromkeys(TRIAL_COLUMNS, "")
    rec.update(seed=seed, status="failed", success=False, error=f"{type(exc).__name__}: {exc}", wall_time_ms="")
    return rec


_WORKER = {}


def _init_worker(problem, solution):
    _WORKER["problem"] = problem
    _WORKER["solution"] = solution


def _safe_trial(args):
    algorithm, seed, success_epsilon = args
    try:
        return run_trial(_WORKER["problem"], algorithm, seed, _WORKER["solution"], success_epsilon)
    except Exception as exc:  # noqa: BLE001 - a failed trial is data, not a crash
        return _failed(seed, exc)


def default_workers():
    env = os.environ.get("LINQ_WORKERS")
    if env is None or env == "":
        return 1
    try:
        n = int(env)
    except ValueError:
        raise SpecError(f"LINQ_WORKERS must be a positive integer, got {env!r}") from None
    if n < 1:
        raise SpecError(f"LINQ_WORKERS must be a positive integer, got {env!r}")
    return n


def run_trials(problem, algorithm, seeds, solution, success_epsilon, workers=1):
    """Run one trial per seed; output order follows ``seeds`` whatever the completion order."""
    jobs = [(algorithm, int(s), success_epsilon) for s in seeds]
    if workers <= 1 or len(jobs) <= 1:
        _init_worker(problem, solution)
        return [_safe_trial(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(problem, solution)) as pool:
        return list(pool.map(_safe_trial, jobs))


# --- aggregation -------------------------------------------------------------


def summarize(records, success_epsilon):
    """Median / p90 over completed trials; ``success_rate`` counts failures in the denominator."""
    errs = np.array([r["policy_error"] for r in records if r["status"] == "ok"], dtype=np.float64)
    n = len(records)
    done = errs.size
    out = {
        "trials": n,
        "failed": n - done,
        "success_epsilon": success_epsilon,
        "success_rate": sum(bool(r["success"]) for r in records) / n if n else float("nan"),
        "median": float(np.median(errs)) if done else None,
        "p10": float(np.percentile(errs, 10)) if done else None,
        "p90": float(np.percentile(errs, 90)) if done else None,
        "max": float(errs.max()) if done else None,
        "total_samples": int(sum(r["samples_used"] for r in records if r["status"] == "ok")),
        "budget_audit_ok": all(r["samples_used"] == r["samples_expected"] for r in records if r["status"] == "ok"),
        "monotone_ok": int(sum(r["monotone_ok"] is True for r in records)),
        "underestimate_ok": int(sum(r["underestimate_ok"] is True for r in records)),
        "clip_ok": int(sum(r["clip_ok"] is True for r in records)),
    }
    return out


def loglog_slope(x, y):
    """Least-squares slope of ``log y`` on ``log x`` over the points with ``y > 0``.

    Returns ``(slope, n_used)``; the slope is None with fewer than two usable points.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray([np.nan if v is None else v for v in y], dtype=np.float64)
    ok = np.isfinite(y) & (y > 0)
    if ok.sum() < 2:
        return None, int(ok.sum())
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0]), int(ok.sum())


# --- output ------------------------------------------------------------------


def _fmt(x):
    if isinstance(x, bool) or isinstance(x, np.bool_):
        return "1" if x else "0"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _csv_text(columns, rows):
    buf = io.StringIO()
    buf.write(f"#schema={SCHEMA_VERSION}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c, "")) for c in columns])
    return buf.getvalue()


def _write_text(path, text):
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _json_text(doc):
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def read_csv(path):
    """Rows of a harness CSV as dicts of strings (the schema comment is checked and skipped)."""
    with open(path) as fh:
        head = fh.readline().strip()
        if head != f"#schema={SCHEMA_VERSION}":
            raise ValueError(f"{path}: unsupported CSV schema line {head!r}")
        return list(csv.DictReader(fh))


@dataclass
class RunResult:
    records: list
    summary: dict
    out_dir: str | None = None


def _prepare(out_dir):
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)


def generate(spec, out_dir):
    """Write ``instance.json`` and its cached exact solution ``solution.json``."""
    _prepare(out_dir)
    problem = build_problem(spec.instance, spec.base_dir)
    inst_path = os.path.join(out_dir, "instance.json")
    _write_text(inst_path, problem.instance_text())
    solution = solve_problem(problem, os.path.join(out_dir, "solution.json"))
    return inst_path, problem, solution


def _run_point(spec, workers, cache_path):
    problem = build_problem(spec.instance, spec.base_dir)
    solution = solve_problem(problem, cache_path)
    seeds = [spec.base_seed + t for t in range(spec.trials)]
    records = run_trials(problem, spec.algorithm, seeds, solution, spec.success_epsilon, workers)
    for t, rec in enumerate(records):
        rec["trial"] = t
    return problem, records


def _write_trials(out_dir, records):
    _write_text(os.path.join(out_dir, "trials.csv"), _csv_text(TRIAL_COLUMNS, records))
    timing = [{"point": r.get("point", 0), "trial": r["trial"], "wall_time_ms": r["wall_time_ms"]} for r in records]
    _write_text(os.path.join(out_dir, "timings.csv"), _csv_text(("point", "trial", "wall_time_ms"), timing))


def run(spec, out_dir=None, workers=1):
    """Run ``spec.trials`` seeded trials and write ``trials.csv``, ``timings.csv`` and ``summary.json``."""
    if spec.algorithm is None:
        raise SpecError("spec.algorithm is required for run")
    _prepare(out_dir)
    cache = os.path.join(out_dir, "solution.json") if out_dir else None
    problem, records = _run_point(spec, workers, cache)
    for rec in records:
        rec.update(point=0, axis_value="")
    summary = {"spec": spec.to_dict(), "instance_sha256": problem.key(), **summarize(records, spec.success_epsilon)}
    if records and records[0]["status"] == "ok":
        summary["realized"] = {k: records[0][k] for k in ("R", "R_outer", "m", "m1", "per_round") if records[0][k] != ""}
    if out_dir is not None:
        _write_trials(out_dir, records)
        _write_text(os.path.join(out_dir, "summary.json"), _json_text(summary))
    return RunResult(records, summary, out_dir)


def sweep(spec, out_dir=None, workers=1):
    """Run every sweep point; write per-trial rows, one aggregated row per point and a JSON summary."""
    if spec.sweep is None:
        raise SpecError("spec.sweep is required for sweep")
    if spec.algorithm is None:
        raise SpecError("spec.algorithm is required for sweep")
    _prepare(out_dir)
    axis, values = spec.sweep["axis"], spec.sweep["values"]
    all_records, points = [], []
    for k, value in enumerate(values):
        point = spec.point(k)
        cache = os.path.join(out_dir, f"solution_{k}.json") if out_dir else None
        problem, records = _run_point(point, workers, cache)
        for rec in records:
            rec.update(point=k, axis_value=value)
        all_records.extend(records)
        agg = summarize(records, spec.success_epsilon)
        points.append({"point": k, "axis_value": value, "instance_sha256": problem.key(), **agg})
    summary = {"spec": spec.to_dict(), "axis": axis, "points": points}
    if axis == "N":
        slope, used = loglog_slope(values, [p["median"] for p in points])
        summary["loglog_slope"] = slope
        summary["slope_points"] = used
    if axis == "gamma":
        horizons = [1.0 / (1.0 - g) for g in values]
        per_trial = [p["total_samples"] / max(1, p["trials"] - p["failed"]) for p in points]
        exp, _ = loglog_slope(horizons, per_trial)
        summary["samples_horizon_exponent"] = exp
    if out_dir is not None:
        _write_trials(out_dir, all_records)
        _write_text(os.path.join(out_dir, "sweep.csv"), _csv_text(SWEEP_COLUMNS, points))
        _write_text(os.path.join(out_dir, "summary.json"), _json_text(summary))
    return RunResult(all_records, summary, out_dir)


# --- audit -------------------------------------------------------------------


def audit_instance(path):
    """Re-validate an instance file and report its structural properties.

    Raises ``ValueError`` if the document does not describe a valid linear MDP.
    """
    with open(path) as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from None
    lm, meta = linear_mdp_from_dict(doc)

    report = {
        "path": path,
        "sha256": instance_hash(text),
        "n_states": lm.n_states,
        "n_actions": lm.n_actions,
        "n_features": lm.n_features,
        "discount": lm.discount,
        "metadata": meta,
        "stochastic_features": bool(lm.features.stochastic),
        "canonical": dumps_instance(lm, meta) == text,
    }
    try:
        anchors = find_anchors(lm.features)
        report["anchors"] = [int(i) for i in anchors.indices]
        report["L"] = anchors.L
    except AnchorsNotFound as exc:
        report["anchors"] = None
        report["hull_vertices"] = exc.vertices
    except ValueError as exc:
        report["anchors"] = None
        report["anchor_error"] = str(exc)
    return report
