"""Command-line entry point: ``linq {generate,solve-exact,run,sweep,audit}``.

Exit codes: 0 success, 2 validation error, 3 runtime failure.
"""

import argparse
import json
import os
import sys

from . import harness
from .mdp import linear_mdp_from_dict

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _u64(text):
    try:
        x = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= x < 2**64:
        raise argparse.ArgumentTypeError(f"seed must lie in [0, 2^64), got {x}")
    return x


def _positive(text):
    try:
        x = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if x < 1:
        raise argparse.ArgumentTypeError(f"must be positive, got {x}")
    return x


def build_parser():
    parser = _Parser(prog="linq", description="Parametric Q-learning experiments on linear-kernel MDPs.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "generate": "write an instance file and its cached exact solution",
        "solve-exact": "solve an instance exactly and write solution.json",
        "run": "run seeded trials of one algorithm and score them",
        "sweep": "run trials over the values of one axis",
        "audit": "re-validate an instance file",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--spec", required=True, help="experiment spec (audit: instance file)")
        p.add_argument("--out", help="output directory (defaults to the spec's output or the current directory)")
        if name in ("run", "sweep"):
            p.add_argument("--workers", type=_positive, default=None,
                           help="worker processes (default: $LINQ_WORKERS or 1)")
        if name in ("generate", "run", "sweep"):
            p.add_argument("--seed", type=_u64, default=None,
                           help="override the spec's instance seed (generate) or base_seed (run, sweep)")
    return parser


def _load_spec(args):
    spec = harness.ExperimentSpec.load(args.spec)
    seed = getattr(args, "seed", None)
    if seed is not None:
        if args.command == "generate":
            if "path" in spec.instance:
                raise harness.SpecError("--seed cannot override a file instance")
            spec.instance["seed"] = seed
        else:
            spec.base_seed = seed
    return spec


def _out_dir(args, spec=None):
    if args.out:
        return args.out
    if spec is not None and spec.output:
        return os.path.join(spec.base_dir, spec.output)
    return "."


def _workers(args):
    return args.workers if args.workers is not None else harness.default_workers()


def _print(doc):
    print(json.dumps(doc, indent=2, sort_keys=True))


def _cmd_generate(args):
    spec = _load_spec(args)
    out = _out_dir(args, spec)
    path, problem, solution = harness.generate(spec, out)
    _print({"instance": path, "solution": os.path.join(out, "solution.json"), "instance_sha256": problem.key(),
            "n_features": problem.lm.n_features, "value_iterations": solution.iterations})


def _cmd_solve_exact(args):
    with open(args.spec) as fh:
        doc = json.load(fh)
    if "n_states" in doc:
        lm, meta = linear_mdp_from_dict(doc)
        problem = harness.Problem(lm, lm.mdp, None, meta)
    else:
        spec = harness.ExperimentSpec.from_dict(doc, os.path.dirname(os.path.abspath(args.spec)))
        problem = harness.build_problem(spec.instance, spec.base_dir)
        if not args.out and spec.output:
            args.out = os.path.join(spec.base_dir, spec.output)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "solution.json")
    solution = harness.solve_problem(problem, path)
    _print({"solution": path, "instance_sha256": problem.key(), "value_iterations": solution.iterations,
            "v_star_min": float(solution.v_star.min()), "v_star_max": float(solution.v_star.max())})


def _cmd_run(args):
    spec = _load_spec(args)
    result = harness.run(spec, _out_dir(args, spec), _workers(args))
    s = result.summary
    _print({k: s[k] for k in ("trials", "failed", "median", "p90", "success_rate", "total_samples")})
    return EXIT_RUNTIME if s["failed"] == s["trials"] else EXIT_OK


def _cmd_sweep(args):
    spec = _load_spec(args)
    result = harness.sweep(spec, _out_dir(args, spec), _workers(args))
    s = result.summary
    _print({"axis": s["axis"], "points": [{k: p[k] for k in ("axis_value", "median", "p90", "success_rate",
                                                                "total_samples", "failed")} for p in s["points"]],
            **{k: s[k] for k in ("loglog_slope", "samples_horizon_exponent") if k in s}})
    return EXIT_OK


def _cmd_audit(args):
    report = harness.audit_instance(args.spec)
    _print(report)


_COMMANDS = {
    "generate": _cmd_generate,
    "solve-exact": _cmd_solve_exact,
    "run": _cmd_run,
    "sweep": _cmd_sweep,
    "audit": _cmd_audit,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        code = _COMMANDS[args.command](args)
    except (ValueError, KeyError, TypeError, json.JSONDecodeError, FileNotFoundError) as exc:
        print(f"linq {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        print(f"linq {args.command}: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
