"""``cbrl`` command line: run, table, check, plotdata, eval-exact.

Exit codes: 0 success, 1 usage or config error, 2 failed invariant,
3 runtime failure of at least one run.
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from cbrl.harness import checks, plotdata, table
from cbrl.harness.config import ConfigError, apply_overrides, load, parse_seeds
from cbrl.harness.runner import run_experiment

EXIT_OK, EXIT_USAGE, EXIT_INVARIANT, EXIT_RUNTIME = 0, 1, 2, 3

_SAMPLE_SUITES = {"unbiasedness", "decomposable", "rtq-mean", "rtq-variance"}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cbrl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add_config(sp):
        sp.add_argument("--config", required=True, help="experiment config file")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")

    r = sub.add_parser("run", help="execute all (algorithm x seed) runs of a config")
    add_config(r)
    r.add_argument("--algo", action="append", help="restrict to these algorithms")
    g = r.add_mutually_exclusive_group()
    g.add_argument("--seed", type=int)
    g.add_argument("--seeds", help="seed list, e.g. 0..9 or 1,3,5")
    r.add_argument("--out", help="output directory (default from config)")
    r.add_argument("--parallel", type=int, help="worker processes (capped by CBRL_THREADS)")

    t = sub.add_parser("table", help="aggregate final upper returns (mean ± SE)")
    t.add_argument("metrics_dir")
    t.add_argument("--algo", action="append", help="column order / subset")

    c = sub.add_parser("check", help="run a property suite")
    c.add_argument("suite", choices=checks.SUITES)
    c.add_argument("--samples", type=int)
    c.add_argument("--draws", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--json", action="store_true", help="one JSON object per invariant")

    pd = sub.add_parser("plotdata", help="emit columnar plot data")
    pd.add_argument("metrics_dir")
    pd.add_argument("figure", help="one of " + ", ".join(plotdata.FIGURES))
    pd.add_argument("--out", help="output directory (default: metrics_dir)")

    e = sub.add_parser("eval-exact", help="exact upper return and hypergradient at a point")
    add_config(e)
    e.add_argument("--x", help="comma-separated point (default: the config's x0)")
    return p


def _cmd_run(args) -> int:
    cfg = load(args.config, args.override)
    ov = []
    if args.algo:
        ov.append("algorithms=" + ",".join(args.algo))
    if args.seed is not None:
        ov.append(f"seeds={args.seed}")
    elif args.seeds:
        parse_seeds(args.seeds)
        ov.append(f"seeds={args.seeds}")
    if ov:
        cfg = apply_overrides(cfg, ov)
    outcomes = run_experiment(cfg, args.out, args.parallel)
    for o in outcomes:
        tail = f" final={o.final_upper_return:.6g}" if o.final_upper_return is not None else ""
        err = f" error={o.error}" if o.error else ""
        print(f"{o.run_id}: {o.status}{tail}{err}")
    return EXIT_OK if all(o.status == "ok" for o in outcomes) else EXIT_RUNTIME


def _cmd_table(args) -> int:
    runs = table.load_runs(args.metrics_dir)
    if not runs:
        print(f"no metrics files under {args.metrics_dir}", file=sys.stderr)
        return EXIT_USAGE
    cells = table.aggregate(runs)
    envs = sorted({c.env for c in cells})
    for env in envs:
        text, missing = table.format_table([c for c in cells if c.env == env], args.algo)
        print(f"# {env}")
        print(text)
        for lam, beta, alg in missing:
            print(f"missing: lambda={lam} beta={beta} algorithm={alg}")
    return EXIT_OK


def _cmd_check(args) -> int:
    kw = {}
    if args.samples is not None:
        if args.suite not in _SAMPLE_SUITES:
            raise ValueError(f"--samples does not apply to {args.suite}")
        kw["samples"] = args.samples
    if args.draws is not None:
        if args.suite != "rtq-cost":
            raise ValueError("--draws applies to rtq-cost only")
        kw["draws"] = args.draws
    if args.seed is not None:
        kw["seed"] = args.seed
    results = checks.run_suite(args.suite, **kw)
    for r in results:
        print(json.dumps(r.as_dict()) if args.json else r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_INVARIANT


def _cmd_plotdata(args) -> int:
    if args.figure not in plotdata.FIGURES:
        print(f"unknown figure {args.figure!r}; expected one of {plotdata.FIGURES}", file=sys.stderr)
        return EXIT_USAGE
    for path in plotdata.emit(args.metrics_dir, args.figure, args.out):
        print(path)
    return EXIT_OK


def _cmd_eval_exact(args) -> int:
    from cbrl.hypergrad import exact_hypergradient
    from cbrl.optim import evaluate_upper_return

    cfg = load(args.config, args.override)
    problem = cfg.problem()
    x = problem.x0 if args.x is None else np.array([float(v) for v in args.x.split(",")])
    if x.shape != (problem.dim,):
        raise ValueError(f"--x needs {problem.dim} values")
    g = exact_hypergradient(x, problem)
    print(json.dumps({"upper_return": evaluate_upper_return(x, problem),
                      "hypergradient": g.tolist(), "grad_norm_sq": float(g @ g)}))
    return EXIT_OK


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    cmd = {"run": _cmd_run, "table": _cmd_table, "check": _cmd_check, "plotdata": _cmd_plotdata,
           "eval-exact": _cmd_eval_exact}[args.command]
    try:
        return cmd(args)
    except (ConfigError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # unexpected failure inside a command
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
