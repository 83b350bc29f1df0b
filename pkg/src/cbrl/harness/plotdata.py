"""Columnar plot data: convergence bands, Four-Rooms penalty maps, tax-rate paths."""
from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import numpy as np

from cbrl.harness import config as config_mod
from cbrl.harness.metrics import read_iterates
from cbrl.harness.table import load_manifest, load_runs, mean_se

FIGURES = ("convergence", "heatmap", "tax-rates")


def _write(path: Path, header, rows) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return path


def convergence(metrics_dir, out_dir) -> list:
    """One row per (group, evaluation point): mean and SE band of the upper return."""
    runs = load_runs(metrics_dir)
    groups = defaultdict(lambda: defaultdict(list))
    for rows in runs.values():
        for r in rows:
            groups[(r.env, r.lam, r.beta, r.algorithm)][r.iteration].append(r.upper_return)
    out = []
    for (env, lam, beta, alg), by_it in sorted(groups.items(), key=lambda kv: tuple(map(str, kv[0]))):
        for it in sorted(by_it):
            m, se = mean_se(by_it[it])
            out.append((env, "" if lam is None else lam, "" if beta is None else beta, alg, it, m,
                        se, m - se, m + se, len(by_it[it])))
    header = ["env", "lambda", "beta", "algorithm", "iteration", "mean", "se", "lower", "upper", "n"]
    return [_write(Path(out_dir) / "convergence.csv", header, out)]


def _final_iterates(metrics_dir, env: str):
    """``(algorithm, problem, final iterate)`` per run of ``env``."""
    manifest = load_manifest(metrics_dir)
    problems = {}
    for f in sorted(Path(metrics_dir).rglob("*.iterates.csv")):
        rid = f.name[: -len(".iterates.csv")]
        info = manifest["runs"].get(rid)
        if info is None or info.get("status") != "ok":
            continue
        h = info["config_hash"]
        if h not in problems:
            cfg = config_mod.loads(manifest["configs"][h])
            problems[h] = cfg.problem() if cfg.env == env else None
        if problems[h] is None:
            continue
        its, Z = read_iterates(f)
        yield info["algorithm"], problems[h], its, Z


def heatmap(metrics_dir, out_dir) -> list:
    """Seed-averaged per-cell penalty at the final iterate, one grid per algorithm."""
    acc = defaultdict(list)
    specs = {}
    for alg, prob, _, Z in _final_iterates(metrics_dir, "four-rooms"):
        acc[alg].append(prob.meta.penalties(Z[-1]))
        specs[alg] = prob.meta
    paths = []
    for alg, pens in sorted(acc.items()):
        spec = specs[alg]
        pen = np.mean(pens, axis=0)
        rows = []
        for (r, c), v in zip(spec.cells, pen):
            rows.append((r, c, v))
        paths.append(_write(Path(out_dir) / f"heatmap_{alg}.csv", ["row", "col", "penalty"], rows))
    if not paths:
        raise ValueError("no completed four-rooms runs found")
    return paths


def tax_rates(metrics_dir, out_dir) -> list:
    """Seed-averaged ``x, y_1..y_M`` per evaluation point and algorithm."""
    acc = defaultdict(lambda: defaultdict(list))
    dim = None
    for alg, prob, its, Z in _final_iterates(metrics_dir, "tax"):
        dim = Z.shape[1]
        for it, z in zip(its, Z):
            acc[alg][int(it)].append(z)
    if dim is None:
        raise ValueError("no completed tax runs found")
    header = ["algorithm", "iteration", "x"] + [f"y{i}" for i in range(1, dim)]
    rows = []
    for alg in sorted(acc):
        for it in sorted(acc[alg]):
            rows.append((alg, it, *np.mean(acc[alg][it], axis=0)))
    return [_write(Path(out_dir) / "tax_rates.csv", header, rows)]


def emit(metrics_dir, figure: str, out_dir=None) -> list:
    if figure not in FIGURES:
        raise ValueError(f"unknown figure {figure!r}; expected one of {FIGURES}")
    out = Path(out_dir or metrics_dir)
    out.mkdir(parents=True, exist_ok=True)
    return {"convergence": convergence, "heatmap": heatmap, "tax-rates": tax_rates}[figure](metrics_dir, out)
