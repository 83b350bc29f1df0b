"""Aggregation of per-run metrics into (lambda, beta) x algorithm tables."""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from cbrl.harness.metrics import read_rows
from cbrl.harness.runner import MANIFEST


@dataclass(frozen=True)
class Cell:
    env: str
    lam: Optional[float]
    beta: Optional[float]
    algorithm: str
    mean: float
    se: float
    n: int

    @property
    def single(self) -> bool:
        return self.n == 1


def metric_files(path) -> list:
    p = Path(path)
    return sorted(f for f in p.rglob("*.csv") if not f.name.endswith(".iterates.csv"))


def load_runs(path) -> dict:
    """``run_id -> rows`` for every metrics file below ``path``."""
    runs = {}
    for f in metric_files(path):
        rows = read_rows(f)
        if rows:
            runs[rows[0].run_id] = rows
    return runs


def load_manifest(path) -> dict:
    out = {"configs": {}, "runs": {}}
    for m in sorted(Path(path).rglob(MANIFEST)):
        data = json.loads(m.read_text())
        out["configs"].update(data.get("configs", {}))
        out["runs"].update(data.get("runs", {}))
    return out


def mean_se(values) -> tuple:
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        raise ValueError("no values")
    if len(v) == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v)))


def aggregate(runs: dict) -> list:
    """Mean and standard error of the final upper return per cell."""
    groups = defaultdict(list)
    for rows in runs.values():
        last = max(rows, key=lambda r: r.iteration)
        groups[(last.env, last.lam, last.beta, last.algorithm)].append(last.upper_return)
    cells = []
    for (env, lam, beta, alg), vals in sorted(groups.items(), key=lambda kv: tuple(map(str, kv[0]))):
        m, se = mean_se(vals)
        cells.append(Cell(env, lam, beta, alg, m, se, len(vals)))
    return cells


def format_table(cells, algorithms=None, requested=None) -> tuple:
    """Text grid and the list of requested-but-missing cells.

    ``requested`` optionally lists ``(lam, beta)`` pairs that must appear.
    """
    algs = list(algorithms or sorted({c.algorithm for c in cells}))
    index = {(c.lam, c.beta, c.algorithm): c for c in cells}
    keys = sorted({(c.lam, c.beta) for c in cells} | set(requested or ()),
                  key=lambda k: (k[0] is None, k[0] or 0, k[1] is None, k[1] or 0))
    header = ["lambda", "beta"] + algs
    lines = [" | ".join(header)]
    missing = []
    for lam, beta in keys:
        row = [_fmt(lam), _fmt(beta)]
        for a in algs:
            c = index.get((lam, beta, a))
            if c is None:
                row.append("missing")
                missing.append((lam, beta, a))
            else:
                flag = " (n=1)" if c.single else f" (n={c.n})"
                row.append(f"{c.mean:.4f} ± {c.se:.4f}{flag}")
        lines.append(" | ".join(row))
    return "\n".join(lines), missing


def _fmt(v) -> str:
    return "-" if v is None else f"{v:g}"
