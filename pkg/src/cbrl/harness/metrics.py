"""Per-run metric files: headered CSV with a fixed column order."""
from __future__ import annotations

import csv
import io
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

ESTIMATOR_VARIANT = {
    "hpgd": "trajectory",
    "hpgd-softq": "softq-vanilla",
    "hpgd-rtq": "rtq",
    "amd": "model",
    "zero-order": "zero-order",
}


@dataclass(frozen=True)
class MetricsRow:
    run_id: str
    algorithm: str
    env: str
    lam: Optional[float]
    beta: Optional[float]
    seed: int
    iteration: int
    upper_return: float
    exact_grad_norm_sq: Optional[float]
    inner_iterations: int
    estimator_variant: str
    wall_time_ms: float


COLUMNS = tuple(f.name if f.name != "lam" else "lambda" for f in fields(MetricsRow))
_INT = {"seed", "iteration", "inner_iterations"}
_FLOAT = {"lambda", "beta", "upper_return", "exact_grad_norm_sq", "wall_time_ms"}


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow([_cell(v) for v in astuple(r)])
    return buf.getvalue()


def write_rows(path, rows) -> None:
    Path(path).write_text(rows_to_csv(rows), encoding="utf-8")


def read_rows(path) -> list:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        for rec in reader:
            vals = []
            for name, v in zip(COLUMNS, rec):
                if v == "":
                    vals.append(None)
                elif name in _INT:
                    vals.append(int(v))
                elif name in _FLOAT:
                    vals.append(float(v))
                else:
                    vals.append(v)
            out.append(MetricsRow(*vals))
    return out


def record_rows(record, run_id: str, env: str, lam, beta) -> list:
    """One row per evaluation event of a ``RunRecord``."""
    inner = np.concatenate([[0], np.cumsum(record.inner_iterations)])
    wall = np.concatenate([[0.0], np.cumsum(record.wall_times)]) * 1e3
    rows = []
    for e in record.evals:
        t = min(e.iteration, len(inner) - 1)
        rows.append(MetricsRow(run_id, record.algorithm, env, lam, beta, record.seed, e.iteration,
                               float(e.upper_return), e.grad_norm_sq, int(inner[t]),
                               ESTIMATOR_VARIANT[record.algorithm], round(float(wall[t]), 3)))
    return rows


def iterates_csv(record) -> str:
    """Iterates at the evaluation points (``iteration, z0, z1, ...``)."""
    d = len(record.iterates[0])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration"] + [f"z{i}" for i in range(d)])
    for e in record.evals:
        if e.iteration < len(record.iterates):
            w.writerow([e.iteration] + [repr(float(v)) for v in record.iterates[e.iteration]])
    return buf.getvalue()


def read_iterates(path) -> tuple:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0].astype(int), data[:, 1:]


def strip_wall_time(text: str) -> str:
    """CSV text without the wall-time column, for determinism comparisons."""
    lines = text.splitlines()
    return "\n".join(",".join(ln.split(",")[:-1]) for ln in lines)
