"""Seeded multi-run execution with per-run metric files and a manifest."""
from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import cbrl
from cbrl.harness import config as config_mod
from cbrl.harness.metrics import iterates_csv, record_rows, write_rows
from cbrl.optim import run

MANIFEST = "manifest.json"


@dataclass
class RunOutcome:
    run_id: str
    algorithm: str
    seed: int
    status: str
    error: Optional[str] = None
    final_upper_return: Optional[float] = None


def worker_count(requested: int) -> int:
    cap = os.environ.get("CBRL_THREADS")
    n = max(1, int(requested))
    if cap:
        n = min(n, max(1, int(cap)))
    return n


def run_id(cfg: config_mod.ExperimentConfig, algorithm: str, seed: int) -> str:
    return f"{cfg.env}-{algorithm}-s{seed}-{cfg.hash()[:8]}"


def _one(text: str, algorithm: str, seed: int, out: str) -> RunOutcome:
    cfg = config_mod.loads(text)
    rid = run_id(cfg, algorithm, seed)
    try:
        problem = cfg.problem()
        record = run(problem, cfg.outer_config(seed, algorithm))
    except Exception as exc:  # reported per run, other runs continue
        return RunOutcome(rid, algorithm, seed, "failed", f"{type(exc).__name__}: {exc}")
    rows = record_rows(record, rid, cfg.env, cfg.values["env"]["lambda"], cfg.values["env"]["beta"])
    write_rows(Path(out) / f"{rid}.csv", rows)
    (Path(out) / f"{rid}.iterates.csv").write_text(iterates_csv(record), encoding="utf-8")
    status = "ok" if record.complete else "failed"
    final = rows[-1].upper_return if rows else None
    return RunOutcome(rid, algorithm, seed, status, record.error, final)


def run_experiment(cfg: config_mod.ExperimentConfig, out: Optional[str] = None,
                   parallel: Optional[int] = None) -> list:
    """Execute every (algorithm, seed) pair; returns one outcome per run."""
    out_dir = Path(out or cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    text = cfg.dumps()
    (out_dir / f"config-{cfg.hash()[:8]}.cfg").write_text(text, encoding="utf-8")
    jobs = [(text, a, s, str(out_dir)) for a in cfg.algorithms for s in cfg.seeds]
    n = worker_count(parallel or cfg.parallel)
    if n == 1 or len(jobs) == 1:
        outcomes = [_one(*j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n) as pool:
            outcomes = list(pool.map(_one, *zip(*jobs)))
    _update_manifest(out_dir, cfg, outcomes)
    return outcomes


def _update_manifest(out_dir: Path, cfg, outcomes) -> None:
    path = out_dir / MANIFEST
    data = json.loads(path.read_text()) if path.exists() else {"version": cbrl.__version__, "configs": {}, "runs": {}}
    data["version"] = cbrl.__version__
    data["configs"][cfg.hash()] = cfg.dumps()
    for o in outcomes:
        entry = asdict(o)
        entry["config_hash"] = cfg.hash()
        data["runs"][o.run_id] = entry
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
