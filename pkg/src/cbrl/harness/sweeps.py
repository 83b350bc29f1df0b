"""Learning-rate grid selection followed by multi-seed runs."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from cbrl.harness.table import mean_se
from cbrl.optim import OuterConfig, run
from cbrl.problem import BilevelProblem

STEP_GRID = (1.0, 0.5, 0.1, 0.05, 0.01)
ZO_C_GRID = (0.1, 0.5, 1.0, 2.0, 5.0)


@dataclass
class SweepResult:
    algorithm: str
    step: float
    zo_c: float
    finals: list = field(default_factory=list)
    records: list = field(default_factory=list)
    tuning: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return mean_se(self.finals)[0]

    @property
    def se(self) -> float:
        return mean_se(self.finals)[1]


def _final(problem, cfg) -> tuple:
    rec = run(problem, cfg)
    if not rec.complete:
        raise RuntimeError(f"{cfg.algorithm} run failed: {rec.error}")
    return rec.evals[-1].upper_return, rec


def select_step(problem: BilevelProblem, base: OuterConfig, tune_seeds=(0,), steps=STEP_GRID,
                zo_cs=ZO_C_GRID) -> tuple:
    """Best step (and zero-order constant) by mean final upper return on ``tune_seeds``.

    The zero-order constant is tuned after the step, at the selected step.
    """
    scores = {}

    def score(step, c):
        if (step, c) not in scores:
            vals = [_final(problem, dataclasses.replace(base, step=step, zo_c=c, seed=s))[0]
                    for s in tune_seeds]
            scores[(step, c)] = float(np.mean(vals))
        return scores[(step, c)]

    best_step = max(steps, key=lambda a: score(a, base.zo_c))
    best_c = base.zo_c
    if base.algorithm == "zero-order":
        best_c = max(zo_cs, key=lambda c: score(best_step, c))
    return best_step, best_c, scores


def sweep(problem: BilevelProblem, base: OuterConfig, seeds, tune_seeds=(0,), steps=STEP_GRID,
          zo_cs=ZO_C_GRID, step=None, zo_c=None) -> SweepResult:
    """Tune (unless ``step`` is given) and run all ``seeds`` at the chosen setting."""
    tuning = {}
    if step is None:
        step, c, tuning = select_step(problem, base, tune_seeds, steps, zo_cs)
        zo_c = c if zo_c is None else zo_c
    zo_c = base.zo_c if zo_c is None else zo_c
    out = SweepResult(base.algorithm, step, zo_c, tuning=tuning)
    for s in seeds:
        f, rec = _final(problem, dataclasses.replace(base, step=step, zo_c=zo_c, seed=s))
        out.finals.append(f)
        out.records.append(rec)
    return out
