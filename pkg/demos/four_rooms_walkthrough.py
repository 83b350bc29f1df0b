"""Reward shaping in Four-Rooms: where the leader's penalty budget goes.

Run with ``python demos/four_rooms_walkthrough.py``. Takes a few minutes.
"""
from __future__ import annotations

import numpy as np

from cbrl.envs.four_rooms import default_spec, four_rooms_problem
from cbrl.optim import OuterConfig, evaluate_upper_return, run

spec = default_spec(lam=0.001, beta=1.0)
prob = four_rooms_problem(spec)
cell = {i: c for c, i in spec.index.items()}
print(f"{spec.n_states} cells, start {cell[spec.start]}, goals {[cell[g] for g in spec.goals]}, "
      f"bonus cell {cell[spec.bonus]}")
print("upper return with no shaping:", round(evaluate_upper_return(prob.x0, prob), 4))


def show(pen):
    grid = [[" ##" for _ in row] for row in spec.rows]
    for cell, i in spec.index.items():
        grid[cell[0]][cell[1]] = f"{-pen[i] / spec.budget * 100:3.0f}"
    print("\n".join("".join(r) for r in grid))


# AMD uses the full model. At this temperature the cheapest improvement is to stop paying
# for penalties at all, so it moves almost the whole budget onto the sink coordinate.
rec = run(prob, OuterConfig("amd", iterations=300, step=1.0, eval_every=100))
print("AMD upper return:", [round(e.upper_return, 4) for e in rec.evals])
pen = spec.penalties(rec.x_final)
print(f"deployed on real cells: {-pen.sum() / spec.budget:.2%}; penalty share per cell (%):")
show(pen)

# HPGD works from sampled trajectories only; its estimate is far noisier here.
rec = run(prob, OuterConfig("hpgd", iterations=100, step=0.1, env_steps=10000, eval_every=50))
print("HPGD upper return:", [round(e.upper_return, 4) for e in rec.evals])
