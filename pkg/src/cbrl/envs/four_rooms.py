"""Four-Rooms reward shaping: the leader buys penalties to reroute followers.

The grid is read from an ASCII map (``four_rooms.txt`` next to this module):
``#`` wall, ``.`` free, ``S`` start, ``1``/``2`` goals of the two contexts,
``+`` the cell the leader wants visited. Free cells are numbered row-major.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np

from cbrl.cmdp import Context, TabularCmdp
from cbrl.problem import BilevelProblem, DecomposableUpperLoss

LAYOUT_FILE = Path(__file__).with_name("four_rooms.txt")
MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))  # up, down, left, right


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


@dataclass(frozen=True, eq=False)
class FourRoomsSpec:
    layout: str
    slip: float = 1.0 / 3.0
    gamma: float = 0.99
    budget: float = 0.2
    beta: float = 1.0
    lam: float = 0.001

    def __post_init__(self):
        if not 0 <= self.slip <= 1 or self.budget < 0 or self.beta < 0 or self.lam <= 0:
            raise ValueError("invalid four-rooms parameters")
        rows = self.rows
        if len({len(r) for r in rows}) != 1:
            raise ValueError("layout rows must have equal length")
        for ch in "S12+":
            if sum(r.count(ch) for r in rows) != 1:
                raise ValueError(f"layout needs exactly one {ch!r}")

    @classmethod
    def load(cls, path: Optional[Path] = None, **kw) -> "FourRoomsSpec":
        text = Path(path or LAYOUT_FILE).read_text()
        rows = [ln for ln in text.splitlines() if ln and not ln.startswith(";")]
        return cls("\n".join(rows), **kw)

    @cached_property
    def rows(self) -> list:
        return self.layout.splitlines()

    @cached_property
    def cells(self) -> list:
        return [(r, c) for r, row in enumerate(self.rows) for c, ch in enumerate(row) if ch != "#"]

    @cached_property
    def index(self) -> dict:
        return {p: i for i, p in enumerate(self.cells)}

    def _find(self, ch: str) -> int:
        for r, row in enumerate(self.rows):
            if ch in row:
                return self.index[(r, row.index(ch))]
        raise KeyError(ch)

    @property
    def n_states(self) -> int:
        return len(self.cells)

    @property
    def dim(self) -> int:
        return self.n_states + 1

    @cached_property
    def start(self) -> int:
        return self._find("S")

    @cached_property
    def goals(self) -> tuple:
        return (self._find("1"), self._find("2"))

    @cached_property
    def bonus(self) -> int:
        return self._find("+")

    @property
    def contexts(self) -> list:
        return [Context(0, 0.5, payload=self.goals[0]), Context(1, 0.5, payload=self.goals[1])]

    def _step(self, s: int, move: tuple) -> int:
        r, c = self.cells[s]
        nxt = (r + move[0], c + move[1])
        return self.index.get(nxt, s)

    @cached_property
    def base_transition(self) -> np.ndarray:
        """Slippery moves without goal resets, shape ``(S, 4, S)``."""
        S = self.n_states
        P = np.zeros((S, 4, S))
        for s in range(S):
            for a, mv in enumerate(MOVES):
                P[s, a, self._step(s, mv)] += 1 - self.slip
                for mv2 in MOVES:
                    P[s, a, self._step(s, mv2)] += self.slip / 4
        return P

    def transition(self, goal: int) -> np.ndarray:
        P = self.base_transition.copy()
        P[goal] = 0.0
        P[goal, :, self.start] = 1.0
        return P

    def penalties(self, x: np.ndarray) -> np.ndarray:
        """Per-state additive penalty ``-B softmax(x)_s`` (sink coordinate dropped)."""
        return -self.budget * _softmax(np.asarray(x, dtype=float))[: self.n_states]

    def shortest_path_lengths(self, src: int, blocked=()) -> dict:
        dist = {src: 0}
        q = deque([src])
        while q:
            u = q.popleft()
            for mv in MOVES:
                v = self._step(u, mv)
                if v not in dist and v not in blocked:
                    dist[v] = dist[u] + 1
                    q.append(v)
        return dist

    def on_every_shortest_path(self, src: int, dst: int, cell: int) -> bool:
        d = self.shortest_path_lengths(src)
        d_without = self.shortest_path_lengths(src, blocked={cell})
        return dst not in d_without or d_without[dst] > d[dst]


def default_spec(**kw) -> FourRoomsSpec:
    return FourRoomsSpec.load(**kw)


def four_rooms_cmdp(spec: FourRoomsSpec, x: np.ndarray, ctx: Context) -> TabularCmdp:
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.dim,):
        raise ValueError(f"x must have shape ({spec.dim},)")
    S = spec.n_states
    goal = spec.goals[ctx.index]
    sig = _softmax(x)
    reward = np.repeat((-spec.budget * sig[:S])[:, None], 4, axis=1)
    reward[goal] += 1.0
    # d softmax_s / d x_j = sig_s (delta_sj - sig_j)
    jac = -spec.budget * (np.eye(S, spec.dim) * sig[:S, None] - np.outer(sig[:S], sig))
    d_reward = np.repeat(jac[:, None, :], 4, axis=1)
    mu = np.zeros(S)
    mu[spec.start] = 1.0
    return TabularCmdp(reward, spec.transition(goal), mu, spec.gamma, spec.lam, d_reward)


def four_rooms_upper(spec: FourRoomsSpec, beta: Optional[float] = None) -> DecomposableUpperLoss:
    """Leader reward: +1 at the bonus cell, minus ``beta`` times the deployed
    penalty mass each time the follower reaches its goal."""
    beta = spec.beta if beta is None else beta
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    S, K = spec.n_states, spec.dim - 1

    def tables(x, ctx):
        sig = _softmax(np.asarray(x, dtype=float))
        goal = spec.goals[ctx.index]
        rbar = np.zeros((S, 4))
        rbar[spec.bonus] = 1.0
        deployed = spec.budget * (1 - sig[K])  # = -sum_s penalty(s)
        rbar[goal] -= beta * deployed
        drbar = np.zeros((S, 4, spec.dim))
        # d(1 - sig_K)/dx_j = -sig_K (delta_Kj - sig_j)
        d_deployed = -spec.budget * sig[K] * ((np.arange(spec.dim) == K) - sig)
        drbar[goal] = -beta * d_deployed
        return rbar, drbar

    return DecomposableUpperLoss(tables)


def four_rooms_problem(spec: Optional[FourRoomsSpec] = None, x0=None) -> BilevelProblem:
    spec = spec or default_spec()
    x0 = np.zeros(spec.dim) if x0 is None else np.asarray(x0, dtype=float)
    return BilevelProblem(lambda x, ctx: four_rooms_cmdp(spec, x, ctx), spec.contexts,
                          four_rooms_upper(spec), x0, None, name="four-rooms", meta=spec)
