"""Bilevel problem containers and leader-side losses."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Optional, Sequence, Union

import numpy as np

from cbrl.cmdp import Context, TabularCmdp, check_contexts, discounted_occupancy, evaluate_linear


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.lo) > np.asarray(self.hi)):
            raise ValueError("box requires lo <= hi")

    def project(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.lo, self.hi)

    def contains(self, x: np.ndarray, tol: float = 0.0) -> bool:
        return bool(np.all(x >= np.asarray(self.lo) - tol) and np.all(x <= np.asarray(self.hi) + tol))


@dataclass(frozen=True)
class UpperLoss:
    """Leader loss ``f(x, pi, xi)`` with its two partial derivatives.

    ``grad_pi`` returns an ``(S, A)`` table treating every policy entry as an
    independent coordinate.
    """

    value: Callable[[np.ndarray, np.ndarray, Context], float]
    grad_x: Callable[[np.ndarray, np.ndarray, Context], np.ndarray]
    grad_pi: Callable[[np.ndarray, np.ndarray, Context], np.ndarray]


@dataclass(frozen=True)
class DecomposableUpperLoss:
    """Loss ``f = -E[sum_t gamma^t rbar(s_t, a_t)]`` along follower trajectories.

    ``tables(x, ctx)`` returns ``(rbar, d_rbar)`` with shapes ``(S, A)`` and
    ``(S, A, d)``.
    """

    tables: Callable[[np.ndarray, Context], tuple]

    def leader_reward(self, x, ctx) -> np.ndarray:
        return self.tables(x, ctx)[0]

    def d_leader_reward(self, x, ctx) -> np.ndarray:
        return self.tables(x, ctx)[1]


Loss = Union[UpperLoss, DecomposableUpperLoss]


@dataclass(frozen=True)
class BilevelProblem:
    """Everything the outer loop needs: follower MDPs, contexts, leader loss."""

    make_cmdp: Callable[[np.ndarray, Context], TabularCmdp]
    contexts: Sequence[Context]
    loss: Loss
    x0: np.ndarray
    bounds: Optional[Box] = None
    name: str = "problem"
    meta: Any = None

    def __post_init__(self):
        check_contexts(self.contexts)
        if np.asarray(self.x0).ndim != 1:
            raise ValueError("x0 must be a vector")
        if self.bounds is not None and not self.bounds.contains(np.asarray(self.x0)):
            raise ValueError("x0 outside the box")

    @property
    def dim(self) -> int:
        return int(np.asarray(self.x0).shape[0])

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.contexts])

    @property
    def decomposable(self) -> bool:
        return isinstance(self.loss, DecomposableUpperLoss)

    def sample_context(self, rng: np.random.Generator) -> Context:
        return self.contexts[int(rng.choice(len(self.contexts), p=self.weights))]


def induced_loss(loss: DecomposableUpperLoss, make_cmdp) -> UpperLoss:
    """Exact ``UpperLoss`` view of a decomposable loss (needs the model).

    With ``Vbar, Qbar`` the unregularized leader values of ``pi`` and ``d`` its
    discounted occupancy from ``mu``: ``f = -mu @ Vbar``,
    ``df/dpi(s, a) = -d(s) Qbar(s, a)``, and ``df/dx`` collects the reward,
    transition-score and initial-score terms at fixed ``pi``.
    """

    def parts(x, pi, ctx):
        cmdp = make_cmdp(x, ctx)
        rbar, drbar = loss.tables(x, ctx)
        V, Q = evaluate_linear(cmdp, pi, rbar)
        return cmdp, rbar, drbar, V, Q

    def value(x, pi, ctx):
        cmdp, _, _, V, _ = parts(x, pi, ctx)
        return -float(cmdp.init_dist @ V)

    def grad_pi(x, pi, ctx):
        cmdp, _, _, _, Q = parts(x, pi, ctx)
        d = discounted_occupancy(cmdp, pi)
        return -d[:, None] * Q

    def grad_x(x, pi, ctx):
        cmdp, _, drbar, V, _ = parts(x, pi, ctx)
        d = discounted_occupancy(cmdp, pi)
        per_sa = drbar.copy()
        if cmdp.has_transition_grad:
            per_sa += cmdp.gamma * np.einsum("sat,satd,t->sad", cmdp.transition,
                                             cmdp.d_log_transition, V)
        g = np.einsum("s,sa,sad->d", d, pi, per_sa)
        if cmdp.has_init_grad:
            g += np.einsum("s,sd,s->d", cmdp.init_dist, cmdp.d_log_init, V)
        return -g

    return UpperLoss(value=value, grad_x=grad_x, grad_pi=grad_pi)


def as_upper_loss(problem: BilevelProblem) -> UpperLoss:
    if isinstance(problem.loss, UpperLoss):
        return problem.loss
    return induced_loss(problem.loss, problem.make_cmdp)
