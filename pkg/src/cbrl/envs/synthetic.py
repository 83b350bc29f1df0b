"""Small seeded CMDP families with exact derivative tables.

Generation order for a given seed (one ``numpy.random.default_rng(seed)``):
base transitions (Dirichlet(1) rows), transition features, reward offsets per
context, reward slopes, initial logits, initial features, leader loss weights,
leader reward offsets and slopes. Optional pieces are drawn regardless of the
flags so that toggling a flag never changes the other tables.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cbrl.cmdp import Context, TabularCmdp
from cbrl.problem import BilevelProblem, DecomposableUpperLoss, UpperLoss

MAX_STATES = 10
MAX_ACTIONS = 4


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class SyntheticFamily:
    """``x``-affine rewards, ``x``-tilted transitions and start distribution."""

    n_states: int
    n_actions: int
    dim: int
    gamma: float
    lam: float
    P0: np.ndarray
    phi: np.ndarray  # (S, A, S, d)
    R0: np.ndarray  # (C, S, A)
    R1: np.ndarray  # (S, A, d)
    mu_logits: np.ndarray
    psi: np.ndarray  # (S, d)
    W: np.ndarray  # (C, S, A)
    C0: np.ndarray  # (S, A)
    C1: np.ndarray  # (S, A, d)
    x_transitions: bool
    x_init: bool
    rho: float = 0.5
    kappa: float = 1.0

    @property
    def contexts(self) -> list:
        n = self.R0.shape[0]
        return [Context(i, 1.0 / n) for i in range(n)]

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"x must have shape ({self.dim},)")
        return x

    def cmdp(self, x, ctx: Context) -> TabularCmdp:
        x = self._check(x)
        reward = self.R0[ctx.index] + self.R1 @ x
        if self.x_transitions:
            logits = np.log(self.P0) + self.phi @ x
            P = _softmax(logits)
            dlogP = self.phi - np.einsum("sat,satd->sad", P, self.phi)[:, :, None, :]
        else:
            P, dlogP = self.P0, None
        if self.x_init:
            mu = _softmax(self.mu_logits + self.psi @ x)
            dlogmu = self.psi - mu @ self.psi
        else:
            mu, dlogmu = _softmax(self.mu_logits), None
        return TabularCmdp(reward, P, mu, self.gamma, self.lam, self.R1.copy(), dlogP, dlogmu)

    def upper_loss(self) -> UpperLoss:
        """``f = <W_xi, pi> + kappa/2 ||pi - 1/A||^2 + rho/2 ||x||^2``."""
        u = 1.0 / self.n_actions

        def value(x, pi, ctx):
            return float((self.W[ctx.index] * pi).sum() + 0.5 * self.kappa * ((pi - u) ** 2).sum()
                         + 0.5 * self.rho * np.dot(x, x))

        def grad_x(x, pi, ctx):
            return self.rho * np.asarray(x, dtype=float)

        def grad_pi(x, pi, ctx):
            return self.W[ctx.index] + self.kappa * (pi - u)

        return UpperLoss(value, grad_x, grad_pi)

    def decomposable_loss(self) -> DecomposableUpperLoss:
        """Leader reward ``rbar = C0 + C1 x``."""

        def tables(x, ctx):
            x = np.asarray(x, dtype=float)
            return self.C0 + self.C1 @ x, self.C1.copy()

        return DecomposableUpperLoss(tables)

    def problem(self, x0=None, decomposable: bool = False, bounds=None) -> BilevelProblem:
        x0 = np.zeros(self.dim) if x0 is None else np.asarray(x0, dtype=float)
        loss = self.decomposable_loss() if decomposable else self.upper_loss()
        return BilevelProblem(self.cmdp, self.contexts, loss, x0, bounds,
                              name=f"synthetic-{self.n_states}x{self.n_actions}")


def synthetic_cmdp(n_states: int = 3, n_actions: int = 2, dim: int = 2, seed: int = 0,
                   gamma: float = 0.7, lam: float = 0.5, n_contexts: int = 1,
                   x_transitions: bool = True, x_init: bool = True,
                   scale: float = 0.5) -> SyntheticFamily:
    """Seeded random family; sizes are capped at 10 states and 4 actions."""
    if not 1 <= n_states <= MAX_STATES or not 1 <= n_actions <= MAX_ACTIONS:
        raise ValueError(f"need 1 <= S <= {MAX_STATES} and 1 <= A <= {MAX_ACTIONS}")
    if dim < 0 or n_contexts < 1:
        raise ValueError("dim >= 0 and n_contexts >= 1 required")
    S, A, d = n_states, n_actions, dim
    rng = np.random.default_rng(seed)
    P0 = rng.dirichlet(np.ones(S), size=(S, A))
    P0 = np.maximum(P0, 1e-3)
    P0 /= P0.sum(-1, keepdims=True)
    phi = scale * rng.standard_normal((S, A, S, d))
    R0 = rng.uniform(0, 1, size=(n_contexts, S, A))
    R1 = scale * rng.standard_normal((S, A, d))
    mu_logits = rng.standard_normal(S)
    psi = scale * rng.standard_normal((S, d))
    W = rng.standard_normal((n_contexts, S, A))
    C0 = rng.uniform(-1, 1, size=(S, A))
    C1 = scale * rng.standard_normal((S, A, d))
    return SyntheticFamily(S, A, d, gamma, lam, P0, phi, R0, R1, mu_logits, psi, W, C0, C1,
                           x_transitions, x_init)


def bandit_problem(lam: float = 1.0, gamma: float = 0.5, weight: float = 1.0,
                   rho: float = 1.0) -> BilevelProblem:
    """One-state, two-action problem with ``r_x = (x, 0)``.

    The follower plays ``pi* = sigmoid(x / lam)`` on the first arm and the
    leader loss is ``-weight * pi(a_1) + rho x^2 / 2``.
    """
    P = np.ones((1, 2, 1))
    mu = np.ones(1)
    dr = np.array([[[1.0], [0.0]]])

    def make(x, ctx):
        x = np.asarray(x, dtype=float)
        if x.shape != (1,):
            raise ValueError("bandit x must have shape (1,)")
        return TabularCmdp(np.array([[x[0], 0.0]]), P, mu, gamma, lam, dr)

    def value(x, pi, ctx):
        return float(-weight * pi[0, 0] + 0.5 * rho * x[0] ** 2)

    def grad_x(x, pi, ctx):
        return np.array([rho * x[0]])

    def grad_pi(x, pi, ctx):
        return np.array([[-weight, 0.0]])

    return BilevelProblem(make, [Context(0, 1.0)], UpperLoss(value, grad_x, grad_pi),
                          np.zeros(1), name="bandit")
