"""Follower best-response solvers behind a common oracle contract.

Every solver returns a strictly positive softmax policy. :func:`make_oracle`
dispatches on :class:`SolverBudget` and wraps the result with simulator access.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from cbrl import _kernels
from cbrl.cmdp import (
    TabularCmdp,
    discounted_occupancy,
    evaluate_linear,
    evaluate_soft,
    q_from_v,
    rollouts,
    sample_trajectory,
    soft_max,
    softmax_policy,
)

VARIANTS = ("soft-vi", "soft-q", "vanilla-pg", "npg")


@dataclass(frozen=True)
class SolverBudget:
    """How much work the follower spends, and with which solver.

    Either ``iterations`` or ``target_delta`` must be given. For soft-VI a
    ``target_delta`` switches to residual-based stopping (which can exploit a
    warm start); the other variants convert it to an iteration count.
    """

    variant: str = "soft-vi"
    iterations: Optional[int] = None
    target_delta: Optional[float] = None
    h: Optional[float] = None
    t0: Optional[float] = None
    pg_step: float = 0.1
    pg_regularized: bool = True
    eta: Optional[float] = None
    behavior_policy: Optional[np.ndarray] = field(default=None, compare=False)
    warm_start: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown solver variant {self.variant!r}")
        if self.iterations is None and self.target_delta is None:
            raise ValueError("need iterations or target_delta")
        if self.iterations is not None and self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.target_delta is not None and not 0 < self.target_delta < 1:
            raise ValueError("target_delta must lie in (0, 1)")
        if self.h is not None and self.h <= 0:
            raise ValueError("h must be positive")
        if self.t0 is not None and self.t0 <= 0:
            raise ValueError("t0 must be positive")
        if self.pg_step <= 0:
            raise ValueError("pg_step must be positive")


@dataclass(frozen=True)
class QCheckpoints:
    iterations: tuple
    Q: tuple
    policies: tuple

    def policy_at(self, t: int) -> np.ndarray:
        return self.policies[self.iterations.index(t)]


def checkpoint_schedule(c: float, j: int) -> int:
    """Checkpoint ``t_j = ceil(c * j * 2**j)``."""
    return int(math.ceil(c * j * 2**j))


def soft_q_defaults(cmdp: TabularCmdp, h: Optional[float] = None,
                    t0: Optional[float] = None) -> tuple:
    mu_min = 1.0 / (2 * cmdp.n_states * cmdp.n_actions)
    if h is None:
        h = 4.0 / (mu_min * (1 - cmdp.gamma))
    if t0 is None:
        t0 = max(4 * h, 100.0)
    return float(h), float(t0)


def uniform_policy(cmdp: TabularCmdp) -> np.ndarray:
    return np.full((cmdp.n_states, cmdp.n_actions), 1.0 / cmdp.n_actions)


def budget_iterations(cmdp: TabularCmdp, budget: SolverBudget) -> int:
    """Iteration count implied by the budget (explicit count wins)."""
    if budget.iterations is not None:
        return budget.iterations
    delta = budget.target_delta
    lam, g = cmdp.lam, cmdp.gamma
    vmax = max(cmdp.value_bound(), 1e-12)
    if budget.variant == "soft-vi":
        # ||pi - pi*|| <= (gamma / lam) ||V_T - V*|| <= gamma^(T+1) vmax / lam
        return max(1, int(math.ceil(math.log(delta * lam / vmax) / math.log(g))))
    if budget.variant == "npg":
        rate = 1 - npg_step(cmdp, budget.eta) * lam / (1 - g)
        if rate <= 0:
            return 2
        return max(1, int(math.ceil(math.log(delta * lam / (2 * vmax)) / math.log(rate))) + 1)
    # sample-based solvers: O(1/delta^2) up to problem constants
    return max(1, int(math.ceil(cmdp.n_states * cmdp.n_actions / ((1 - g) ** 2 * delta**2))))


# --------------------------------------------------------------------------
# soft value iteration


def soft_value_iteration(cmdp: TabularCmdp, T: Optional[int] = None, tol: Optional[float] = None,
                         V0: Optional[np.ndarray] = None, max_iter: int = 10**6):
    """Soft value iteration from ``V0`` (zeros by default).

    With ``T`` exactly ``T`` sweeps are run. With ``tol`` sweeps stop once the
    a-posteriori bound ``gamma/(1-gamma) * ||V_{t+1} - V_t||`` on the distance
    to ``V*`` drops below ``tol``. Returns ``(V, policy, sweeps)``.
    """
    if (T is None) == (tol is None):
        raise ValueError("give exactly one of T and tol")
    V = np.zeros(cmdp.n_states) if V0 is None else np.array(V0, dtype=float)
    cols, vals = cmdp.transition_sparse
    lam = cmdp.lam
    if T is not None:
        if T < 1:
            raise ValueError("T must be >= 1")
        V, sweeps, _ = _kernels.soft_vi(cols, vals, cmdp.reward, cmdp.gamma, lam, V, T, 0.0)
    else:
        V, sweeps, ok = _kernels.soft_vi(cols, vals, cmdp.reward, cmdp.gamma, lam, V, max_iter, tol)
        if not ok:
            raise RuntimeError("soft value iteration hit max_iter")
    Q = q_from_v(cmdp, V)
    return V, softmax_policy(Q, lam), sweeps


def optimal_policy(cmdp: TabularCmdp, tol: float = 1e-12, V0=None):
    """``(V*, Q*, pi*)`` by soft value iteration to value tolerance ``tol``."""
    V, pi, _ = soft_value_iteration(cmdp, tol=tol, V0=V0)
    return V, q_from_v(cmdp, V), pi


# --------------------------------------------------------------------------
# soft Q-learning


def soft_q_runs(cmdp: TabularCmdp, totals, checkpoints, rng: np.random.Generator,
                h: Optional[float] = None, t0: Optional[float] = None,
                behavior_policy: Optional[np.ndarray] = None) -> np.ndarray:
    """Independent soft Q-learning runs; returns checkpoint Q tables (n, C, S, A)."""
    h, t0 = soft_q_defaults(cmdp, h, t0)
    beh = uniform_policy(cmdp) if behavior_policy is None else np.asarray(behavior_policy, float)
    totals = np.atleast_1d(np.asarray(totals, dtype=np.int64))
    checkpoints = np.asarray(checkpoints, dtype=np.int64).reshape(len(totals), -1)
    seed = int(rng.integers(0, 2**32 - 1))
    return _kernels.soft_q_runs(seed, cmdp.transition_cdf, cmdp.reward, cmdp.gamma, cmdp.lam,
                                _kernels.categorical_cdf(beh), cmdp.init_cdf, h, t0,
                                totals, checkpoints)


def soft_q_learning(cmdp: TabularCmdp, budget: SolverBudget, checkpoints: Sequence[int] = (),
                    rng: Optional[np.random.Generator] = None):
    """Asynchronous soft Q-learning along one behaviour trajectory.

    Returns ``(Q, policy, QCheckpoints)``; ``checkpoints`` must be
    nondecreasing and no larger than the iteration budget.
    """
    if rng is None:
        raise ValueError("soft Q-learning needs an rng")
    T = budget_iterations(cmdp, budget)
    ck = [int(c) for c in checkpoints]
    if any(b < a for a, b in zip(ck, ck[1:])) or any(c < 0 or c > T for c in ck):
        raise ValueError("checkpoints must be nondecreasing and within [0, T]")
    out = soft_q_runs(cmdp, [T], [ck + [T]], rng, budget.h, budget.t0, budget.behavior_policy)[0]
    Qs = tuple(out[i] for i in range(len(ck)))
    pols = tuple(softmax_policy(q, cmdp.lam) for q in Qs)
    Q = out[-1]
    return Q, softmax_policy(Q, cmdp.lam), QCheckpoints(tuple(ck), Qs, pols)


# --------------------------------------------------------------------------
# policy gradient


def entropy_grad_theta(pi: np.ndarray) -> np.ndarray:
    """Row-wise derivative of the entropy of ``softmax(theta)`` w.r.t. ``theta``."""
    logp = np.log(pi)
    H = -(pi * logp).sum(-1, keepdims=True)
    return -pi * (logp + H)


def exact_pg_gradient(cmdp: TabularCmdp, theta: np.ndarray, regularized: bool = True) -> np.ndarray:
    """Exact gradient of ``J_lam`` (or the raw ``J``) w.r.t. softmax logits."""
    pi = softmax_policy(theta, 1.0)
    if regularized:
        vals = evaluate_soft(cmdp, pi, tol=1e-12)
        adv = vals.Q - cmdp.lam * np.log(pi) - vals.V[:, None]
    else:
        V, Q = evaluate_linear(cmdp, pi, cmdp.reward)
        adv = Q - V[:, None]
    d = discounted_occupancy(cmdp, pi)
    return d[:, None] * pi * adv


def vanilla_pg(cmdp: TabularCmdp, budget: SolverBudget, rng: Optional[np.random.Generator] = None,
               exact: bool = False, theta0: Optional[np.ndarray] = None, history: bool = False):
    """Softmax policy gradient ascent from ``theta = 0``.

    The sampled mode uses geometric-horizon single-trajectory gradients. The
    ``exact`` mode ascends the exact gradient with step ``budget.pg_step``.
    With ``history`` the list of per-iteration policies is returned too.
    """
    T = budget_iterations(cmdp, budget)
    theta = np.zeros((cmdp.n_states, cmdp.n_actions)) if theta0 is None else np.array(theta0, float)
    if not exact:
        if rng is None:
            raise ValueError("sampled policy gradient needs an rng")
        seed = int(rng.integers(0, 2**32 - 1))
        theta = _kernels.pg_run(seed, cmdp.transition_cdf, cmdp.reward, cmdp.gamma, cmdp.lam,
                                cmdp.init_cdf, theta, T, budget.pg_step, budget.pg_regularized)
        pi = softmax_policy(theta, 1.0)
        return (pi, [pi]) if history else pi
    hist = []
    for _ in range(T):
        theta = theta + budget.pg_step * exact_pg_gradient(cmdp, theta, budget.pg_regularized)
        if history:
            hist.append(softmax_policy(theta, 1.0))
    pi = softmax_policy(theta, 1.0)
    return (pi, hist) if history else pi


def pg_smoothness(cmdp: TabularCmdp) -> float:
    """Smoothness constant of ``J_lam`` in softmax logits (step ``1/L`` is safe)."""
    return (8 + cmdp.lam * (4 + 8 * math.log(cmdp.n_actions))) / (1 - cmdp.gamma) ** 3


# --------------------------------------------------------------------------
# natural policy gradient


def npg_step(cmdp: TabularCmdp, eta: Optional[float]) -> float:
    eta_max = (1 - cmdp.gamma) / cmdp.lam
    if eta is None:
        return eta_max
    if not 0 < eta <= eta_max * (1 + 1e-12):
        raise ValueError("eta must lie in (0, (1-gamma)/lam]")
    return float(eta)


def npg(cmdp: TabularCmdp, budget: SolverBudget, pi0: Optional[np.ndarray] = None,
        history: bool = False):
    """Exact entropy-regularized natural policy gradient (multiplicative form)."""
    eta = npg_step(cmdp, budget.eta)
    T = budget_iterations(cmdp, budget)
    g, lam = cmdp.gamma, cmdp.lam
    pi = uniform_policy(cmdp) if pi0 is None else np.array(pi0, dtype=float)
    keep = 1 - eta * lam / (1 - g)
    hist = []
    V = None
    for _ in range(T):
        vals = evaluate_soft(cmdp, pi, tol=1e-12, V0=V)
        V = vals.V
        logits = keep * np.log(pi) + eta * vals.Q / (1 - g)
        pi = softmax_policy(logits, 1.0)
        if history:
            hist.append(pi)
    return (pi, hist) if history else pi


# --------------------------------------------------------------------------
# oracle


@dataclass(frozen=True, eq=False)
class LowerOracle:
    """Approximate best response plus simulator access to its MDP."""

    policy: np.ndarray
    cmdp: TabularCmdp
    accuracy_hint: Optional[float] = None
    iterations: int = 0
    V: Optional[np.ndarray] = None

    def sample(self, start, length: int, rng: np.random.Generator):
        return sample_trajectory(self.cmdp, self.policy, start, length, rng)

    def rollouts(self, start_s, start_a, lengths, rng: np.random.Generator):
        return rollouts(self.cmdp, self.policy[None], 0, start_s, start_a, lengths, rng)


def make_oracle(cmdp: TabularCmdp, budget: SolverBudget, rng: Optional[np.random.Generator] = None,
                warm_V: Optional[np.ndarray] = None) -> LowerOracle:
    """Solve the follower problem with the budgeted solver."""
    v = budget.variant
    V = None
    if v == "soft-vi":
        if budget.iterations is not None:
            V, pi, n = soft_value_iteration(cmdp, T=budget.iterations,
                                            V0=warm_V if budget.warm_start else None)
        else:
            # policy error <= (gamma / lam) * value error
            tol = budget.target_delta * cmdp.lam / cmdp.gamma
            V, pi, n = soft_value_iteration(cmdp, tol=tol,
                                            V0=warm_V if budget.warm_start else None)
    elif v == "soft-q":
        _, pi, _ = soft_q_learning(cmdp, budget, (), rng)
        n = budget_iterations(cmdp, budget)
    elif v == "vanilla-pg":
        pi = vanilla_pg(cmdp, budget, rng)
        n = budget_iterations(cmdp, budget)
    else:
        pi = npg(cmdp, budget)
        n = budget_iterations(cmdp, budget)
    return LowerOracle(policy=pi, cmdp=cmdp, accuracy_hint=budget.target_delta,
                       iterations=int(n), V=V)
