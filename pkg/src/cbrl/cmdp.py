"""Tabular contextual MDPs with entropy regularization.

Shapes used throughout: ``S`` states, ``A`` actions, ``d`` leader dimensions.
Policies are plain ``(S, A)`` arrays whose rows lie on the simplex.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Optional, Union

import numpy as np

from cbrl import _kernels

StartMode = Union[None, int, tuple]

ROW_TOL = 1e-10


@dataclass(frozen=True)
class Context:
    """One element ``xi`` of a finite context set."""

    index: int
    weight: float
    payload: Any = None


def check_contexts(contexts) -> None:
    w = np.array([c.weight for c in contexts], dtype=float)
    if len(w) == 0 or np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
        raise ValueError("context weights must be positive and sum to 1")


@dataclass(frozen=True, eq=False)
class TabularCmdp:
    """MDP realized at a leader parameter ``x`` and context ``xi``.

    ``d_log_transition`` may be ``None`` when transitions do not depend on
    ``x``; use :attr:`dlogP` to get a (broadcast) zero table in that case.
    Entries of ``d_log_transition`` at zero-probability transitions must be 0.
    """

    reward: np.ndarray  # (S, A)
    transition: np.ndarray  # (S, A, S)
    init_dist: np.ndarray  # (S,)
    gamma: float
    lam: float
    d_reward: np.ndarray  # (S, A, d)
    d_log_transition: Optional[np.ndarray] = None  # (S, A, S, d)
    d_log_init: Optional[np.ndarray] = None  # (S, d)
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        if not self.validate:
            return
        S, A = self.reward.shape
        if self.transition.shape != (S, A, S):
            raise ValueError(f"transition shape {self.transition.shape} != {(S, A, S)}")
        if self.init_dist.shape != (S,):
            raise ValueError("init_dist must have shape (S,)")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if not np.all(np.isfinite(self.reward)):
            raise ValueError("rewards must be finite")
        if np.any(self.transition < 0) or np.abs(self.transition.sum(-1) - 1).max() > ROW_TOL:
            raise ValueError("transition rows must be probability vectors")
        if np.any(self.init_dist < 0) or abs(self.init_dist.sum() - 1) > ROW_TOL:
            raise ValueError("init_dist must be a probability vector")
        if self.d_reward.shape[:2] != (S, A) or self.d_reward.ndim != 3:
            raise ValueError("d_reward must have shape (S, A, d)")
        d = self.d_reward.shape[2]
        if self.d_log_transition is not None and self.d_log_transition.shape != (S, A, S, d):
            raise ValueError("d_log_transition must have shape (S, A, S, d)")
        if self.d_log_init is not None and self.d_log_init.shape != (S, d):
            raise ValueError("d_log_init must have shape (S, d)")

    @property
    def n_states(self) -> int:
        return self.reward.shape[0]

    @property
    def n_actions(self) -> int:
        return self.reward.shape[1]

    @property
    def dim(self) -> int:
        return self.d_reward.shape[2]

    @property
    def has_transition_grad(self) -> bool:
        return self.d_log_transition is not None

    @property
    def has_init_grad(self) -> bool:
        return self.d_log_init is not None

    @property
    def dlogP(self) -> np.ndarray:
        if self.d_log_transition is None:
            return np.broadcast_to(np.zeros(1), self.transition.shape + (self.dim,))
        return self.d_log_transition

    @property
    def dlogmu(self) -> np.ndarray:
        if self.d_log_init is None:
            return np.zeros((self.n_states, self.dim))
        return self.d_log_init

    @cached_property
    def transition_cdf(self) -> np.ndarray:
        return _kernels.categorical_cdf(self.transition)

    @cached_property
    def transition_sparse(self) -> tuple:
        return _kernels.sparse_rows(self.transition)

    @cached_property
    def init_cdf(self) -> np.ndarray:
        return _kernels.categorical_cdf(self.init_dist)

    @property
    def reward_bound(self) -> float:
        return float(np.abs(self.reward).max())

    def value_bound(self) -> float:
        """Upper bound on ``|V|`` for any policy."""
        return (self.reward_bound + self.lam * math.log(self.n_actions)) / (1 - self.gamma)


@dataclass(frozen=True)
class SoftValues:
    V: np.ndarray  # (S,)
    Q: np.ndarray  # (S, A)
    A: np.ndarray  # (S, A)


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    start_mode: str

    def __len__(self):
        return len(self.states)


def entropy(policy: np.ndarray, state: int) -> float:
    """Shannon entropy of one policy row, with ``0 log 0 = 0``."""
    return float(entropies(policy[state][None, :])[0])


def entropies(policy: np.ndarray) -> np.ndarray:
    """Row-wise entropies of an ``(..., A)`` array of distributions."""
    p = np.asarray(policy, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    return -plogp.sum(-1)


def soft_max(Q: np.ndarray, lam: float) -> np.ndarray:
    """``lam * logsumexp(Q / lam)`` along the last axis, with max subtraction."""
    m = Q.max(-1)
    return m + lam * np.log(np.exp((Q - m[..., None]) / lam).sum(-1))


def softmax_policy(Q: np.ndarray, lam: float) -> np.ndarray:
    if lam <= 0:
        raise ValueError("lam must be positive")
    z = (Q - Q.max(-1, keepdims=True)) / lam
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def q_from_v(cmdp: TabularCmdp, V: np.ndarray) -> np.ndarray:
    return cmdp.reward + cmdp.gamma * cmdp.transition @ V


def soft_bellman_v(cmdp: TabularCmdp, V: np.ndarray) -> np.ndarray:
    """Soft Bellman optimality operator on state values."""
    return soft_max(q_from_v(cmdp, V), cmdp.lam)


def soft_bellman_q(cmdp: TabularCmdp, Q: np.ndarray) -> np.ndarray:
    """Soft Bellman optimality operator on state-action values."""
    return cmdp.reward + cmdp.gamma * cmdp.transition @ soft_max(Q, cmdp.lam)


def policy_transition(cmdp: TabularCmdp, policy: np.ndarray) -> np.ndarray:
    """State-to-state kernel ``P_pi[s, s']`` induced by a policy."""
    return np.einsum("sa,sat->st", policy, cmdp.transition)


def evaluation_cap(cmdp: TabularCmdp, tol: float) -> int:
    vmax = max(cmdp.value_bound(), 1e-300)
    ratio = tol * (1 - cmdp.gamma) / vmax
    if ratio >= 1:
        return 10
    return int(math.ceil(math.log(ratio) / math.log(cmdp.gamma))) + 10


def evaluate_soft(cmdp: TabularCmdp, policy: np.ndarray, tol: float = 1e-10,
                  V0: Optional[np.ndarray] = None) -> SoftValues:
    """Entropy-regularized evaluation of ``policy`` by fixed-point iteration.

    Iterates ``V <- sum_a pi (r + gamma P V) + lam H`` until successive
    iterates differ by at most ``tol`` in sup norm. The advantage is centred
    on the policy average of Q (not on V, which includes the entropy bonus).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    P_pi = policy_transition(cmdp, policy)
    c = (policy * cmdp.reward).sum(-1) + cmdp.lam * entropies(policy)
    V = np.zeros(cmdp.n_states) if V0 is None else np.array(V0, dtype=float)
    g = cmdp.gamma
    for _ in range(evaluation_cap(cmdp, tol)):
        V_new = c + g * (P_pi @ V)
        if np.abs(V_new - V).max() <= tol:
            V = V_new
            break
        V = V_new
    else:
        raise RuntimeError("policy evaluation did not converge within the iteration cap")
    Q = q_from_v(cmdp, V)
    A = Q - (policy * Q).sum(-1, keepdims=True)
    return SoftValues(V=V, Q=Q, A=A)


def lower_objective(cmdp: TabularCmdp, policy: np.ndarray, tol: float = 1e-10) -> float:
    return float(cmdp.init_dist @ evaluate_soft(cmdp, policy, tol).V)


def evaluate_linear(cmdp: TabularCmdp, policy: np.ndarray, reward: np.ndarray):
    """Unregularized values ``(V, Q)`` of ``policy`` for an arbitrary reward table.

    Solved exactly as a linear system; used for leader-side quantities.
    """
    P_pi = policy_transition(cmdp, policy)
    r_pi = (policy * reward).sum(-1)
    V = np.linalg.solve(np.eye(cmdp.n_states) - cmdp.gamma * P_pi, r_pi)
    Q = reward + cmdp.gamma * cmdp.transition @ V
    return V, Q


def discounted_occupancy(cmdp: TabularCmdp, policy: np.ndarray) -> np.ndarray:
    """Unnormalized ``d(s) = sum_t gamma^t Pr(s_t = s)`` from ``init_dist``."""
    P_pi = policy_transition(cmdp, policy)
    return np.linalg.solve(np.eye(cmdp.n_states) - cmdp.gamma * P_pi.T, cmdp.init_dist)


# --------------------------------------------------------------------------
# sampling


def rollouts(cmdp: TabularCmdp, policies: np.ndarray, pol_ids, start_s, start_a,
             lengths, rng: np.random.Generator):
    """Batched trajectory sampler.

    ``policies`` has shape ``(M, S, A)`` and ``pol_ids[i]`` picks the policy for
    trajectory ``i``. Negative ``start_s`` draws from ``init_dist``; negative
    ``start_a`` draws the first action from the policy. Returns flat
    ``(states, actions, offsets)`` where trajectory ``i`` occupies
    ``offsets[i]:offsets[i+1]``.
    """
    lengths = np.asarray(lengths, dtype=np.int64)
    if np.any(lengths < 1):
        raise ValueError("trajectory length must be at least 1")
    n = lengths.shape[0]
    pol_ids = np.broadcast_to(np.asarray(pol_ids, dtype=np.int64), (n,)).copy()
    start_s = np.broadcast_to(np.asarray(start_s, dtype=np.int64), (n,)).copy()
    start_a = np.broadcast_to(np.asarray(start_a, dtype=np.int64), (n,)).copy()
    if np.any(start_s >= cmdp.n_states) or np.any(start_a >= cmdp.n_actions):
        raise ValueError("start index out of range")
    pi_cdf = _kernels.categorical_cdf(np.asarray(policies, dtype=float).reshape(
        -1, cmdp.n_states, cmdp.n_actions))
    seed = int(rng.integers(0, 2**32 - 1))
    states, actions = _kernels.rollout(seed, cmdp.transition_cdf, pi_cdf, cmdp.init_cdf,
                                       pol_ids, start_s, start_a, lengths)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    return states, actions, offsets


def sample_trajectory(cmdp: TabularCmdp, policy: np.ndarray, start: StartMode, length: int,
                      rng: np.random.Generator) -> Trajectory:
    """Roll out ``length`` steps of ``policy``.

    ``start`` is ``None`` (draw from ``init_dist``), a state index, or a
    ``(state, action)`` pair whose action is forced at the first step.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    if start is None:
        s0, a0, mode = -1, -1, "from-mu"
    elif isinstance(start, tuple):
        s0, a0 = start
        mode = "from-state-action"
        if not 0 <= a0 < cmdp.n_actions:
            raise ValueError("invalid start action")
    else:
        s0, a0, mode = int(start), -1, "from-state"
    if start is not None and not 0 <= s0 < cmdp.n_states:
        raise ValueError("invalid start state")
    states, actions, _ = rollouts(cmdp, policy[None], 0, s0, a0, [length], rng)
    return Trajectory(states=states, actions=actions,
                      rewards=cmdp.reward[states, actions], start_mode=mode)


def geometric(rng: np.random.Generator, success: float, size) -> np.ndarray:
    """``Geo(success)`` on ``{0, 1, 2, ...}`` (number of failures)."""
    return rng.geometric(success, size=size).astype(np.int64) - 1
