"""Hypergradients of the leader objective.

Four routes are provided:

* exact dynamic programming (:func:`exact_hypergradient`);
* trajectory-based estimates from an approximate best response
  (:func:`grad_estimator`, :func:`hpgd_gradient_sample`);
* the discounted-reward form for decomposable losses
  (:func:`decomposable_gradient_sample`);
* randomly truncated soft Q-learning (:func:`rtq_gradient_sample`).

Sign convention: estimators built on an :class:`UpperLoss` return ``dF/dx``
(gradient of the loss). The decomposable estimator returns the gradient of
the leader's expected discounted return, i.e. ``-dF/dx``. The optimizer
turns either into an ascent direction exactly once.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from cbrl import _kernels
from cbrl.cmdp import (
    Context,
    TabularCmdp,
    entropies,
    evaluate_soft,
    geometric,
    policy_transition,
    rollouts,
    softmax_policy,
)
from cbrl.problem import BilevelProblem, DecomposableUpperLoss, UpperLoss, as_upper_loss
from cbrl.solvers import LowerOracle, checkpoint_schedule, optimal_policy, soft_q_runs

# rows of (steps x d) work arrays held in memory at once
_CHUNK_FLOATS = 2 * 10**7


@dataclass(frozen=True)
class SamplingDistribution:
    """Full-support state distribution ``nu`` used by the HPGD estimator."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 1 or np.any(p <= 0) or abs(p.sum() - 1) > 1e-12:
            raise ValueError("nu must be a full-support probability vector")

    @classmethod
    def uniform(cls, n_states: int) -> "SamplingDistribution":
        return cls(np.full(n_states, 1.0 / n_states))

    @property
    def m(self) -> float:
        return float(np.min(self.probs))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return sample_categorical(_kernels.categorical_cdf(self.probs)[None], np.zeros(n, int), rng)


@dataclass(frozen=True)
class HypergradEstimate:
    g: np.ndarray
    variant: str
    k: Optional[int] = None
    inner_iterations: int = 0
    n_samples: int = 1
    env_steps: int = 0
    context: Optional[int] = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.g)):
            raise FloatingPointError(f"non-finite {self.variant} hypergradient estimate")


@dataclass(frozen=True)
class RtqConfig:
    """Level distribution and checkpoints of the randomly truncated estimator.

    Levels are ``k = 1..K-1`` with ``p_k`` proportional to ``2^-k``, so the
    deepest correction ends exactly at ``t_K``, the budget of the plain
    soft Q-learning estimator it is unbiased for.
    """

    K: int = 4
    c: float = 50.0
    batch_multiplier: int = 1
    h: Optional[float] = None
    t0: Optional[float] = None
    behavior_policy: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be at least 2")
        if self.c <= 0 or self.batch_multiplier < 1:
            raise ValueError("c must be positive and batch_multiplier >= 1")

    @property
    def levels(self) -> np.ndarray:
        return np.arange(1, self.K)

    @property
    def level_probs(self) -> np.ndarray:
        k = self.levels
        return 2.0 ** (-k) / (1 - 2.0 ** (-(self.K - 1)))

    def t(self, j: int) -> int:
        return checkpoint_schedule(self.c, j)

    def batch(self, k: int) -> int:
        return self.batch_multiplier * 2**k

    def expected_inner_iterations(self) -> float:
        return float(sum(p * self.t(k + 1) for k, p in zip(self.levels, self.level_probs)))


def sample_categorical(cdf: np.ndarray, rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per entry of ``rows`` from ``cdf[rows]`` (inverse-CDF)."""
    u = rng.random(len(rows))
    return (cdf[rows] <= u[:, None]).sum(1).astype(np.int64)


def sample_actions(policies: np.ndarray, pol_ids, states, rng) -> np.ndarray:
    cdf = _kernels.categorical_cdf(policies)
    S = policies.shape[-2]
    flat = cdf.reshape(-1, policies.shape[-1])
    return sample_categorical(flat, np.asarray(pol_ids) * S + np.asarray(states), rng)


# --------------------------------------------------------------------------
# exact route


def exact_dx_q(cmdp: TabularCmdp, policy: np.ndarray, tol: float = 1e-10,
               V: Optional[np.ndarray] = None) -> np.ndarray:
    """``dQ/dx`` of the regularized values of a fixed policy, shape ``(S, A, d)``.

    Solves ``G = dr + gamma P [dlogP * V + sum_a' pi G]`` by reducing it to the
    state-level linear system for ``sum_a pi G``.
    """
    if V is None:
        V = evaluate_soft(cmdp, policy, tol).V
    base = cmdp.d_reward.astype(float).copy()
    if cmdp.has_transition_grad:
        base += cmdp.gamma * np.einsum("sat,satd,t->sad", cmdp.transition,
                                       cmdp.d_log_transition, V)
    if cmdp.dim == 0:
        return base
    c = np.einsum("sa,sad->sd", policy, base)
    M = np.eye(cmdp.n_states) - cmdp.gamma * policy_transition(cmdp, policy)
    gV = np.linalg.solve(M, c)
    return base + cmdp.gamma * np.einsum("sat,td->sad", cmdp.transition, gV)


def exact_dx_advantage(cmdp: TabularCmdp, policy: np.ndarray, tol: float = 1e-10,
                       V: Optional[np.ndarray] = None) -> np.ndarray:
    G = exact_dx_q(cmdp, policy, tol, V)
    return G - np.einsum("sa,sad->sd", policy, G)[:, None, :]


def exact_best_response_jacobian(cmdp: TabularCmdp, pi_star: np.ndarray, tol: float = 1e-10,
                                 V: Optional[np.ndarray] = None) -> np.ndarray:
    """``dpi*(a|s)/dx = pi*(a|s) dA(s, a)/dx / lam``, shape ``(S, A, d)``."""
    dA = exact_dx_advantage(cmdp, pi_star, tol, V)
    return pi_star[:, :, None] * dA / cmdp.lam


def exact_hypergradient(x: np.ndarray, problem: BilevelProblem, tol: float = 1e-12,
                        loss: Optional[UpperLoss] = None) -> np.ndarray:
    """``dF/dx`` summed exactly over contexts and state-action pairs."""
    x = np.asarray(x, dtype=float)
    uloss = loss if loss is not None else as_upper_loss(problem)
    total = np.zeros(problem.dim)
    for ctx in problem.contexts:
        cmdp = problem.make_cmdp(x, ctx)
        V, _, pi = optimal_policy(cmdp, tol)
        J = exact_best_response_jacobian(cmdp, pi, V=V)
        gp = uloss.grad_pi(x, pi, ctx)
        total += ctx.weight * (uloss.grad_x(x, pi, ctx) + np.einsum("sa,sad->d", gp, J))
    return total


def exact_objective(x: np.ndarray, problem: BilevelProblem, tol: float = 1e-12,
                    loss: Optional[UpperLoss] = None) -> float:
    """``F(x) = sum_xi w_xi f(x, pi*_{x,xi}, xi)``."""
    x = np.asarray(x, dtype=float)
    uloss = loss if loss is not None else as_upper_loss(problem)
    total = 0.0
    for ctx in problem.contexts:
        cmdp = problem.make_cmdp(x, ctx)
        _, _, pi = optimal_policy(cmdp, tol)
        total += ctx.weight * uloss.value(x, pi, ctx)
    return total


# --------------------------------------------------------------------------
# sampled advantage derivative


def _segment_sums(values: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Sums of consecutive segments of ``values`` with the given positive lengths."""
    starts = np.zeros(len(lengths), dtype=np.int64)
    np.cumsum(lengths[:-1], out=starts[1:])
    return np.add.reduceat(values, starts, axis=0)


def _value_grad_part(cmdp, policies, pol_ids, s0, a0, T, Tp, rng):
    """Q-derivative (``a0 >= 0``) or V-derivative (``a0 < 0``) estimates."""
    n = len(T)
    d = cmdp.dim
    with_p = cmdp.has_transition_grad
    lengths = T + Tp + 2 if with_p else T + 1
    st, ac, off = rollouts(cmdp, policies, pol_ids, s0, a0, lengths, rng)
    rel = np.arange(len(st)) - np.repeat(off[:-1], lengths)
    head = rel <= np.repeat(T, lengths)
    out = _segment_sums(cmdp.d_reward[st[head], ac[head]], T + 1)
    if with_p:
        ent = cmdp.lam * entropies(policies)
        pid = np.repeat(pol_ids, lengths)
        j = rel - np.repeat(T + 1, lengths)
        w = np.where(j >= 0, np.sqrt(cmdp.gamma) ** np.maximum(j, 0), 0.0)
        vals = w * (cmdp.reward[st, ac] + ent[pid, st])
        tail = _segment_sums(vals, lengths)
        i = off[:-1] + T
        dlp = cmdp.d_log_transition[st[i], ac[i], st[i + 1]]
        out = out + (cmdp.gamma / (1 - cmdp.gamma)) * dlp * tail[:, None]
    return out.reshape(n, d), lengths


def advantage_grad_batch(cmdp: TabularCmdp, policies: np.ndarray, pol_ids, states, actions,
                         rng: np.random.Generator, crn: bool = False, return_steps: bool = False):
    """Independent unbiased estimates of ``dA(s_i, a_i)/dx`` under ``policies[pol_ids[i]]``.

    Each estimate differences a Q-derivative rollout started at ``(s, a)`` and a
    V-derivative rollout started at ``s``, each truncated at ``T ~ Geo(1-gamma)``
    with a ``Geo(1-sqrt(gamma))`` continuation for the transition-score term.
    With ``crn`` both rollouts share horizons and random numbers. With
    ``return_steps`` the per-estimate count of simulated steps is returned too.
    """
    policies = np.asarray(policies, dtype=float)
    if policies.ndim == 2:
        policies = policies[None]
    states = np.atleast_1d(np.asarray(states, dtype=np.int64))
    n = len(states)
    actions = np.broadcast_to(np.asarray(actions, dtype=np.int64), (n,))
    pol_ids = np.broadcast_to(np.asarray(pol_ids, dtype=np.int64), (n,))
    d = cmdp.dim
    if n == 0 or d == 0:
        z = np.zeros((n, d))
        return (z, np.zeros(n, dtype=np.int64)) if return_steps else z
    g = cmdp.gamma
    exp_len = 2 * (g / (1 - g) + 1) + (2 / (1 - math.sqrt(g)) if cmdp.has_transition_grad else 0)
    chunk = max(1, int(_CHUNK_FLOATS / (max(d, 1) * exp_len)))
    out = np.empty((n, d))
    steps = np.empty(n, dtype=np.int64)
    for lo in range(0, n, chunk):
        sl = slice(lo, min(n, lo + chunk))
        m = sl.stop - sl.start
        TQ, TQp = geometric(rng, 1 - g, m), geometric(rng, 1 - math.sqrt(g), m)
        if crn:
            TV, TVp = TQ, TQp
            seed = int(rng.integers(0, 2**63 - 1))
            rq, rv = np.random.default_rng(seed), np.random.default_rng(seed)
        else:
            TV, TVp = geometric(rng, 1 - g, m), geometric(rng, 1 - math.sqrt(g), m)
            rq = rv = rng
        q, lq = _value_grad_part(cmdp, policies, pol_ids[sl], states[sl], actions[sl], TQ, TQp, rq)
        v, lv = _value_grad_part(cmdp, policies, pol_ids[sl], states[sl], -1, TV, TVp, rv)
        out[sl] = q - v
        steps[sl] = lq + lv
    return (out, steps) if return_steps else out


def grad_estimator(cmdp: TabularCmdp, s: int, a: int, oracle, rng: np.random.Generator,
                   crn: bool = False) -> np.ndarray:
    """One unbiased estimate of ``dA(s, a)/dx`` for the oracle's policy."""
    pi = oracle.policy if isinstance(oracle, LowerOracle) else oracle
    return advantage_grad_batch(cmdp, pi, 0, [s], [a], rng, crn)[0]


# --------------------------------------------------------------------------
# HPGD estimator for general losses


def hpgd_samples(x, ctx: Context, loss: UpperLoss, oracle: LowerOracle, nu: SamplingDistribution,
                 n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` independent single-sample ``dF/dx`` estimates for one context and oracle."""
    cmdp, pi = oracle.cmdp, oracle.policy
    s = nu.sample(rng, n)
    a = sample_actions(pi[None], np.zeros(n, int), s, rng)
    Ahat = advantage_grad_batch(cmdp, pi, 0, s, a, rng)
    gx = np.asarray(loss.grad_x(x, pi, ctx), dtype=float)
    gp = np.asarray(loss.grad_pi(x, pi, ctx), dtype=float)
    nu_p = np.asarray(nu.probs)
    return gx[None, :] + (gp[s, a] / (cmdp.lam * nu_p[s]))[:, None] * Ahat


def hpgd_gradient_sample(x, problem: BilevelProblem, nu: SamplingDistribution,
                         oracle_factory: Callable[[np.ndarray, Context], LowerOracle],
                         rng: np.random.Generator, n_samples: int = 1,
                         loss: Optional[UpperLoss] = None) -> HypergradEstimate:
    """Draw a context, query the oracle once and average ``n_samples`` estimates of ``dF/dx``."""
    uloss = loss if loss is not None else as_upper_loss(problem)
    ctx = problem.sample_context(rng)
    oracle = oracle_factory(x, ctx)
    g = hpgd_samples(x, ctx, uloss, oracle, nu, n_samples, rng).mean(0)
    return HypergradEstimate(g=g, variant="hpgd", inner_iterations=oracle.iterations,
                             n_samples=n_samples, context=ctx.index)


# --------------------------------------------------------------------------
# decomposable losses


def decomposable_samples(cmdp: TabularCmdp, policy: np.ndarray, rbar: np.ndarray,
                         drbar: np.ndarray, n: int, rng: np.random.Generator,
                         horizons: Optional[tuple] = None):
    """Unbiased estimates of the gradient of the leader's discounted return.

    Returns ``(samples, env_steps)`` where ``samples`` has shape ``(n, d)`` and
    ``env_steps[i]`` counts every simulated step spent on sample ``i``.
    """
    d = cmdp.dim
    g = cmdp.gamma
    if horizons is None:
        T, Tp = geometric(rng, 1 - g, n), geometric(rng, 1 - math.sqrt(g), n)
    else:
        T, Tp = horizons
    n = len(T)
    if n == 0:
        return np.zeros((0, d)), np.zeros(0, dtype=np.int64)
    lengths = T + Tp + 1
    st, ac, off = rollouts(cmdp, policy[None], 0, -1, -1, lengths, rng)
    rel = np.arange(len(st)) - np.repeat(off[:-1], lengths)
    Trep = np.repeat(T, lengths)
    head = rel <= Trep
    out = _segment_sums(drbar[st[head], ac[head]], T + 1) if d else np.zeros((n, 0))
    j = rel - Trep
    w = np.where(j >= 0, np.sqrt(g) ** np.maximum(j, 0), 0.0)
    R = _segment_sums(w * rbar[st, ac], lengths)
    iT = off[:-1] + T
    sT, aT = st[iT], ac[iT]
    # advantage-derivative estimate at (s_T, a_T), drawn independently
    Ahat, a_steps = advantage_grad_batch(cmdp, policy, 0, sT, aT, rng, return_steps=True)
    out = out + Ahat * (R / (cmdp.lam * (1 - g)))[:, None]
    if cmdp.has_transition_grad or cmdp.has_init_grad:
        score = np.zeros((n, d))
        first = T == 0
        if cmdp.has_init_grad:
            score[first] = cmdp.d_log_init[st[off[:-1][first]]]
        if cmdp.has_transition_grad:
            later = ~first
            i = iT[later]
            score[later] = cmdp.d_log_transition[st[i - 1], ac[i - 1], st[i]]
        out = out + score * (R / (1 - g))[:, None]
    return out, lengths.astype(np.int64) + a_steps


def decomposable_gradient_sample(x, ctx: Context, loss: DecomposableUpperLoss, oracle: LowerOracle,
                                 rng: np.random.Generator, n_samples: int = 1) -> np.ndarray:
    """Average of ``n_samples`` estimates of ``dJbar/dx`` (leader return, i.e. ``-dF/dx``)."""
    rbar, drbar = loss.tables(x, ctx)
    out, _ = decomposable_samples(oracle.cmdp, oracle.policy, rbar, drbar, n_samples, rng)
    return out.mean(0)


# --------------------------------------------------------------------------
# soft Q-learning based estimators


def _grouped_mean(values: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    return _segment_sums(values, sizes) / sizes[:, None]


def _policy_terms(x, ctx, loss: UpperLoss, pols: np.ndarray):
    gx = np.stack([np.asarray(loss.grad_x(x, p, ctx), dtype=float) for p in pols])
    gp = np.stack([np.asarray(loss.grad_pi(x, p, ctx), dtype=float) for p in pols])
    return gx, gp


def _rtq_group(x, ctx, cmdp, loss, nu, cfg: RtqConfig, k: np.ndarray, rng):
    m = len(k)
    S, lam = cmdp.n_states, cmdp.lam
    t1 = cfg.t(1)
    tk = np.array([cfg.t(j) for j in k], dtype=np.int64)
    tk1 = np.array([cfg.t(j + 1) for j in k], dtype=np.int64)
    ck = np.stack([np.full(m, t1), tk, tk1], axis=1)
    Q = soft_q_runs(cmdp, tk1, ck, rng, cfg.h, cfg.t0, cfg.behavior_policy)
    pols = softmax_policy(Q, lam).reshape(3 * m, S, cmdp.n_actions)  # (m*3) flattened
    s = nu.sample(rng, m)
    base = np.arange(m) * 3
    a = sample_actions(pols, base + 2, s, rng)
    a1 = sample_actions(pols, base, s, rng)
    B = np.array([cfg.batch(j) for j in k], dtype=np.int64)
    # estimator calls: [base level once] + [B at t_k] + [B at t_{k+1}] per sample
    sizes = np.stack([np.ones(m, dtype=np.int64), B, B], axis=1).ravel()
    ids = np.repeat(np.stack([base, base + 1, base + 2], axis=1).ravel(), sizes)
    ss = np.repeat(np.repeat(s, 3), sizes)
    aa = np.repeat(np.stack([a1, a, a], axis=1).ravel(), sizes)
    est = _grouped_mean(advantage_grad_batch(cmdp, pols, ids, ss, aa, rng), sizes)
    est = est.reshape(m, 3, -1)
    gx, gp = _policy_terms(x, ctx, loss, pols)
    gx, gp = gx.reshape(m, 3, -1), gp.reshape(m, 3, S, -1)
    r = np.arange(m)
    w = 1.0 / (lam * np.asarray(nu.probs)[s])
    dF1 = gx[:, 0] + (gp[r, 0, s, a1] * w)[:, None] * est[:, 0]
    dFk1 = gx[:, 2] + (gp[r, 2, s, a] * w)[:, None] * est[:, 2]
    P = pols.reshape(m, 3, S, -1)
    ratio = P[r, 1, s, a] / P[r, 2, s, a]
    dFk = gx[:, 1] + (ratio * gp[r, 1, s, a] * w)[:, None] * est[:, 1]
    p = cfg.level_probs[k - 1]
    return dF1 + (dFk1 - dFk) / p[:, None], tk1


def rtq_samples(x, problem: BilevelProblem, nu: SamplingDistribution, cfg: RtqConfig, n: int,
                rng: np.random.Generator, loss: Optional[UpperLoss] = None, chunk: int = 4096):
    """``n`` independent RT-Q estimates of ``dF/dx`` with their levels and inner iterations."""
    uloss = loss if loss is not None else as_upper_loss(problem)
    x = np.asarray(x, dtype=float)
    g = np.empty((n, problem.dim))
    ks = np.empty(n, dtype=np.int64)
    inner = np.empty(n, dtype=np.int64)
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        m = hi - lo
        ci = rng.choice(len(problem.contexts), size=m, p=problem.weights)
        k = rng.choice(cfg.levels, size=m, p=cfg.level_probs)
        ks[lo:hi] = k
        for j, ctx in enumerate(problem.contexts):
            sel = np.flatnonzero(ci == j)
            if len(sel) == 0:
                continue
            cmdp = problem.make_cmdp(x, ctx)
            gg, it = _rtq_group(x, ctx, cmdp, uloss, nu, cfg, k[sel], rng)
            g[lo + sel] = gg
            inner[lo + sel] = it
    return g, ks, inner


def rtq_gradient_sample(x, problem: BilevelProblem, nu: SamplingDistribution, cfg: RtqConfig,
                        rng: np.random.Generator, loss: Optional[UpperLoss] = None) -> HypergradEstimate:
    g, k, inner = rtq_samples(x, problem, nu, cfg, 1, rng, loss)
    return HypergradEstimate(g=g[0], variant="rtq", k=int(k[0]), inner_iterations=int(inner[0]))


def vanilla_softq_samples(x, problem: BilevelProblem, nu: SamplingDistribution, cfg: RtqConfig,
                          n: int, rng: np.random.Generator, loss: Optional[UpperLoss] = None,
                          chunk: int = 4096):
    """``n`` estimates of ``dF/dx`` from independent soft Q-learning runs of length ``t_K``."""
    uloss = loss if loss is not None else as_upper_loss(problem)
    x = np.asarray(x, dtype=float)
    tK = cfg.t(cfg.K)
    g = np.empty((n, problem.dim))
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        m = hi - lo
        ci = rng.choice(len(problem.contexts), size=m, p=problem.weights)
        for j, ctx in enumerate(problem.contexts):
            sel = np.flatnonzero(ci == j)
            if len(sel) == 0:
                continue
            cmdp = problem.make_cmdp(x, ctx)
            q = len(sel)
            Q = soft_q_runs(cmdp, np.full(q, tK), np.full((q, 1), tK), rng, cfg.h, cfg.t0,
                            cfg.behavior_policy)[:, 0]
            pols = softmax_policy(Q, cmdp.lam)
            s = nu.sample(rng, q)
            a = sample_actions(pols, np.arange(q), s, rng)
            est = advantage_grad_batch(cmdp, pols, np.arange(q), s, a, rng)
            gx, gp = _policy_terms(x, ctx, uloss, pols)
            w = 1.0 / (cmdp.lam * np.asarray(nu.probs)[s])
            g[lo + sel] = gx + (gp[np.arange(q), s, a] * w)[:, None] * est
    return g, np.full(n, tK, dtype=np.int64)


def vanilla_softq_gradient_sample(x, problem, nu, cfg, rng, loss=None) -> HypergradEstimate:
    g, inner = vanilla_softq_samples(x, problem, nu, cfg, 1, rng, loss)
    return HypergradEstimate(g=g[0], variant="softq-vanilla", k=cfg.K, inner_iterations=int(inner[0]))
