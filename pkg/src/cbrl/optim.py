"""Outer loops: HPGD (plain, soft-Q, RT-Q), model-based AMD and zero-order search.

All loops ascend the leader's return. Estimators of ``dF/dx`` are negated
here, once; decomposable estimators already point uphill.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from cbrl.cmdp import evaluate_linear, soft_max, softmax_policy
from cbrl.hypergrad import (
    RtqConfig,
    SamplingDistribution,
    decomposable_samples,
    exact_hypergradient,
    hpgd_samples,
    rtq_samples,
    vanilla_softq_samples,
)
from cbrl.problem import BilevelProblem, DecomposableUpperLoss, UpperLoss, as_upper_loss
from cbrl.solvers import LowerOracle, SolverBudget, make_oracle, optimal_policy

ALGORITHMS = ("hpgd", "hpgd-softq", "hpgd-rtq", "amd", "zero-order")


@dataclass(frozen=True)
class OuterConfig:
    algorithm: str = "hpgd"
    iterations: int = 100
    step: float = 0.1
    clip: Optional[float] = 1.0
    project: bool = True
    seed: int = 0
    batch: int = 1
    env_steps: Optional[int] = None
    nu: Optional[np.ndarray] = field(default=None, compare=False)
    rtq: RtqConfig = RtqConfig()
    oracle: SolverBudget = SolverBudget("soft-vi", target_delta=1e-6, warm_start=True)
    amd_inner: int = 10
    zo_c: float = 1.0
    eval_every: int = 100
    eval_tol: float = 1e-10
    track_grad_norm: bool = False

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.iterations < 1 or self.step <= 0:
            raise ValueError("iterations >= 1 and step > 0 required")
        if self.clip is not None and self.clip <= 0:
            raise ValueError("clip threshold must be positive")
        if self.batch < 1 or self.amd_inner < 1 or self.eval_every < 1:
            raise ValueError("batch, amd_inner and eval_every must be >= 1")
        if self.env_steps is not None and self.env_steps < 1:
            raise ValueError("env_steps must be positive")

    def hash(self) -> str:
        def enc(o):
            if isinstance(o, np.ndarray):
                return o.tolist()
            return str(o)

        blob = json.dumps(dataclasses.asdict(self), sort_keys=True, default=enc)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class EvalPoint:
    iteration: int
    upper_return: float
    grad_norm_sq: Optional[float] = None


@dataclass
class RunRecord:
    algorithm: str
    seed: int
    config_hash: str
    iterates: list = field(default_factory=list)
    grads: list = field(default_factory=list)
    clipped: list = field(default_factory=list)
    step_norms: list = field(default_factory=list)
    inner_iterations: list = field(default_factory=list)
    oracle_solves: list = field(default_factory=list)
    env_steps: list = field(default_factory=list)
    wall_times: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    x_hat: Optional[np.ndarray] = None
    x_hat_index: Optional[int] = None
    complete: bool = False
    error: Optional[str] = None

    @property
    def x_final(self) -> np.ndarray:
        return self.iterates[-1]

    def same_result(self, other: "RunRecord") -> bool:
        """Equality of everything except wall times."""
        keys = ("iterates", "grads", "clipped", "inner_iterations", "oracle_solves", "env_steps")
        for k in keys:
            a, b = getattr(self, k), getattr(other, k)
            if len(a) != len(b) or any(not np.array_equal(u, v) for u, v in zip(a, b)):
                return False
        return (np.array_equal(self.x_hat, other.x_hat)
                and [(e.iteration, e.upper_return) for e in self.evals]
                == [(e.iteration, e.upper_return) for e in other.evals])


def evaluate_upper_return(x, problem: BilevelProblem, tol: float = 1e-10) -> float:
    """Leader return at the exact best responses.

    For a decomposable loss this is the expected discounted leader reward;
    for a general loss it is ``-F(x)``.
    """
    x = np.asarray(x, dtype=float)
    total = 0.0
    for ctx in problem.contexts:
        cmdp = problem.make_cmdp(x, ctx)
        _, _, pi = optimal_policy(cmdp, tol)
        if isinstance(problem.loss, DecomposableUpperLoss):
            rbar, _ = problem.loss.tables(x, ctx)
            V, _ = evaluate_linear(cmdp, pi, rbar)
            total += ctx.weight * float(cmdp.init_dist @ V)
        else:
            total -= ctx.weight * problem.loss.value(x, pi, ctx)
    return total


class _Stepper:
    """Clip, step and project, recording what happened."""

    def __init__(self, problem: BilevelProblem, cfg: OuterConfig, record: RunRecord):
        self.problem, self.cfg, self.rec = problem, cfg, record

    def __call__(self, x, ascent, inner=0, solves=0, steps=0):
        cfg = self.cfg
        norm = float(np.linalg.norm(ascent))
        clipped = cfg.clip is not None and norm > cfg.clip
        d = ascent * (cfg.clip / norm) if clipped else ascent
        x_new = x + cfg.step * d
        if cfg.project and self.problem.bounds is not None:
            x_new = self.problem.bounds.project(x_new)
        r = self.rec
        r.grads.append(np.array(ascent, dtype=float))
        r.clipped.append(bool(clipped))
        r.step_norms.append(float(np.linalg.norm(x_new - x)))
        r.inner_iterations.append(int(inner))
        r.oracle_solves.append(int(solves))
        r.env_steps.append(int(steps))
        r.iterates.append(x_new)
        return x_new


class _Oracles:
    """Budgeted oracle construction with per-context warm starts and a solve counter."""

    def __init__(self, problem: BilevelProblem, budget: SolverBudget):
        self.problem, self.budget = problem, budget
        self.warm = {}
        self.solves = 0

    def __call__(self, x, ctx, rng) -> LowerOracle:
        cmdp = self.problem.make_cmdp(x, ctx)
        o = make_oracle(cmdp, self.budget, rng, self.warm.get(ctx.index))
        if o.V is not None and self.budget.warm_start:
            self.warm[ctx.index] = o.V
        self.solves += 1
        return o


def _decomposable_ascent(x, ctx, loss, oracle, cfg: OuterConfig, rng):
    rbar, drbar = loss.tables(x, ctx)
    if cfg.env_steps is None:
        out, steps = decomposable_samples(oracle.cmdp, oracle.policy, rbar, drbar, cfg.batch, rng)
        return out.mean(0), int(steps.sum())
    chunks, used = [], 0
    g = oracle.cmdp.gamma
    per = 3 * (g / (1 - g) + 1) + 1 / (1 - math.sqrt(g))
    while used < cfg.env_steps:
        m = max(1, int(math.ceil((cfg.env_steps - used) / per)))
        out, steps = decomposable_samples(oracle.cmdp, oracle.policy, rbar, drbar, m, rng)
        cum = used + np.cumsum(steps)
        stop = np.searchsorted(cum, cfg.env_steps)
        if stop < m:
            out, steps = out[: stop + 1], steps[: stop + 1]
        chunks.append(out)
        used += int(steps.sum())
    return np.concatenate(chunks).mean(0), used


def _evaluate(record, problem, cfg, t, x):
    if t % cfg.eval_every != 0 and t != cfg.iterations:
        return
    gn = None
    if cfg.track_grad_norm:
        gn = float(np.sum(exact_hypergradient(x, problem, cfg.eval_tol) ** 2))
    record.evals.append(EvalPoint(t, evaluate_upper_return(x, problem, cfg.eval_tol), gn))


def run(problem: BilevelProblem, cfg: OuterConfig) -> RunRecord:
    """Dispatch on ``cfg.algorithm``."""
    return {
        "hpgd": run_hpgd,
        "hpgd-softq": lambda p, c: run_hpgd_rtq(p, c, vanilla=True),
        "hpgd-rtq": run_hpgd_rtq,
        "amd": run_amd,
        "zero-order": run_zero_order,
    }[cfg.algorithm](problem, cfg)


def _loop(problem: BilevelProblem, cfg: OuterConfig, step_fn) -> RunRecord:
    rng = np.random.default_rng(cfg.seed)
    rec = RunRecord(cfg.algorithm, cfg.seed, cfg.hash())
    x = np.array(problem.x0, dtype=float)
    rec.iterates.append(x.copy())
    stepper = _Stepper(problem, cfg, rec)
    try:
        for t in range(cfg.iterations):
            _evaluate(rec, problem, cfg, t, x)
            t_start = time.perf_counter()
            x = step_fn(t, x, rng, stepper)
            rec.wall_times.append(time.perf_counter() - t_start)
        _evaluate(rec, problem, cfg, cfg.iterations, x)
    except Exception as exc:  # partial record, flagged incomplete
        rec.error = f"{type(exc).__name__}: {exc}"
        return rec
    # output iterate drawn uniformly from x_0 .. x_{T-1}
    idx = int(rng.integers(0, cfg.iterations))
    rec.x_hat_index, rec.x_hat = idx, rec.iterates[idx].copy()
    rec.complete = True
    return rec


def run_hpgd(problem: BilevelProblem, cfg: OuterConfig) -> RunRecord:
    """Stochastic hypergradient ascent with one oracle query per iteration."""
    oracles = _Oracles(problem, cfg.oracle)
    decomposable = isinstance(problem.loss, DecomposableUpperLoss)
    uloss = None if decomposable else problem.loss

    def step(t, x, rng, stepper):
        ctx = problem.sample_context(rng)
        before = oracles.solves
        oracle = oracles(x, ctx, rng)
        nu = _nu(cfg, oracle.cmdp.n_states)
        if decomposable:
            ascent, steps = _decomposable_ascent(x, ctx, problem.loss, oracle, cfg, rng)
        else:
            ascent = -hpgd_samples(x, ctx, uloss, oracle, nu, cfg.batch, rng).mean(0)
            steps = 0
        return stepper(x, ascent, oracle.iterations, oracles.solves - before, steps)

    return _loop(problem, cfg, step)


def _nu(cfg: OuterConfig, n_states: int) -> SamplingDistribution:
    if cfg.nu is None:
        return SamplingDistribution.uniform(n_states)
    return SamplingDistribution(np.asarray(cfg.nu, dtype=float))


def run_hpgd_rtq(problem: BilevelProblem, cfg: OuterConfig, vanilla: bool = False) -> RunRecord:
    """HPGD driven by soft Q-learning: randomly truncated, or plain at ``t_K``."""
    uloss = as_upper_loss(problem)
    n_states = problem.make_cmdp(problem.x0, problem.contexts[0]).n_states
    nu = _nu(cfg, n_states)

    def step(t, x, rng, stepper):
        if vanilla:
            g, inner = vanilla_softq_samples(x, problem, nu, cfg.rtq, cfg.batch, rng, uloss)
        else:
            g, _, inner = rtq_samples(x, problem, nu, cfg.rtq, cfg.batch, rng, uloss)
        return stepper(x, -g.mean(0), int(inner.sum()), cfg.batch, 0)

    return _loop(problem, cfg, step)


@dataclass
class AmdTables:
    Q: np.ndarray
    dQ: np.ndarray
    Qu: np.ndarray
    Qt: np.ndarray


def amd_sweeps(cmdp, rbar, drbar, tables: AmdTables, K: int) -> AmdTables:
    """``K`` synchronous updates of the coupled follower/leader recursions.

    ``Q`` follows soft value iteration, ``dQ`` its x-derivative at fixed
    policy, ``Qu`` the leader's Q-values, and ``Qt`` the total x-derivative
    of ``Qu`` including the policy's response.
    """
    lam, g, P = cmdp.lam, cmdp.gamma, cmdp.transition
    dlogP = cmdp.d_log_transition
    Q, dQ, Qu, Qt = tables.Q, tables.dQ, tables.Qu, tables.Qt
    P2 = P.reshape(-1, P.shape[-1])
    for _ in range(K):
        pi = softmax_policy(Q, lam)
        V = soft_max(Q, lam)
        dV = np.einsum("sa,sad->sd", pi, dQ)
        Vu = (pi * Qu).sum(1)
        Vt = np.einsum("sa,sad->sd", pi, Qt)
        Au = Qu - Vu[:, None]
        dA = dQ - dV[:, None, :]
        Q_new = cmdp.reward + g * P @ V
        dQ_new = cmdp.d_reward + g * (P2 @ dV).reshape(dQ.shape)
        Qu_new = rbar + g * P @ Vu
        Qt_new = drbar + Au[:, :, None] * dA / lam + g * (P2 @ Vt).reshape(Qt.shape)
        if dlogP is not None:
            dQ_new = dQ_new + g * np.einsum("sat,satd,t->sad", P, dlogP, V)
            Qt_new = Qt_new + g * np.einsum("sat,satd,t->sad", P, dlogP, Vu)
        Q, dQ, Qu, Qt = Q_new, dQ_new, Qu_new, Qt_new
    return AmdTables(Q, dQ, Qu, Qt)


def amd_gradient(cmdp, tables: AmdTables) -> np.ndarray:
    """Leader-return gradient read off the tables (start-distribution average)."""
    pi = softmax_policy(tables.Q, cmdp.lam)
    Vt = np.einsum("sa,sad->sd", pi, tables.Qt)
    g = cmdp.init_dist @ Vt
    if cmdp.has_init_grad:
        Vu = (pi * tables.Qu).sum(1)
        g = g + np.einsum("s,sd,s->d", cmdp.init_dist, cmdp.d_log_init, Vu)
    return g


def run_amd(problem: BilevelProblem, cfg: OuterConfig) -> RunRecord:
    """Full-model ascent with warm-started operator iterates per context."""
    if not isinstance(problem.loss, DecomposableUpperLoss):
        raise TypeError("AMD needs a decomposable leader loss")
    state = {}

    def step(t, x, rng, stepper):
        ctx = problem.sample_context(rng)
        cmdp = problem.make_cmdp(x, ctx)
        rbar, drbar = problem.loss.tables(x, ctx)
        S, A, d = cmdp.n_states, cmdp.n_actions, cmdp.dim
        tab = state.get(ctx.index)
        if tab is None:
            tab = AmdTables(np.zeros((S, A)), np.zeros((S, A, d)), np.zeros((S, A)),
                            np.zeros((S, A, d)))
        tab = amd_sweeps(cmdp, rbar, drbar, tab, cfg.amd_inner)
        state[ctx.index] = tab
        return stepper(x, amd_gradient(cmdp, tab), cfg.amd_inner, 0, 0)

    return _loop(problem, cfg, step)


def run_zero_order(problem: BilevelProblem, cfg: OuterConfig) -> RunRecord:
    """Gaussian-smoothing finite differences with perturbation ``u_t = C / t``."""
    uloss = as_upper_loss(problem)
    oracles = _Oracles(problem, cfg.oracle)

    def step(t, x, rng, stepper):
        ctx = problem.sample_context(rng)
        z = rng.standard_normal(problem.dim)
        u = cfg.zo_c / (t + 1)
        xp = x + u * z
        if problem.bounds is not None:
            xp = problem.bounds.project(xp)
        before = oracles.solves
        o0 = oracles(x, ctx, rng)
        o1 = oracles(xp, ctx, rng)
        f0 = uloss.value(x, o0.policy, ctx)
        f1 = uloss.value(xp, o1.policy, ctx)
        g = z * (f1 - f0) / u
        return stepper(x, -g, o0.iterations + o1.iterations, oracles.solves - before, 0)

    return _loop(problem, cfg, step)
