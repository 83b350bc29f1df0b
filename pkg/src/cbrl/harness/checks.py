"""Property suites with measured statistics, shared by the CLI and the tests."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from cbrl.envs.four_rooms import four_rooms_problem
from cbrl.envs.synthetic import synthetic_cmdp
from cbrl.hypergrad import (
    RtqConfig,
    SamplingDistribution,
    advantage_grad_batch,
    decomposable_samples,
    exact_dx_advantage,
    exact_hypergradient,
    exact_objective,
    rtq_samples,
    vanilla_softq_samples,
)
from cbrl.optim import OuterConfig, run
from cbrl.solvers import SolverBudget, make_oracle, npg, optimal_policy, soft_q_learning

SUITES = ("gradients", "unbiasedness", "decomposable", "rtq-mean", "rtq-cost", "rtq-variance",
          "contraction", "softq-rate", "npg-rate", "query-count")

TEST_X = np.array([0.5, -0.5])


@dataclass
class CheckResult:
    suite: str
    invariant: str
    passed: bool
    stats: dict = field(default_factory=dict)

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        body = ", ".join(f"{k}={_short(v)}" for k, v in self.stats.items())
        return f"[{tag}] {self.suite}: {self.invariant} ({body})"

    def as_dict(self) -> dict:
        return {"suite": self.suite, "invariant": self.invariant, "passed": bool(self.passed),
                "stats": {k: _plain(v) for k, v in self.stats.items()}}


def _short(v) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def _plain(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    return v


def test_family(seed: int = 0):
    """The seeded 3-state, 2-action, 2-parameter instance used throughout."""
    return synthetic_cmdp(3, 2, 2, seed=seed)


def _max_z(mean, exact, se) -> float:
    se = np.maximum(se, 1e-300)
    return float(np.max(np.abs(mean - exact) / se))


# --------------------------------------------------------------------------
# hypergradient correctness


def fd_gradient(problem, x, eps: float = 1e-4, tol: float = 1e-12) -> np.ndarray:
    g = np.zeros(problem.dim)
    for i in range(problem.dim):
        e = np.zeros(problem.dim)
        e[i] = eps
        g[i] = (exact_objective(x + e, problem, tol) - exact_objective(x - e, problem, tol)) / (2 * eps)
    return g


def check_gradients(n_points: int = 5, eps: float = 1e-4, rel_tol: float = 1e-3, seed: int = 0,
                    four_rooms: bool = True) -> list:
    rng = np.random.default_rng(seed)
    fam = test_family()
    problems = [("synthetic", fam.problem()), ("synthetic-decomposable", fam.problem(decomposable=True))]
    if four_rooms:
        problems.append(("four-rooms", four_rooms_problem()))
    out = []
    for name, prob in problems:
        errs = []
        for _ in range(n_points):
            x = rng.standard_normal(prob.dim)
            g = exact_hypergradient(x, prob, 1e-12)
            fd = fd_gradient(prob, x, eps)
            errs.append(float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-300)))
        worst = max(errs)
        out.append(CheckResult("gradients", f"exact vs finite differences on {name}",
                               worst <= rel_tol, {"max_rel_err": worst, "points": n_points}))
    return out


def check_unbiasedness(samples: int = 10**5, seed: int = 0, z_max: float = 3.0) -> list:
    """Advantage-derivative estimator against the exact derivative at every (s, a)."""
    cmdp = test_family().cmdp(TEST_X, test_family().contexts[0])
    oracle = make_oracle(cmdp, SolverBudget("soft-vi", target_delta=1e-8))
    pi = oracle.policy
    exact = exact_dx_advantage(cmdp, pi, tol=1e-13)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for s in range(cmdp.n_states):
        for a in range(cmdp.n_actions):
            est = advantage_grad_batch(cmdp, pi, 0, np.full(samples, s), np.full(samples, a), rng)
            se = est.std(0, ddof=1) / math.sqrt(samples)
            worst = max(worst, _max_z(est.mean(0), exact[s, a], se))
    return [CheckResult("unbiasedness", "advantage-derivative mean within 3 SE at every (s,a)",
                        worst <= z_max, {"max_z": worst, "samples": samples})]


def check_decomposable(samples: int = 10**6, seed: int = 0, z_max: float = 3.0) -> list:
    """Trajectory estimator for a decomposable loss against the exact hypergradient."""
    fam = test_family()
    prob = fam.problem(decomposable=True)
    ctx = prob.contexts[0]
    cmdp = prob.make_cmdp(TEST_X, ctx)
    _, _, pi = optimal_policy(cmdp, 1e-13)
    rbar, drbar = prob.loss.tables(TEST_X, ctx)
    rng = np.random.default_rng(seed)
    out, _ = decomposable_samples(cmdp, pi, rbar, drbar, samples, rng)
    target = -exact_hypergradient(TEST_X, prob, 1e-13)
    se = out.std(0, ddof=1) / math.sqrt(samples)
    z = _max_z(out.mean(0), target, se)
    return [CheckResult("decomposable", "trajectory estimator mean within 3 SE of the exact gradient",
                        z <= z_max, {"max_z": z, "samples": samples})]


# --------------------------------------------------------------------------
# randomly truncated soft Q-learning


def check_rtq_mean(samples: int = 10**5, K: int = 4, c: float = 50.0, seed: int = 0,
                   z_max: float = 3.0) -> list:
    prob = test_family().problem()
    nu = SamplingDistribution.uniform(3)
    cfg = RtqConfig(K=K, c=c)
    rng = np.random.default_rng(seed)
    g1, _, _ = rtq_samples(TEST_X, prob, nu, cfg, samples, rng)
    g2, _ = vanilla_softq_samples(TEST_X, prob, nu, cfg, samples, rng)
    se = np.sqrt(g1.var(0, ddof=1) / samples + g2.var(0, ddof=1) / samples)
    z = _max_z(g1.mean(0), g2.mean(0), se)
    return [CheckResult("rtq-mean", f"RT-Q and soft-Q at t_K agree within 3 pooled SE (K={K})",
                        z <= z_max, {"max_z": z, "samples": samples,
                                     "rtq_std": float(np.sqrt(g1.var(0).sum())),
                                     "vanilla_std": float(np.sqrt(g2.var(0).sum()))})]


def check_rtq_cost(draws: int = 1000, K: int = 4, c: float = 50.0, seed: int = 0,
                   rel_tol: float = 0.05) -> list:
    prob = test_family().problem()
    cfg = RtqConfig(K=K, c=c)
    rng = np.random.default_rng(seed)
    _, _, inner = rtq_samples(TEST_X, prob, SamplingDistribution.uniform(3), cfg, draws, rng)
    expected = cfg.expected_inner_iterations()
    rel = abs(inner.mean() - expected) / expected
    return [CheckResult("rtq-cost", "mean inner iterations within 5% of sum_k p_k t_(k+1)",
                        rel <= rel_tol, {"measured": float(inner.mean()), "expected": expected,
                                         "rel_err": float(rel), "draws": draws})]


def _sample_variance_se(g: np.ndarray) -> tuple:
    n = len(g)
    c = g - g.mean(0)
    v = (c**2).sum(0) / (n - 1)
    m4 = (c**4).mean(0)
    return v, np.sqrt(np.maximum(m4 - v**2, 0) / n)


def check_rtq_variance(samples: int = 20000, Ks=(2, 3, 4, 5, 6), c: float = 50.0, seed: int = 0,
                       level: float = 1.6448536269514722) -> list:
    """Per-coordinate variance vs ``K`` fitted as ``v_K = A K^p``.

    The exponent is estimated by weighted least squares on ``log v_K`` (the
    covariance is inflated by the reduced chi-square when the fit is poor);
    quadratic growth is rejected when ``p + level * se(p) < 2`` (one-sided 95%).
    """
    prob = test_family().problem()
    nu = SamplingDistribution.uniform(3)
    V, S = [], []
    for K in Ks:
        rng = np.random.default_rng(seed + K)
        g, _, _ = rtq_samples(TEST_X, prob, nu, RtqConfig(K=K, c=c), samples, rng)
        v, se = _sample_variance_se(g)
        V.append(v)
        S.append(se)
    V, S = np.array(V), np.array(S)
    X = np.stack([np.ones(len(Ks)), np.log(np.asarray(Ks, dtype=float))], axis=1)
    exps, uppers = [], []
    for j in range(V.shape[1]):
        y = np.log(V[:, j])
        w = (V[:, j] / S[:, j]) ** 2
        cov = np.linalg.inv(X.T @ (X * w[:, None]))
        beta = cov @ (X.T @ (w * y))
        chi2 = float(np.sum(w * (y - X @ beta) ** 2)) / (len(Ks) - 2)
        se_p = math.sqrt(cov[1, 1] * max(chi2, 1.0))
        exps.append(float(beta[1]))
        uppers.append(float(beta[1] + level * se_p))
    return [CheckResult("rtq-variance", "variance grows at most linearly in K (quadratic rejected)",
                        max(uppers) < 2.0, {"exponents": exps, "upper_95": uppers,
                                            "variances": V.sum(1)})]


# --------------------------------------------------------------------------
# lower-level rates


def check_contraction(sweeps: int = 200, seed: int = 0) -> list:
    """Soft value iteration error shrinks by at least gamma per sweep."""
    from cbrl.solvers import soft_value_iteration

    fam = test_family(seed)
    cmdp = fam.cmdp(TEST_X, fam.contexts[0])
    Vstar, _, _ = optimal_policy(cmdp, 1e-14)
    V = np.zeros(cmdp.n_states)
    worst = 0.0
    ok = True
    for _ in range(sweeps):
        e0 = np.abs(V - Vstar).max()
        V, _, _ = soft_value_iteration(cmdp, T=1, V0=V)
        e1 = np.abs(V - Vstar).max()
        if e0 < 1e-11:
            break
        ratio = e1 / e0
        worst = max(worst, ratio)
        ok &= e1 <= cmdp.gamma * e0 + 1e-13
    return [CheckResult("contraction", "soft-VI error contracts by gamma per sweep", bool(ok),
                        {"max_ratio": worst, "gamma": cmdp.gamma})]


def check_softq_rate(T: int = 200000, seeds: int = 20, tol: float = 0.05, need: int = 18) -> list:
    fam = test_family()
    cmdp = fam.cmdp(TEST_X, fam.contexts[0])
    _, _, pi_star = optimal_policy(cmdp, 1e-13)
    errs = []
    for s in range(seeds):
        _, pi, _ = soft_q_learning(cmdp, SolverBudget("soft-q", iterations=T), (),
                                   np.random.default_rng(s))
        errs.append(float(np.abs(pi - pi_star).max()))
    good = sum(e <= tol for e in errs)
    return [CheckResult("softq-rate", f"soft-Q at T={T} within {tol} of pi* on >= {need}/{seeds} seeds",
                        good >= need, {"passing_seeds": good, "max_err": max(errs),
                                       "median_err": float(np.median(errs))})]


def check_npg_rate(iterations: int = 60, eta_fraction: float = 0.5, slack: float = 0.05) -> list:
    """Slope of ``log ||log pi_t - log pi*||_inf`` for exact NPG on a seeded 4-state instance."""
    fam = synthetic_cmdp(4, 2, 2, seed=0)
    cmdp = fam.cmdp(TEST_X, fam.contexts[0])
    _, _, pi_star = optimal_policy(cmdp, 1e-14)
    eta = eta_fraction * (1 - cmdp.gamma) / cmdp.lam
    _, hist = npg(cmdp, SolverBudget("npg", iterations=iterations, eta=eta), history=True)
    err = np.array([np.abs(np.log(p) - np.log(pi_star)).max() for p in hist])
    keep = err > 1e-10
    t = np.arange(len(err))[keep]
    slope = float(np.polyfit(t, np.log(err[keep]), 1)[0])
    bound = math.log(1 - eta * cmdp.lam)
    return [CheckResult("npg-rate", "NPG log-error slope at most log(1 - eta lam) + 0.05",
                        slope <= bound + slack, {"slope": slope, "bound": bound, "points": int(keep.sum())})]


# --------------------------------------------------------------------------
# outer-loop accounting


def check_query_count(iterations: int = 20) -> list:
    prob = test_family().problem()
    out = []
    for alg, want in (("hpgd", 1), ("zero-order", 2)):
        rec = run(prob, OuterConfig(alg, iterations=iterations, step=0.05, seed=0,
                                    eval_every=iterations))
        counts = sorted(set(rec.oracle_solves))
        out.append(CheckResult("query-count", f"{alg} makes exactly {want} lower-level solve(s) per step",
                               rec.complete and counts == [want], {"solves_per_step": counts}))
    return out


def run_suite(name: str, **kw) -> list:
    fns = {
        "gradients": check_gradients,
        "unbiasedness": check_unbiasedness,
        "decomposable": check_decomposable,
        "rtq-mean": check_rtq_mean,
        "rtq-cost": check_rtq_cost,
        "rtq-variance": check_rtq_variance,
        "contraction": check_contraction,
        "softq-rate": check_softq_rate,
        "npg-rate": check_npg_rate,
        "query-count": check_query_count,
    }
    if name not in fns:
        raise KeyError(f"unknown suite {name!r}; expected one of {SUITES}")
    return fns[name](**kw)

