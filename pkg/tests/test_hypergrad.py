from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbrl.cmdp import TabularCmdp
from cbrl.envs.synthetic import bandit_problem, synthetic_cmdp
from cbrl.harness.checks import fd_gradient
from cbrl.hypergrad import (
    RtqConfig,
    SamplingDistribution,
    advantage_grad_batch,
    decomposable_samples,
    exact_best_response_jacobian,
    exact_dx_advantage,
    exact_dx_q,
    exact_hypergradient,
    exact_objective,
    grad_estimator,
    hpgd_gradient_sample,
    rtq_samples,
    vanilla_softq_samples,
)
from cbrl.problem import UpperLoss
from cbrl.solvers import SolverBudget, make_oracle, optimal_policy


def zero_grad_cmdp(cmdp: TabularCmdp) -> TabularCmdp:
    return TabularCmdp(cmdp.reward, cmdp.transition, cmdp.init_dist, cmdp.gamma, cmdp.lam,
                       np.zeros_like(cmdp.d_reward))


# ---------------------------------------------------------------- exact derivatives


def test_zero_derivative_tables_give_zero(cmdp3):
    c = zero_grad_cmdp(cmdp3)
    _, _, pi = optimal_policy(c)
    np.testing.assert_array_equal(exact_dx_q(c, pi), 0.0)
    est = advantage_grad_batch(c, pi, 0, [0, 1, 2], [0, 1, 0], np.random.default_rng(0))
    np.testing.assert_array_equal(est, 0.0)


def test_bandit_dq_and_jacobian():
    prob = bandit_problem(lam=1.0, gamma=1e-12, rho=0.0)
    c = prob.make_cmdp(np.zeros(1), prob.contexts[0])
    _, _, pi = optimal_policy(c)
    np.testing.assert_allclose(exact_dx_q(c, pi)[0], [[1.0], [0.0]], atol=1e-10)
    J = exact_best_response_jacobian(c, pi)
    assert J[0, 0, 0] == pytest.approx(0.25, abs=1e-10)
    assert J[0, 1, 0] == pytest.approx(-0.25, abs=1e-10)


def test_bandit_hypergradient():
    prob = bandit_problem(lam=1.0, gamma=1e-12, rho=0.0)
    assert exact_hypergradient(np.zeros(1), prob)[0] == pytest.approx(-0.25, abs=1e-10)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 500), st.floats(-1, 1), st.floats(-1, 1))
def test_jacobian_rows_stay_on_simplex(seed, x0, x1):
    fam = synthetic_cmdp(4, 3, 2, seed=seed)
    c = fam.cmdp(np.array([x0, x1]), fam.contexts[0])
    V, _, pi = optimal_policy(c)
    J = exact_best_response_jacobian(c, pi, V=V)
    np.testing.assert_allclose(J.sum(1), 0.0, atol=1e-10)
    dA = exact_dx_advantage(c, pi, V=V)
    np.testing.assert_allclose(np.einsum("sa,sad->sd", pi, dA), 0.0, atol=1e-10)


def test_policy_independent_loss_gives_partial(family):
    loss = UpperLoss(value=lambda x, pi, ctx: float(x @ x),
                     grad_x=lambda x, pi, ctx: 2 * x,
                     grad_pi=lambda x, pi, ctx: np.zeros((3, 2)))
    prob = family.problem()
    x = np.array([0.3, -0.1])
    np.testing.assert_allclose(exact_hypergradient(x, prob, loss=loss), 2 * x, atol=1e-14)


@pytest.mark.parametrize("decomposable", [False, True])
def test_exact_hypergradient_finite_differences(family, decomposable):
    prob = family.problem(decomposable=decomposable)
    x = np.array([0.4, -0.7])
    np.testing.assert_allclose(exact_hypergradient(x, prob), fd_gradient(prob, x), rtol=1e-6, atol=1e-9)


def test_exact_objective_is_minus_upper_return(family):
    from cbrl.optim import evaluate_upper_return
    prob = family.problem()
    x = np.array([0.2, 0.1])
    assert exact_objective(x, prob) == pytest.approx(-evaluate_upper_return(x, prob, tol=1e-12), abs=1e-10)


# ---------------------------------------------------------------- sampled estimators


def test_grad_estimator_is_seeded(cmdp3):
    oracle = make_oracle(cmdp3, SolverBudget("soft-vi", target_delta=1e-8))
    a = grad_estimator(cmdp3, 1, 0, oracle, np.random.default_rng(5))
    b = grad_estimator(cmdp3, 1, 0, oracle, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)
    assert a.shape == (2,)


@pytest.mark.parametrize("crn", [False, True])
def test_advantage_estimator_mean(cmdp3, crn):
    oracle = make_oracle(cmdp3, SolverBudget("soft-vi", target_delta=1e-8))
    n = 40000
    est = advantage_grad_batch(cmdp3, oracle.policy, 0, np.full(n, 2), np.full(n, 1),
                               np.random.default_rng(1), crn=crn)
    exact = exact_dx_advantage(cmdp3, oracle.policy)[2, 1]
    z = np.abs(est.mean(0) - exact) / (est.std(0, ddof=1) / math.sqrt(n))
    assert np.all(z < 4)


def test_zero_dimensional_parameter():
    fam = synthetic_cmdp(3, 2, 0, seed=1)
    c = fam.cmdp(np.zeros(0), fam.contexts[0])
    _, _, pi = optimal_policy(c)
    out = advantage_grad_batch(c, pi, 0, [0, 1], [0, 0], np.random.default_rng(0))
    assert out.shape == (2, 0)
    assert exact_hypergradient(np.zeros(0), fam.problem()).shape == (0,)


def test_decomposable_zero_leader_reward(cmdp3):
    _, _, pi = optimal_policy(cmdp3)
    out, steps = decomposable_samples(cmdp3, pi, np.zeros((3, 2)), np.zeros((3, 2, 2)), 500,
                                      np.random.default_rng(0))
    np.testing.assert_array_equal(out, 0.0)
    assert np.all(steps >= 1)


def test_decomposable_only_follower_term_without_leader_dependence(family):
    """Fixed dynamics and an ``x``-free leader reward leave only the advantage term."""
    x = np.array([0.2, 0.3])
    c = family.cmdp(x, family.contexts[0])
    c = TabularCmdp(c.reward, c.transition, c.init_dist, c.gamma, c.lam, c.d_reward)
    _, _, pi = optimal_policy(c)
    rbar = np.random.default_rng(2).normal(size=(3, 2))
    T = np.array([0, 3, 1])
    Tp = np.array([2, 0, 4])
    out, _ = decomposable_samples(c, pi, rbar, np.zeros((3, 2, 2)), 3, np.random.default_rng(7), (T, Tp))
    # same draws, zero follower reward derivative: all terms vanish
    c0 = zero_grad_cmdp(c)
    out0, _ = decomposable_samples(c0, pi, rbar, np.zeros((3, 2, 2)), 3, np.random.default_rng(7), (T, Tp))
    np.testing.assert_array_equal(out0, 0.0)
    assert np.abs(out).max() > 0


def test_decomposable_mean(family):
    prob = family.problem(decomposable=True)
    x = np.array([0.5, -0.5])
    ctx = prob.contexts[0]
    c = prob.make_cmdp(x, ctx)
    oracle = make_oracle(c, SolverBudget("soft-vi", target_delta=1e-10))
    rbar, drbar = prob.loss.tables(x, ctx)
    n = 100000
    out, _ = decomposable_samples(c, oracle.policy, rbar, drbar, n, np.random.default_rng(3))
    exact = -exact_hypergradient(x, prob)
    z = np.abs(out.mean(0) - exact) / (out.std(0, ddof=1) / math.sqrt(n))
    assert np.all(z < 4)


def test_hpgd_gradient_sample_metadata(family):
    prob = family.problem()
    nu = SamplingDistribution.uniform(3)
    budget = SolverBudget("soft-vi", target_delta=1e-6)
    est = hpgd_gradient_sample(np.zeros(2), prob, nu, lambda x, ctx: make_oracle(prob.make_cmdp(x, ctx), budget),
                               np.random.default_rng(0), n_samples=4)
    assert est.g.shape == (2,) and est.n_samples == 4 and est.variant == "hpgd"
    assert est.inner_iterations > 0


def test_sampling_distribution_validation():
    with pytest.raises(ValueError):
        SamplingDistribution(np.array([0.5, 0.6]))
    nu = SamplingDistribution.uniform(4)
    assert nu.m == pytest.approx(0.25)


# ---------------------------------------------------------------- RT-Q


def test_rtq_level_distribution():
    cfg = RtqConfig(K=6, c=50)
    p = cfg.level_probs
    assert p.sum() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(p[:-1] / p[1:], 2.0)
    np.testing.assert_array_equal(cfg.levels, [1, 2, 3, 4, 5])


def test_rtq_degenerate_two_levels():
    cfg = RtqConfig(K=2, c=1)
    np.testing.assert_array_equal(cfg.levels, [1])
    np.testing.assert_array_equal(cfg.level_probs, [1.0])
    assert cfg.expected_inner_iterations() == cfg.t(2)
    with pytest.raises(ValueError):
        RtqConfig(K=1)


def test_rtq_expected_cost():
    # levels 1..3 with p = (4, 2, 1)/7 and t_2, t_3, t_4 = 8, 24, 64
    assert RtqConfig(K=4, c=1).expected_inner_iterations() == pytest.approx(144 / 7, abs=1e-12)


def test_rtq_and_vanilla_agree(family):
    prob = family.problem()
    nu = SamplingDistribution.uniform(3)
    cfg = RtqConfig(K=3, c=10)
    x = np.array([0.5, -0.5])
    n = 20000
    g1, ks, inner = rtq_samples(x, prob, nu, cfg, n, np.random.default_rng(0))
    g2, inner2 = vanilla_softq_samples(x, prob, nu, cfg, n, np.random.default_rng(1))
    assert set(np.unique(ks)) <= {1, 2}
    np.testing.assert_array_equal(inner2, cfg.t(3))
    se = np.sqrt(g1.var(0, ddof=1) / n + g2.var(0, ddof=1) / n)
    assert np.all(np.abs(g1.mean(0) - g2.mean(0)) <= 4 * se)
    assert abs(inner.mean() - cfg.expected_inner_iterations()) <= 0.05 * cfg.expected_inner_iterations()
