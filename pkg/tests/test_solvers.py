from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbrl.cmdp import TabularCmdp, evaluate_soft, soft_max, softmax_policy
from cbrl.envs.synthetic import synthetic_cmdp
from cbrl.solvers import (
    SolverBudget,
    budget_iterations,
    checkpoint_schedule,
    exact_pg_gradient,
    make_oracle,
    npg,
    optimal_policy,
    soft_q_learning,
    soft_value_iteration,
    vanilla_pg,
)
from conftest import one_state


def test_budget_validation():
    with pytest.raises(ValueError):
        SolverBudget("dqn", iterations=1)
    with pytest.raises(ValueError):
        SolverBudget("soft-vi")
    with pytest.raises(ValueError):
        SolverBudget("soft-vi", iterations=0)
    with pytest.raises(ValueError):
        SolverBudget("soft-vi", target_delta=2.0)


def test_checkpoint_schedule():
    assert [checkpoint_schedule(1, j) for j in (1, 2, 3, 4)] == [2, 8, 24, 64]
    assert checkpoint_schedule(50, 1) == 100


# ---------------------------------------------------------------- soft value iteration


def test_soft_vi_bandit_closed_form():
    c = one_state([[1.0, 0.0]], gamma=0.5, lam=1.0)
    V, pi, n = soft_value_iteration(c, T=200)
    assert n == 200
    assert V[0] == pytest.approx(2 * math.log(1 + math.e), abs=1e-12)
    assert V[0] == pytest.approx(2.6265234, abs=1e-7)
    np.testing.assert_allclose(pi, softmax_policy(np.array([[1.0, 0.0]]) + 0.5 * V[0], 1.0), atol=1e-12)


def test_soft_vi_one_sweep_gamma_zero():
    r = np.array([[0.2, -0.4, 1.0]])
    c = one_state(r, gamma=1e-300, lam=0.3)
    V, _, _ = soft_value_iteration(c, T=1)
    assert V[0] == pytest.approx(soft_max(r, 0.3)[0], abs=1e-14)


def test_soft_vi_exactly_one_of_T_tol(cmdp3):
    with pytest.raises(ValueError):
        soft_value_iteration(cmdp3)
    with pytest.raises(ValueError):
        soft_value_iteration(cmdp3, T=3, tol=1e-3)


def test_soft_vi_fixed_point(cmdp3):
    V, Q, pi = optimal_policy(cmdp3, tol=1e-12)
    np.testing.assert_allclose(soft_max(Q, cmdp3.lam), V, atol=1e-10)
    # the optimal soft policy's own soft value is V*
    np.testing.assert_allclose(evaluate_soft(cmdp3, pi, tol=1e-13).V, V, atol=1e-9)


def test_soft_vi_warm_start_saves_sweeps(cmdp3):
    V, _, cold = soft_value_iteration(cmdp3, tol=1e-10)
    _, _, warm = soft_value_iteration(cmdp3, tol=1e-10, V0=V + 1e-6)
    assert warm < cold


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 200), st.integers(1, 30))
def test_soft_vi_contracts(seed, T):
    fam = synthetic_cmdp(5, 3, 1, seed=seed)
    c = fam.cmdp(np.array([0.3]), fam.contexts[0])
    Vstar, _, _ = optimal_policy(c)
    V1, _, _ = soft_value_iteration(c, T=T)
    V2, _, _ = soft_value_iteration(c, T=T + 1)
    e1, e2 = np.abs(V1 - Vstar).max(), np.abs(V2 - Vstar).max()
    assert e2 <= c.gamma * e1 + 1e-11


# ---------------------------------------------------------------- soft Q-learning


def test_soft_q_single_action():
    c = one_state([[1.0]], gamma=0.5)
    Q, _, _ = soft_q_learning(c, SolverBudget("soft-q", iterations=10**5), rng=np.random.default_rng(0))
    assert abs(Q[0, 0] - 2.0) <= 0.05


def test_soft_q_large_temperature_is_uniform():
    c = one_state([[1.0, 0.0]], gamma=0.5, lam=50.0)
    _, pi, _ = soft_q_learning(c, SolverBudget("soft-q", iterations=10**5), rng=np.random.default_rng(0))
    np.testing.assert_allclose(pi, 0.5, atol=0.01)


def test_soft_q_three_state(cmdp3):
    _, pi_star, _ = soft_value_iteration(cmdp3, T=2000)
    _, pi, _ = soft_q_learning(cmdp3, SolverBudget("soft-q", iterations=2 * 10**5),
                               rng=np.random.default_rng(0))
    assert np.abs(pi - pi_star).max() <= 0.05


def test_soft_q_checkpoints(cmdp3):
    budget = SolverBudget("soft-q", iterations=300)
    Q, _, ck = soft_q_learning(cmdp3, budget, checkpoints=[0, 100, 300], rng=np.random.default_rng(1))
    assert ck.iterations == (0, 100, 300)
    np.testing.assert_array_equal(ck.Q[0], 0.0)
    np.testing.assert_array_equal(ck.Q[2], Q)
    with pytest.raises(ValueError):
        soft_q_learning(cmdp3, budget, checkpoints=[200, 100], rng=np.random.default_rng(1))
    with pytest.raises(ValueError):
        soft_q_learning(cmdp3, budget, checkpoints=[400], rng=np.random.default_rng(1))


# ---------------------------------------------------------------- policy gradient


def test_vanilla_pg_bandit():
    c = one_state([[1.0, 0.0]], gamma=0.5, lam=0.1)
    target = softmax_policy(np.array([[1.0, 0.0]]), 0.1)[0, 0]
    assert target == pytest.approx(0.9999546, abs=1e-7)
    pi = vanilla_pg(c, SolverBudget("vanilla-pg", iterations=10**5, pg_step=0.1), np.random.default_rng(0))
    assert abs(pi[0, 0] - target) <= 0.05


def test_vanilla_pg_zero_reward_stays_uniform(cmdp3):
    c = TabularCmdp(np.zeros((3, 2)), cmdp3.transition, cmdp3.init_dist, cmdp3.gamma, cmdp3.lam,
                    cmdp3.d_reward)
    budget = SolverBudget("vanilla-pg", iterations=10**4, pg_regularized=False)
    pi = vanilla_pg(c, budget, np.random.default_rng(0))
    np.testing.assert_array_equal(pi, 0.5)


def test_exact_pg_gradient_matches_finite_differences(cmdp3):
    from cbrl.cmdp import lower_objective
    theta = np.random.default_rng(0).normal(size=(3, 2))
    g = exact_pg_gradient(cmdp3, theta)
    eps = 1e-6
    fd = np.zeros_like(theta)
    for idx in np.ndindex(theta.shape):
        e = np.zeros_like(theta)
        e[idx] = eps
        fd[idx] = (lower_objective(cmdp3, softmax_policy(theta + e, 1.0), 1e-13)
                   - lower_objective(cmdp3, softmax_policy(theta - e, 1.0), 1e-13)) / (2 * eps)
    np.testing.assert_allclose(g, fd, atol=1e-7)


def test_exact_pg_ascends(cmdp3):
    from cbrl.cmdp import lower_objective
    _, _, pi_star = optimal_policy(cmdp3)
    pi = vanilla_pg(cmdp3, SolverBudget("vanilla-pg", iterations=2000, pg_step=0.5), exact=True)
    assert lower_objective(cmdp3, pi) == pytest.approx(lower_objective(cmdp3, pi_star), abs=1e-4)


# ---------------------------------------------------------------- natural policy gradient


def test_npg_max_step_is_soft_policy_iteration():
    c = one_state([[1.0, 0.0]], gamma=0.5, lam=0.5)
    pi1 = npg(c, SolverBudget("npg", iterations=1))
    Q0 = evaluate_soft(c, np.full((1, 2), 0.5), tol=1e-13).Q
    np.testing.assert_allclose(pi1, softmax_policy(Q0, c.lam), atol=1e-12)


def test_npg_converges(cmdp3):
    _, _, pi_star = optimal_policy(cmdp3)
    pi = npg(cmdp3, SolverBudget("npg", iterations=60, eta=0.5 * (1 - cmdp3.gamma) / cmdp3.lam))
    assert np.abs(pi - pi_star).max() < 1e-6


def test_npg_rejects_large_step(cmdp3):
    with pytest.raises(ValueError):
        npg(cmdp3, SolverBudget("npg", iterations=2, eta=10.0))


# ---------------------------------------------------------------- oracle


def test_oracle_bandit_accuracy():
    c = one_state([[1.0, 0.0]], gamma=0.5, lam=1.0)
    V, Q, pi_star = optimal_policy(c, tol=1e-14)
    # closed form: pi* = softmax(Q*/lam) with Q* = r + gamma V*
    V_closed = 2 * math.log(1 + math.e)
    np.testing.assert_allclose(pi_star, softmax_policy(np.array([[1.0, 0.0]]) + 0.5 * V_closed, 1.0),
                               atol=1e-12)
    oracle = make_oracle(c, SolverBudget("soft-vi", target_delta=1e-6))
    assert np.abs(oracle.policy - pi_star).max() <= 1e-6
    assert oracle.accuracy_hint == 1e-6 and oracle.iterations > 0


def test_budget_iterations_soft_vi():
    c = one_state([[1.0, 0.0]], gamma=0.5, lam=1.0)
    T = budget_iterations(c, SolverBudget("soft-vi", target_delta=1e-6))
    _, pi, _ = soft_value_iteration(c, T=T)
    _, _, pi_star = optimal_policy(c, tol=1e-14)
    assert np.abs(pi - pi_star).max() <= 1e-6


@pytest.mark.parametrize("variant", ["soft-vi", "soft-q", "vanilla-pg", "npg"])
def test_oracle_determinism(cmdp3, variant):
    budget = SolverBudget(variant, iterations=500)
    a = make_oracle(cmdp3, budget, np.random.default_rng(3))
    b = make_oracle(cmdp3, budget, np.random.default_rng(3))
    np.testing.assert_array_equal(a.policy, b.policy)
    assert np.all(a.policy > 0)
    np.testing.assert_allclose(a.policy.sum(-1), 1.0)


def test_oracle_sampling(cmdp3):
    oracle = make_oracle(cmdp3, SolverBudget("soft-vi", iterations=50))
    tr = oracle.sample(0, 10, np.random.default_rng(0))
    assert len(tr) == 10 and tr.states[0] == 0
