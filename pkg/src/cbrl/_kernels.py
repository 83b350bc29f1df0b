"""Compiled inner loops for trajectory sampling and soft Q-learning.

Every kernel reseeds numba's generator from an explicit ``seed`` argument, so
results depend only on the inputs. Callers draw that seed from a
``numpy.random.Generator``.
"""
from __future__ import annotations

import numpy as np
from numba import njit


def categorical_cdf(probs: np.ndarray) -> np.ndarray:
    """Cumulative table along the last axis, safe for inverse-CDF sampling.

    Entries at and after the last positive probability are pinned to exactly
    1.0 so that a uniform draw in [0, 1) can never land on a zero-probability
    outcome through rounding.
    """
    probs = np.asarray(probs, dtype=np.float64)
    cdf = np.cumsum(probs, axis=-1)
    cdf /= cdf[..., -1:]
    positive = probs > 0
    # index of last positive entry along the last axis
    last = probs.shape[-1] - 1 - np.argmax(positive[..., ::-1], axis=-1)
    idx = np.arange(probs.shape[-1])
    cdf[idx >= last[..., None]] = 1.0
    return cdf


@njit(cache=True)
def _draw(cdf_row, u):
    n = cdf_row.shape[0]
    lo = 0
    hi = n - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if cdf_row[mid] > u:
            hi = mid
        else:
            lo = mid + 1
    return lo


@njit(cache=True)
def rollout(seed, P_cdf, pi_cdf, mu_cdf, pol_ids, start_s, start_a, lengths):
    """Sample a ragged batch of trajectories.

    ``start_s[i] < 0`` draws the first state from ``mu_cdf``;
    ``start_a[i] < 0`` draws the first action from the policy.
    Returns flat ``states`` and ``actions`` of size ``lengths.sum()``.
    """
    np.random.seed(seed)
    n = lengths.shape[0]
    total = 0
    for i in range(n):
        total += lengths[i]
    states = np.empty(total, dtype=np.int64)
    actions = np.empty(total, dtype=np.int64)
    pos = 0
    for i in range(n):
        pid = pol_ids[i]
        s = start_s[i]
        if s < 0:
            s = _draw(mu_cdf, np.random.random())
        for t in range(lengths[i]):
            if t == 0 and start_a[i] >= 0:
                a = start_a[i]
            else:
                a = _draw(pi_cdf[pid, s], np.random.random())
            states[pos] = s
            actions[pos] = a
            pos += 1
            s = _draw(P_cdf[s, a], np.random.random())
    return states, actions


@njit(cache=True)
def _soft_max_value(row, lam):
    m = row[0]
    for j in range(1, row.shape[0]):
        if row[j] > m:
            m = row[j]
    acc = 0.0
    for j in range(row.shape[0]):
        acc += np.exp((row[j] - m) / lam)
    return m + lam * np.log(acc)


@njit(cache=True)
def soft_q_runs(seed, P_cdf, reward, gamma, lam, beh_cdf, mu_cdf, h, t0,
                totals, checkpoints):
    """Independent asynchronous soft Q-learning runs along behaviour trajectories.

    ``totals[i]`` is the number of updates of run ``i``; ``checkpoints[i]``
    lists nondecreasing update counts at which the Q table is copied out;
    rows may be right-padded with -1. Returns an array of shape (n, C, S, A).
    """
    np.random.seed(seed)
    n = totals.shape[0]
    n_ck = checkpoints.shape[1]
    S = reward.shape[0]
    A = reward.shape[1]
    out = np.zeros((n, n_ck, S, A))
    for i in range(n):
        Q = np.zeros((S, A))
        s = _draw(mu_cdf, np.random.random())
        ck = 0
        while ck < n_ck and checkpoints[i, ck] == 0:
            ck += 1
        for t in range(totals[i]):
            a = _draw(beh_cdf[s], np.random.random())
            s2 = _draw(P_cdf[s, a], np.random.random())
            target = reward[s, a] + gamma * _soft_max_value(Q[s2], lam)
            Q[s, a] += h / (t + t0) * (target - Q[s, a])
            s = s2
            while ck < n_ck and checkpoints[i, ck] == t + 1:
                out[i, ck] = Q
                ck += 1
    return out


@njit(cache=True)
def _softmax_row(theta_row, out):
    m = theta_row[0]
    for j in range(1, theta_row.shape[0]):
        if theta_row[j] > m:
            m = theta_row[j]
    z = 0.0
    for j in range(theta_row.shape[0]):
        out[j] = np.exp(theta_row[j] - m)
        z += out[j]
    for j in range(theta_row.shape[0]):
        out[j] /= z


@njit(cache=True)
def _row_entropy(p):
    h = 0.0
    for j in range(p.shape[0]):
        if p[j] > 0:
            h -= p[j] * np.log(p[j])
    return h


@njit(cache=True)
def pg_run(seed, P_cdf, reward, gamma, lam, mu_cdf, theta, iters, step, regularized):
    """Stochastic softmax policy gradient with geometric horizons.

    Each iteration draws ``T ~ Geo(1-gamma)`` and rolls the current policy
    to ``(s_T, a_T)``; the action value there is estimated without bias from a
    ``Geo(1-sqrt(gamma))`` continuation with weights ``gamma^(t/2)``. With
    ``regularized`` the entropy bonus enters both the continuation rewards
    and, in closed form, the update at ``s_T``. ``theta`` is updated in place.
    """
    np.random.seed(seed)
    S = reward.shape[0]
    A = reward.shape[1]
    p_stop = 1.0 - gamma
    p_stop_half = 1.0 - np.sqrt(gamma)
    sq = np.sqrt(gamma)
    pi = np.empty(A)
    for _ in range(iters):
        s = _draw(mu_cdf, np.random.random())
        _softmax_row(theta[s], pi)
        a = _draw(np.cumsum(pi), np.random.random())
        while np.random.random() >= p_stop:
            s = _draw(P_cdf[s, a], np.random.random())
            _softmax_row(theta[s], pi)
            a = _draw(np.cumsum(pi), np.random.random())
        sT = s
        aT = a
        _softmax_row(theta[sT], pi)
        piT = pi.copy()
        q = reward[sT, aT]
        w = 1.0
        s2 = sT
        a2 = aT
        while np.random.random() >= p_stop_half:
            s2 = _draw(P_cdf[s2, a2], np.random.random())
            _softmax_row(theta[s2], pi)
            a2 = _draw(np.cumsum(pi), np.random.random())
            w *= sq
            q += w * reward[s2, a2]
            if regularized:
                q += w * lam * _row_entropy(pi)
        scale = step / (1.0 - gamma)
        for b in range(A):
            grad_log = -piT[b]
            if b == aT:
                grad_log += 1.0
            theta[sT, b] += scale * grad_log * q
        if regularized:
            h = _row_entropy(piT)
            for b in range(A):
                if piT[b] > 0:
                    theta[sT, b] -= scale * lam * piT[b] * (np.log(piT[b]) + h)
    return theta


def sparse_rows(P: np.ndarray):
    """Padded sparse form of a ``(S, A, S)`` kernel: column indices and values."""
    nnz = (P > 0).sum(-1)
    k = max(1, int(nnz.max()))
    order = np.argsort(~(P > 0), axis=-1, kind="stable")[..., :k]
    vals = np.take_along_axis(P, order, axis=-1)
    return order.astype(np.int64), vals


@njit(cache=True)
def soft_vi(cols, vals, reward, gamma, lam, V0, n_sweeps, tol):
    """Soft value iteration on a padded sparse kernel.

    Runs ``n_sweeps`` sweeps when ``tol <= 0``; otherwise stops as soon as
    ``gamma / (1 - gamma) * max|V_new - V| <= tol`` (or after ``n_sweeps``).
    Returns ``(V, sweeps_done, converged)``.
    """
    S, A, K = cols.shape
    V = V0.copy()
    Vn = np.empty(S)
    q = np.empty(A)
    factor = gamma / (1.0 - gamma)
    for it in range(n_sweeps):
        diff = 0.0
        for s in range(S):
            m = -np.inf
            for a in range(A):
                acc = 0.0
                for j in range(K):
                    acc += vals[s, a, j] * V[cols[s, a, j]]
                q[a] = reward[s, a] + gamma * acc
                if q[a] > m:
                    m = q[a]
            z = 0.0
            for a in range(A):
                z += np.exp((q[a] - m) / lam)
            Vn[s] = m + lam * np.log(z)
            d = abs(Vn[s] - V[s])
            if d > diff:
                diff = d
        V[:] = Vn
        if tol > 0 and factor * diff <= tol:
            return V, it + 1, True
    return V, n_sweeps, tol <= 0
