"""Tax design on a discretized household-wealth model.

The leader sets an income tax ``x`` and value-added taxes ``y_1..y_M``; the
leader vector is ``z = (x, y_1, ..., y_M)``. Households (one preference
vector per context) pick hours and consumption on a grid; wealth moves by
``(1 - x) w n - sum_i c_i`` plus Gaussian noise and is binned, with the
tails beyond the grid piled onto the boundary bins.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import ndtr

from cbrl.cmdp import Context, TabularCmdp
from cbrl.problem import BilevelProblem, Box, DecomposableUpperLoss

_SQRT_2PI = np.sqrt(2 * np.pi)


def _pdf(z):
    return np.exp(-0.5 * z * z) / _SQRT_2PI


def _interval_mass(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """``Phi(hi) - Phi(lo)`` evaluated on the side of the mean that keeps precision."""
    upper = lo > 0
    direct = ndtr(hi) - ndtr(lo)
    mirrored = ndtr(-lo) - ndtr(-hi)
    return np.where(upper, mirrored, direct)


@dataclass(frozen=True, eq=False)
class TaxDesignSpec:
    prices: tuple = (1.0, 1.0, 1.0)
    preferences: tuple = ((0.6, 0.3, 0.1), (0.1, 0.7, 0.2))
    n_wealth: int = 41
    wealth_range: tuple = (-100.0, 100.0)
    hours: tuple = tuple(np.linspace(0.0, 8.0, 5))
    consumption: tuple = tuple(np.linspace(0.0, 5.0, 3))
    noise_std: float = 5.0
    init_std: float = float(np.sqrt(2.0))
    theta: float = 0.1
    phi: float = 5.0
    wage: float = 1.0
    lam: float = 0.2
    gamma: float = 0.95
    revenue_floor: float = 1e-3
    lo: float = 0.0
    hi: float = 2.0
    z0: tuple = (0.3, 0.3, 0.3, 0.3)

    def __post_init__(self):
        M = len(self.prices)
        if any(len(a) != M for a in self.preferences):
            raise ValueError("preference vectors must match the number of goods")
        if self.n_wealth < 2 or self.noise_std <= 0 or self.phi <= 0 or self.lam <= 0:
            raise ValueError("invalid tax-design parameters")
        if not self.lo <= min(self.z0) <= max(self.z0) <= self.hi:
            raise ValueError("initial rates outside the box")

    @classmethod
    def full_grid(cls, **kw) -> "TaxDesignSpec":
        """Hours on 10 points and consumption on 5 points per good."""
        return cls(hours=tuple(np.linspace(0, 8, 10)), consumption=tuple(np.linspace(0, 5, 5)), **kw)

    @property
    def n_goods(self) -> int:
        return len(self.prices)

    @property
    def dim(self) -> int:
        return 1 + self.n_goods

    @property
    def wealth(self) -> np.ndarray:
        return np.linspace(*self.wealth_range, self.n_wealth)

    @property
    def edges(self) -> np.ndarray:
        w = self.wealth
        inner = 0.5 * (w[1:] + w[:-1])
        return np.concatenate([[-np.inf], inner, [np.inf]])

    @property
    def actions(self) -> np.ndarray:
        """Joint action grid, rows ``(n, c_1, ..., c_M)``."""
        grids = [self.hours] + [self.consumption] * self.n_goods
        return np.array(list(itertools.product(*grids)), dtype=float)

    @property
    def contexts(self) -> list:
        k = len(self.preferences)
        return [Context(i, 1.0 / k, payload=np.array(a)) for i, a in enumerate(self.preferences)]

    @property
    def box(self) -> Box:
        return Box(np.full(self.dim, self.lo), np.full(self.dim, self.hi))

    def init_dist(self) -> np.ndarray:
        z = self.edges / self.init_std
        return _interval_mass(z[:-1], z[1:])

    def wealth_value(self, s: np.ndarray) -> np.ndarray:
        """Household value of assets, ``max(0, log(s / 20 + 1))``."""
        s = np.asarray(s, dtype=float)
        return np.log1p(np.maximum(s, 0.0) / 20.0)

    def cobb_douglas(self, y, alpha) -> np.ndarray:
        """``prod_i (c_i / (p_i (1 + y_i)))^alpha_i`` per joint action."""
        c = self.actions[:, 1:]
        p = np.asarray(self.prices) * (1 + np.asarray(y, dtype=float))
        with np.errstate(divide="ignore"):
            logs = np.where(c > 0, np.log(np.where(c > 0, c, 1.0) / p), -np.inf)
        return np.exp((logs * np.asarray(alpha)).sum(1))


def _check(spec: TaxDesignSpec, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape != (spec.dim,):
        raise ValueError(f"leader vector must have shape ({spec.dim},)")
    if np.any(z < spec.lo - 1e-12) or np.any(z > spec.hi + 1e-12):
        raise ValueError("tax rates outside the configured box")
    return z


def tax_transition(spec: TaxDesignSpec, x: float):
    """Wealth kernel ``(S, A, S)`` and its ``x``-score ``dlog P / dx``."""
    acts = spec.actions
    n, spend = acts[:, 0], acts[:, 1:].sum(1)
    mean = spec.wealth[:, None] + (1 - x) * spec.wage * n[None, :] - spend[None, :]
    z = (spec.edges[None, None, :] - mean[:, :, None]) / spec.noise_std
    P = _interval_mass(z[..., :-1], z[..., 1:])
    P = np.maximum(P, 0.0)
    P /= P.sum(-1, keepdims=True)
    # dP/dmean = (pdf(z_lo) - pdf(z_hi)) / std; dmean/dx = -w n
    dP_dmean = (_pdf(z[..., :-1]) - _pdf(z[..., 1:])) / spec.noise_std
    dP = dP_dmean * (-spec.wage * n)[None, :, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        score = np.where(P > 1e-300, dP / P, 0.0)
    return P, score


def tax_design_cmdp(spec: TaxDesignSpec, z, ctx: Context) -> TabularCmdp:
    z = _check(spec, z)
    x, y = z[0], z[1:]
    alpha = np.asarray(spec.preferences[ctx.index])
    acts = spec.actions
    S, A, d = spec.n_wealth, len(acts), spec.dim
    cd = spec.cobb_douglas(y, alpha)
    reward = (spec.wealth_value(spec.wealth)[:, None] - spec.theta * acts[None, :, 0] ** 2
              + cd[None, :])
    d_reward = np.zeros((S, A, d))
    d_reward[:, :, 1:] = (-alpha[None, :] * cd[:, None] / (1 + y)[None, :])[None, :, :]
    P, score = tax_transition(spec, x)
    dlogP = np.zeros((S, A, S, d))
    dlogP[..., 0] = score
    return TabularCmdp(reward, P, spec.init_dist(), spec.gamma, spec.lam, d_reward, dlogP, None)


def tax_design_upper(spec: TaxDesignSpec, phi: Optional[float] = None) -> DecomposableUpperLoss:
    """Per-step social welfare as the leader reward.

    ``v = min(s, 0) + sum_i c_i / (1 + y_i) + phi log(revenue + eps0)`` with
    revenue ``sum_i c_i y_i / (1 + y_i) + w x n``.
    """
    phi = spec.phi if phi is None else phi
    if phi <= 0:
        raise ValueError("phi must be positive")
    acts = spec.actions
    n, c = acts[:, 0], acts[:, 1:]
    omega = np.minimum(spec.wealth, 0.0)

    def tables(z, ctx):
        z = _check(spec, z)
        x, y = z[0], z[1:]
        revenue = (c * (y / (1 + y))).sum(1) + spec.wage * x * n + spec.revenue_floor
        per_a = (c / (1 + y)).sum(1) + phi * np.log(revenue)
        rbar = omega[:, None] + per_a[None, :]
        d_a = np.empty((len(acts), spec.dim))
        d_a[:, 0] = phi * spec.wage * n / revenue
        d_a[:, 1:] = c / (1 + y) ** 2 * (phi / revenue[:, None] - 1.0)
        drbar = np.broadcast_to(d_a[None], (spec.n_wealth,) + d_a.shape).copy()
        return rbar, drbar

    return DecomposableUpperLoss(tables)


def tax_problem(spec: Optional[TaxDesignSpec] = None) -> BilevelProblem:
    spec = spec or TaxDesignSpec()
    return BilevelProblem(lambda z, ctx: tax_design_cmdp(spec, z, ctx), spec.contexts,
                          tax_design_upper(spec), np.array(spec.z0, dtype=float), spec.box,
                          name="tax-design", meta=spec)
