"""Quadratic price functions, marginal prices and queueing externalities."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .errors import DomainError, ParameterError

if TYPE_CHECKING:  # pragma: no cover
    from .solver import ScenarioConfig


@dataclass(frozen=True, eq=False)
class ServerCost:
    """Piecewise-constant nondecreasing operating-cost rate with knots at ``times``."""

    times: np.ndarray
    rates: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, float)
        r = np.asarray(self.rates, float)
        if t.ndim != 1 or t.shape != r.shape or t.size == 0:
            raise ParameterError("times/rates must be matching 1-d arrays")
        if t[0] != 0.0:
            raise ParameterError("first cost knot must be at time 0")
        if t.size > 1 and not np.all(np.diff(t) > 0.0):
            raise ParameterError("cost knot times must be strictly increasing")
        if np.any(r < 0.0) or np.any(np.diff(r) < 0.0):
            raise ParameterError("cost rates must be nonnegative and nondecreasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "rates", r)
        # prefix integrals at the knots, for exact piecewise-linear evaluation
        seg = self.rates[:-1] * np.diff(self.times) if t.size > 1 else np.array([])
        object.__setattr__(self, "_prefix", np.concatenate([[0.0], np.cumsum(seg)]))

    @staticmethod
    def zero() -> "ServerCost":
        return ServerCost(np.array([0.0]), np.array([0.0]))

    def is_zero(self) -> bool:
        return bool(np.all(self.rates == 0.0))

    def rate(self, s):
        """Right-continuous cost rate at service age ``s``."""
        idx = np.searchsorted(self.times, np.asarray(s, float), side="right") - 1
        return self.rates[np.maximum(idx, 0)]

    def integral(self, s):
        """Exact integral of the cost rate over [0, s]."""
        s = np.asarray(s, float)
        idx = np.maximum(np.searchsorted(self.times, s, side="right") - 1, 0)
        return self._prefix[idx] + self.rates[idx] * (s - self.times[idx])


@dataclass(frozen=True)
class PriceFunction:
    """p(s) = pi + linear_coeff*s + quad_coeff*s^2 + operating cost integral."""

    pi: float
    linear_coeff: float
    quad_coeff: float
    xi: ServerCost

    def __post_init__(self):
        if not self.quad_coeff > 0.0:
            raise ParameterError("quadratic coefficient must be positive")
        if self.linear_coeff < 0.0:
            raise ParameterError("linear coefficient must be nonnegative")

    def price(self, s):
        s = np.asarray(s, float)
        out = self.pi + self.linear_coeff * s + self.quad_coeff * s**2 + self.xi.integral(s)
        return float(out) if out.ndim == 0 else out

    def marginal(self, s):
        s = np.asarray(s, float)
        out = self.linear_coeff + 2.0 * self.quad_coeff * s + self.xi.rate(s)
        return float(out) if out.ndim == 0 else out

    @property
    def drift(self) -> float:
        """Slope of the non-cost marginal price, used by the stopping rule."""
        return 2.0 * self.quad_coeff


def build_price(scenario: "ScenarioConfig", alpha: float, x: float, gamma_eff: float | None = None) -> PriceFunction:
    """Price with linear coefficient ``x`` and curvature gamma_eff*lam/(2(1-lam*alpha))."""
    lam = scenario.lam
    if not 0.0 <= alpha < 1.0 / lam:
        raise DomainError(f"alpha={alpha} outside [0, 1/lam)")
    g = scenario.gamma if gamma_eff is None else gamma_eff
    return PriceFunction(
        pi=scenario.pi,
        linear_coeff=x,
        quad_coeff=g * lam / (2.0 * (1.0 - lam * alpha)),
        xi=scenario.xi,
    )


def marginal_price(price: PriceFunction, s) -> float:
    """Nondecreasing right-continuous marginal price at service age ``s``."""
    if np.any(np.asarray(s, float) < 0.0):
        raise DomainError("service age must be nonnegative")
    return price.marginal(s)


def externalities(s, lam: float, mean_s: float, second_moment_s: float):
    """Expected waiting time other customers lose to a tagged demand of ``s``.

    Evaluates s*lam^2*ES^2/(2(1-lam*ES)^2) + s^2*lam/(2(1-lam*ES)) for a
    stationary FCFS single-server queue with service moments (ES, ES^2).
    """
    if lam * mean_s >= 1.0:
        raise DomainError("queue is unstable: lam * ES >= 1")
    if second_moment_s < mean_s**2:
        raise DomainError("second moment below squared mean")
    s = np.asarray(s, float)
    if np.any(s < 0.0):
        raise DomainError("demand must be nonnegative")
    rho = lam * mean_s
    out = s * lam**2 * second_moment_s / (2.0 * (1.0 - rho) ** 2) + s**2 * lam / (2.0 * (1.0 - rho))
    return float(out) if out.ndim == 0 else out
