"""Marginal-value processes: sample paths, threshold stopping rules and stop-time moments.

A customer's marginal value is a nonincreasing right-continuous process V(.)
with V(0) bounded by a constant ``kappa``.  Service ends at the threshold
stopping time

    S = inf{s >= 0 : V(s) - drift * s <= x}

where ``drift = gamma_eff * lam / (1 - lam * alpha)``.  Four parametric
families admit closed-form stop moments; Markov-modulated fluid flows and
empirical path collections are handled by Monte Carlo over frozen path sets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from numpy.random import Generator, SeedSequence, default_rng
from scipy import stats

from .errors import DomainError, ParameterError

DEFAULT_MC_PATHS = 100_000

# Unbounded supports are truncated at this quantile where a hard bound is needed.
TRUNCATION_QUANTILE = 1.0 - 1e-9


def drift_rate(lam: float, gamma_eff: float, alpha: float) -> float:
    """Slope of the linear penalty in the stopping rule, gamma_eff*lam/(1-lam*alpha)."""
    if not 0.0 <= alpha < 1.0 / lam:
        raise DomainError(f"alpha={alpha} outside [0, 1/lam) with lam={lam}")
    return gamma_eff * lam / (1.0 - lam * alpha)


# ---------------------------------------------------------------------------
# Horizon distributions
# ---------------------------------------------------------------------------


class TDist:
    """Nonnegative horizon variable T with P(T > 0) > 0.

    Subclasses provide the cdf plus the exact integrals the stop-moment
    formulas need: ``E min(T, z)``, ``E min(T, z)^2``, ``E (T - x)^+`` and
    ``E [(T - x)^+]^2``.
    """

    def cdf(self, u):
        raise NotImplementedError

    def quantile(self, p):
        raise NotImplementedError

    def mean(self) -> float:
        raise NotImplementedError

    def upper_bound(self) -> float:
        """Almost-sure upper bound on T (may be math.inf)."""
        raise NotImplementedError

    def truncated_upper(self) -> float:
        ub = self.upper_bound()
        return ub if math.isfinite(ub) else float(self.quantile(TRUNCATION_QUANTILE))

    def min_mean(self, z: float) -> float:
        """E min(T, z) = integral_0^z P(T > u) du."""
        raise NotImplementedError

    def min_second_moment(self, z: float) -> float:
        """E min(T, z)^2 = 2 integral_0^z u P(T > u) du."""
        raise NotImplementedError

    def excess_mean(self, x: float) -> float:
        """E (T - x)^+ for x >= 0."""
        raise NotImplementedError

    def excess_second_moment(self, x: float) -> float:
        """E [(T - x)^+]^2 for x >= 0."""
        raise NotImplementedError

    def sample(self, rng: Generator, size: int) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class Deterministic(TDist):
    value: float

    def __post_init__(self):
        if not self.value > 0.0:
            raise ParameterError("Deterministic horizon must be positive")

    def cdf(self, u):
        return np.where(np.asarray(u, float) >= self.value, 1.0, 0.0)

    def quantile(self, p):
        return self.value

    def mean(self) -> float:
        return self.value

    def upper_bound(self) -> float:
        return self.value

    def min_mean(self, z: float) -> float:
        return min(z, self.value)

    def min_second_moment(self, z: float) -> float:
        return min(z, self.value) ** 2

    def excess_mean(self, x: float) -> float:
        return max(self.value - x, 0.0)

    def excess_second_moment(self, x: float) -> float:
        return max(self.value - x, 0.0) ** 2

    def sample(self, rng, size):
        return np.full(size, self.value)


@dataclass(frozen=True)
class Exponential(TDist):
    rate: float

    def __post_init__(self):
        if not self.rate > 0.0:
            raise ParameterError("Exponential rate must be positive")

    def cdf(self, u):
        u = np.asarray(u, float)
        return np.where(u >= 0.0, 1.0 - np.exp(-self.rate * np.maximum(u, 0.0)), 0.0)

    def quantile(self, p):
        return -math.log1p(-p) / self.rate

    def mean(self) -> float:
        return 1.0 / self.rate

    def upper_bound(self) -> float:
        return math.inf

    def min_mean(self, z: float) -> float:
        return -math.expm1(-self.rate * z) / self.rate

    def min_second_moment(self, z: float) -> float:
        q = self.rate
        return 2.0 * (1.0 - math.exp(-q * z) * (1.0 + q * z)) / q**2

    def excess_mean(self, x: float) -> float:
        return math.exp(-self.rate * x) / self.rate

    def excess_second_moment(self, x: float) -> float:
        return 2.0 * math.exp(-self.rate * x) / self.rate**2

    def sample(self, rng, size):
        return rng.exponential(1.0 / self.rate, size)


@dataclass(frozen=True)
class Uniform(TDist):
    lo: float
    hi: float

    def __post_init__(self):
        if not (0.0 <= self.lo < self.hi):
            raise ParameterError("Uniform horizon needs 0 <= lo < hi")

    def cdf(self, u):
        u = np.asarray(u, float)
        return np.clip((u - self.lo) / (self.hi - self.lo), 0.0, 1.0)

    def quantile(self, p):
        return self.lo + p * (self.hi - self.lo)

    def mean(self) -> float:
        return 0.5 * (self.lo + self.hi)

    def upper_bound(self) -> float:
        return self.hi

    def min_mean(self, z: float) -> float:
        lo, hi = self.lo, self.hi
        out = min(z, lo)
        if z > lo:
            zc = min(z, hi)
            # integral of (hi-u)/(hi-lo) over [lo, zc]
            out += ((hi - lo) ** 2 - (hi - zc) ** 2) / (2.0 * (hi - lo))
        return out

    def min_second_moment(self, z: float) -> float:
        lo, hi = self.lo, self.hi
        out = min(z, lo) ** 2
        if z > lo:
            zc = min(z, hi)
            # 2 * integral of u (hi-u)/(hi-lo) du over [lo, zc]
            out += (hi * (zc**2 - lo**2) - 2.0 * (zc**3 - lo**3) / 3.0) / (hi - lo)
        return out

    def excess_mean(self, x: float) -> float:
        lo, hi = self.lo, self.hi
        if x >= hi:
            return 0.0
        if x <= lo:
            return self.mean() - x
        return (hi - x) ** 2 / (2.0 * (hi - lo))

    def excess_second_moment(self, x: float) -> float:
        lo, hi = self.lo, self.hi
        if x >= hi:
            return 0.0
        if x <= lo:
            return ((hi - x) ** 3 - (lo - x) ** 3) / (3.0 * (hi - lo))
        return (hi - x) ** 3 / (3.0 * (hi - lo))

    def sample(self, rng, size):
        return rng.uniform(self.lo, self.hi, size)


@dataclass(frozen=True, eq=False)
class EmpiricalQuantile(TDist):
    """Horizon distributed as the empirical law of a sorted sample."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.sort(np.asarray(self.values, float))
        if vals.size == 0:
            raise ParameterError("empirical sample must be nonempty")
        if vals[0] < 0.0:
            raise ParameterError("empirical sample must be nonnegative")
        if not vals[-1] > 0.0:
            raise ParameterError("empirical sample needs P(T > 0) > 0")
        object.__setattr__(self, "values", vals)

    def cdf(self, u):
        return np.searchsorted(self.values, np.asarray(u, float), side="right") / self.values.size

    def quantile(self, p):
        return float(np.quantile(self.values, p, method="inverted_cdf"))

    def mean(self) -> float:
        return float(self.values.mean())

    def upper_bound(self) -> float:
        return float(self.values[-1])

    def min_mean(self, z: float) -> float:
        return float(np.minimum(self.values, z).mean())

    def min_second_moment(self, z: float) -> float:
        return float((np.minimum(self.values, z) ** 2).mean())

    def excess_mean(self, x: float) -> float:
        return float(np.maximum(self.values - x, 0.0).mean())

    def excess_second_moment(self, x: float) -> float:
        return float((np.maximum(self.values - x, 0.0) ** 2).mean())

    def sample(self, rng, size):
        return rng.choice(self.values, size=size, replace=True)


# ---------------------------------------------------------------------------
# Sample paths
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StepPath:
    """Right-continuous step path: value ``values[k]`` holds on [times[k], times[k+1]).

    ``tail_value`` is the constant level on and after the last knot time.
    """

    times: np.ndarray
    values: np.ndarray
    tail_value: float = None  # type: ignore[assignment]

    def __post_init__(self):
        t = np.asarray(self.times, float)
        v = np.asarray(self.values, float)
        if t.ndim != 1 or t.shape != v.shape or t.size == 0:
            raise ParameterError("times/values must be matching 1-d arrays")
        if t[0] != 0.0:
            raise ParameterError("first knot time must be 0")
        if t.size > 1 and not np.all(np.diff(t) > 0.0):
            raise ParameterError("knot times must be strictly increasing")
        if np.any(np.diff(v) > 0.0):
            raise ParameterError("knot values must be nonincreasing")
        if not np.isfinite(v[0]) or v[0] < 0.0:
            raise ParameterError("value at 0 must be finite and nonnegative")
        tail = float(v[-1]) if self.tail_value is None else float(self.tail_value)
        if tail > v[-1]:
            raise ParameterError("tail value cannot exceed the last knot value")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "tail_value", tail)

    def value_at(self, s: float) -> float:
        if s >= self.times[-1]:
            return self.tail_value
        k = int(np.searchsorted(self.times, s, side="right")) - 1
        return float(self.values[k])

    def initial_value(self) -> float:
        return float(self.values[0])


@dataclass(frozen=True)
class LinearPath:
    """V(s) = intercept + slope*s until ``floor_time``, constant afterwards."""

    intercept: float
    slope: float
    floor_time: float

    def __post_init__(self):
        if self.intercept < 0.0:
            raise ParameterError("intercept must be nonnegative")
        if self.slope > 0.0:
            raise ParameterError("slope must be nonpositive")
        if self.floor_time < 0.0:
            raise ParameterError("floor time must be nonnegative")

    def value_at(self, s: float) -> float:
        return self.intercept + self.slope * min(s, self.floor_time)

    def initial_value(self) -> float:
        return self.intercept


@dataclass(frozen=True, eq=False)
class PiecewiseLinearPath:
    """Continuous piecewise-linear path; beyond the last knot the slope is ``tail_slope``.

    Crossing times are computed exactly on the linear segments, so no grid
    error enters downstream moments.
    """

    times: np.ndarray
    values: np.ndarray
    tail_slope: float = 0.0

    def __post_init__(self):
        t = np.asarray(self.times, float)
        v = np.asarray(self.values, float)
        if t.ndim != 1 or t.shape != v.shape or t.size == 0:
            raise ParameterError("times/values must be matching 1-d arrays")
        if t[0] != 0.0:
            raise ParameterError("first knot time must be 0")
        if t.size > 1 and not np.all(np.diff(t) > 0.0):
            raise ParameterError("knot times must be strictly increasing")
        if np.any(np.diff(v) > 1e-12):
            raise ParameterError("knot values must be nonincreasing")
        if not np.isfinite(v[0]) or v[0] < 0.0:
            raise ParameterError("value at 0 must be finite and nonnegative")
        if self.tail_slope > 0.0:
            raise ParameterError("tail slope must be nonpositive")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    def value_at(self, s: float) -> float:
        t, v = self.times, self.values
        if s >= t[-1]:
            return float(v[-1] + self.tail_slope * (s - t[-1]))
        k = int(np.searchsorted(t, s, side="right")) - 1
        w = (s - t[k]) / (t[k + 1] - t[k])
        return float(v[k] + w * (v[k + 1] - v[k]))

    def initial_value(self) -> float:
        return float(self.values[0])


Path = Union[StepPath, LinearPath, PiecewiseLinearPath]


def stop_time(path: Path, drift: float, x: float) -> float:
    """First time the drift-adjusted path value drops to or below ``x``.

    Returns ``math.inf`` when ``drift == 0`` and the path never reaches ``x``.
    """
    if drift < 0.0:
        raise DomainError("drift must be nonnegative")
    if path.initial_value() <= x:
        return 0.0
    if isinstance(path, StepPath):
        return _stop_step(path, drift, x)
    if isinstance(path, LinearPath):
        return _stop_linear(path, drift, x)
    if isinstance(path, PiecewiseLinearPath):
        return _stop_piecewise(path, drift, x)
    raise ParameterError(f"unsupported path type {type(path)!r}")


def _stop_step(path: StepPath, drift: float, x: float) -> float:
    t, v = path.times, path.values
    n = t.size
    for k in range(n):
        val = path.tail_value if k == n - 1 else v[k]
        end = math.inf if k == n - 1 else t[k + 1]
        if val - drift * t[k] <= x:
            return float(t[k])
        if drift > 0.0:
            s = (val - x) / drift
            if s < end:
                return float(s)
    return math.inf


def _stop_linear(path: LinearPath, drift: float, x: float) -> float:
    a, b, f = path.intercept, path.slope, path.floor_time
    rate = drift - b
    if rate > 0.0:
        s = (a - x) / rate
        if s <= f:
            return float(s)
    floor_val = a + b * f
    if floor_val - drift * f <= x:
        return float(f)
    if drift > 0.0:
        return float((floor_val - x) / drift)
    return math.inf


def _stop_piecewise(path: PiecewiseLinearPath, drift: float, x: float) -> float:
    t, v = path.times, path.values
    n = t.size
    for k in range(n - 1):
        a_left = v[k] - drift * t[k]
        a_right = v[k + 1] - drift * t[k + 1]
        if a_right <= x:
            rate = drift - (v[k + 1] - v[k]) / (t[k + 1] - t[k])
            if rate <= 0.0:
                return float(t[k])
            return float(t[k] + max(a_left - x, 0.0) / rate)
    a_last = v[-1] - drift * t[-1]
    rate = drift - path.tail_slope
    if rate <= 0.0:
        return float(t[-1]) if a_last <= x else math.inf
    return float(t[-1] + max(a_last - x, 0.0) / rate)


def path_value_integral(path: Path, s: float) -> float:
    """Exact integral of the path value over [0, s]."""
    if s < 0.0:
        raise DomainError("integration endpoint must be nonnegative")
    if isinstance(path, StepPath):
        t, v = path.times, path.values
        total = 0.0
        for k in range(t.size):
            val = path.tail_value if k == t.size - 1 else v[k]
            end = s if k == t.size - 1 else min(t[k + 1], s)
            if end <= t[k]:
                break
            total += val * (end - t[k])
        return float(total)
    if isinstance(path, LinearPath):
        a, b, f = path.intercept, path.slope, path.floor_time
        s1 = min(s, f)
        total = a * s1 + 0.5 * b * s1**2
        if s > f:
            total += (a + b * f) * (s - f)
        return float(total)
    t, v = path.times, path.values
    total = 0.0
    for k in range(t.size - 1):
        end = min(t[k + 1], s)
        if end <= t[k]:
            return float(total)
        h = end - t[k]
        slope = (v[k + 1] - v[k]) / (t[k + 1] - t[k])
        total += v[k] * h + 0.5 * slope * h**2
    if s > t[-1]:
        h = s - t[-1]
        total += v[-1] * h + 0.5 * path.tail_slope * h**2
    return float(total)


# ---------------------------------------------------------------------------
# Vectorised path collections (frozen Monte-Carlo sets, common random numbers)
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StepPathSet:
    """Rectangular encoding of step paths: padded columns carry time=+inf, value=tail."""

    times: np.ndarray   # (n, K)
    values: np.ndarray  # (n, K)

    @property
    def n_paths(self) -> int:
        return self.times.shape[0]

    def initial_values(self) -> np.ndarray:
        return self.values[:, 0]

    def scaled(self, factors: np.ndarray) -> "StepPathSet":
        f = np.asarray(factors, float)[:, None]
        return StepPathSet(self.times, self.values * f)

    def stop_times(self, drift: float, x: float) -> np.ndarray:
        t, v = self.times, self.values
        real = np.isfinite(t)
        with np.errstate(invalid="ignore"):
            knot_cross = (v - drift * t <= x) & real
        next_t = np.concatenate([t[:, 1:], np.full((t.shape[0], 1), np.inf)], axis=1)
        if drift > 0.0:
            cont = (v - x) / drift
            valid = real & (knot_cross | (cont < next_t))
            cand = np.where(knot_cross, t, cont)
        else:
            valid = knot_cross
            cand = t
        idx = np.argmax(valid, axis=1)
        rows = np.arange(t.shape[0])
        out = cand[rows, idx]
        out = np.where(valid[rows, idx], out, np.inf)
        return np.maximum(out, 0.0)

    def value_integrals(self, stops: np.ndarray) -> np.ndarray:
        t, v = self.times, self.values
        next_t = np.concatenate([t[:, 1:], np.full((t.shape[0], 1), np.inf)], axis=1)
        upper = np.minimum(next_t, stops[:, None])
        seg = np.clip(upper - t, 0.0, None)
        seg[~np.isfinite(t)] = 0.0
        return np.einsum("ij,ij->i", v, seg)


@dataclass(frozen=True, eq=False)
class PiecewiseLinearPathSet:
    """Rectangular encoding of piecewise-linear paths with a linear tail."""

    times: np.ndarray       # (n, K), padded with +inf
    values: np.ndarray      # (n, K), padded with the last knot value
    tail_slopes: np.ndarray  # (n,)

    @property
    def n_paths(self) -> int:
        return self.times.shape[0]

    def initial_values(self) -> np.ndarray:
        return self.values[:, 0]

    def scaled(self, factors: np.ndarray) -> "PiecewiseLinearPathSet":
        f = np.asarray(factors, float)
        return PiecewiseLinearPathSet(self.times, self.values * f[:, None], self.tail_slopes * f)

    def _segment_slopes(self) -> np.ndarray:
        t, v = self.times, self.values
        n, k = t.shape
        slopes = np.zeros((n, k))
        with np.errstate(invalid="ignore", divide="ignore"):
            dt = t[:, 1:] - t[:, :-1]
            dv = v[:, 1:] - v[:, :-1]
            slopes[:, :-1] = np.where(np.isfinite(dt) & (dt > 0.0), dv / np.where(dt > 0.0, dt, 1.0), 0.0)
        # the segment starting at the last real knot of each row is the tail
        last = np.isfinite(t).sum(axis=1) - 1
        slopes[np.arange(n), last] = self.tail_slopes
        return slopes

    def stop_times(self, drift: float, x: float) -> np.ndarray:
        t, v = self.times, self.values
        n = t.shape[0]
        slopes = self._segment_slopes()
        real = np.isfinite(t)
        with np.errstate(invalid="ignore"):
            adj = np.where(real, v - drift * t, -np.inf)
        # adjusted value at the right end of each segment (tail end -> -inf
        # whenever drift - tail_slope > 0, which sampling guarantees)
        adj_next = np.concatenate([adj[:, 1:], np.full((n, 1), -np.inf)], axis=1)
        last = real.sum(axis=1) - 1
        rows = np.arange(n)
        reachable = adj_next <= x
        reachable[~real] = False
        rate = drift - slopes
        tail_stuck = rate[rows, last] <= 0.0
        reachable[rows, last] = ~tail_stuck
        idx = np.argmax(reachable, axis=1)
        hit = reachable[rows, idx]
        r = rate[rows, idx]
        safe_r = np.where(r > 0.0, r, 1.0)
        s = t[rows, idx] + np.maximum(adj[rows, idx] - x, 0.0) / safe_r
        s = np.where(r > 0.0, s, t[rows, idx])
        return np.where(hit, np.maximum(s, 0.0), np.inf)

    def value_integrals(self, stops: np.ndarray) -> np.ndarray:
        t, v = self.times, self.values
        slopes = self._segment_slopes()
        next_t = np.concatenate([t[:, 1:], np.full((t.shape[0], 1), np.inf)], axis=1)
        real = np.isfinite(t)
        last = real.sum(axis=1) - 1
        rows = np.arange(t.shape[0])
        next_t[rows, last] = np.inf
        upper = np.minimum(next_t, stops[:, None])
        h = np.clip(upper - t, 0.0, None)
        h[~real] = 0.0
        return np.einsum("ij,ij->i", v, h) + 0.5 * np.einsum("ij,ij->i", slopes, h * h)


PathSet = Union[StepPathSet, PiecewiseLinearPathSet]


# ---------------------------------------------------------------------------
# Value models
# ---------------------------------------------------------------------------


class ValueModel:
    """Base class for marginal-value process families."""

    #: True when exact stop-time moments are available.
    has_closed_forms: bool = False

    @property
    def kappa(self) -> float:
        """Almost-sure upper bound on V(0)."""
        raise NotImplementedError

    def mean_initial_value(self) -> float:
        raise NotImplementedError

    def mean_square_initial_value(self) -> float:
        raise NotImplementedError

    def sample_path(self, rng: Generator) -> Path:
        raise NotImplementedError

    def sample_path_set(self, n: int, rng: Generator) -> PathSet:
        raise NotImplementedError

    # closed-form stop moments; only meaningful when has_closed_forms is True
    def stop_mean(self, drift: float, x: float) -> float:
        raise NotImplementedError

    def stop_second_moment(self, drift: float, x: float) -> float:
        raise NotImplementedError

    def stop_value_integral(self, drift: float, x: float) -> float:
        """E integral_0^S V(s) ds at the threshold stop S."""
        raise NotImplementedError


def _check_threshold(x: float) -> None:
    if x < 0.0:
        raise DomainError("closed-form stop moments are defined for thresholds x >= 0")


@dataclass(frozen=True)
class ConstantMarginal(ValueModel):
    """V(s) = kappa on [0, T], zero afterwards."""

    kappa_level: float
    t_dist: TDist
    has_closed_forms = True

    def __post_init__(self):
        if not self.kappa_level > 0.0:
            raise ParameterError("kappa must be positive")

    @property
    def kappa(self) -> float:
        return self.kappa_level

    def mean_initial_value(self) -> float:
        return self.kappa_level

    def mean_square_initial_value(self) -> float:
        return self.kappa_level**2

    def _crossing(self, drift: float, x: float) -> float:
        if x >= self.kappa_level:
            return 0.0
        if drift <= 0.0:
            raise DomainError("constant-marginal stop moments need positive drift")
        return (self.kappa_level - x) / drift

    def stop_mean(self, drift, x):
        _check_threshold(x)
        return self.t_dist.min_mean(self._crossing(drift, x))

    def stop_second_moment(self, drift, x):
        _check_threshold(x)
        return self.t_dist.min_second_moment(self._crossing(drift, x))

    def stop_value_integral(self, drift, x):
        return self.kappa_level * self.stop_mean(drift, x)

    def sample_path(self, rng):
        t = float(self.t_dist.sample(rng, 1)[0])
        if t <= 0.0:
            return StepPath(np.array([0.0]), np.array([0.0]))
        return StepPath(np.array([0.0, t]), np.array([self.kappa_level, 0.0]))

    def sample_path_set(self, n, rng):
        t = self.t_dist.sample(rng, n)
        times = np.column_stack([np.zeros(n), t])
        values = np.column_stack([np.full(n, self.kappa_level), np.zeros(n)])
        return StepPathSet(times, values)


@dataclass(frozen=True)
class LinearRemaining(ValueModel):
    """V(s) = (T - s)^+ with a bounded horizon T."""

    t_dist: TDist
    has_closed_forms = True

    def __post_init__(self):
        if not math.isfinite(self.t_dist.upper_bound()):
            raise ParameterError("linear-remaining values require a bounded horizon")

    @property
    def kappa(self) -> float:
        return self.t_dist.upper_bound()

    def mean_initial_value(self) -> float:
        return self.t_dist.mean()

    def mean_square_initial_value(self) -> float:
        return self.t_dist.excess_second_moment(0.0)

    def stop_mean(self, drift, x):
        _check_threshold(x)
        return self.t_dist.excess_mean(x) / (1.0 + drift)

    def stop_second_moment(self, drift, x):
        _check_threshold(x)
        return self.t_dist.excess_second_moment(x) / (1.0 + drift) ** 2

    def stop_value_integral(self, drift, x):
        # E integral_0^S (T - s) ds = E[T S] - E[S^2]/2 with
        # E[T S] = (1 + drift) E[S^2] + x E[S]
        _check_threshold(x)
        m = self.stop_mean(drift, x)
        m2 = self.stop_second_moment(drift, x)
        return (1.0 + drift) * m2 + x * m - 0.5 * m2

    def sample_path(self, rng):
        t = float(self.t_dist.sample(rng, 1)[0])
        return LinearPath(intercept=t, slope=-1.0, floor_time=t)

    def sample_path_set(self, n, rng):
        t = self.t_dist.sample(rng, n)
        times = np.column_stack([np.zeros(n), t])
        values = np.column_stack([t, np.zeros(n)])
        # degenerate rows (t == 0) would repeat the knot at time zero
        times[:, 1] = np.maximum(times[:, 1], 1e-300)
        return PiecewiseLinearPathSet(times, values, np.zeros(n))


@dataclass(frozen=True)
class PoissonSubordinator(ValueModel):
    """V(s) = kappa - J(s) with J a unit-jump Poisson process of rate q."""

    kappa_level: float
    jump_rate: float
    has_closed_forms = True

    def __post_init__(self):
        if not self.kappa_level > 0.0:
            raise ParameterError("kappa must be positive")
        if not self.jump_rate > 0.0:
            raise ParameterError("jump rate must be positive")

    @property
    def kappa(self) -> float:
        return self.kappa_level

    def mean_initial_value(self) -> float:
        return self.kappa_level

    def mean_square_initial_value(self) -> float:
        return self.kappa_level**2

    def _boundary_times(self, drift: float, x: float) -> np.ndarray:
        """Times s_j at which the moving boundary kappa-x-drift*s passes level j."""
        gap = self.kappa_level - x
        j_max = int(math.floor(gap))
        s = (gap - np.arange(j_max + 1)) / drift
        return np.append(s, 0.0)  # s_{j_max + 1} = 0

    def stop_mean(self, drift, x):
        _check_threshold(x)
        if x >= self.kappa_level:
            return 0.0
        if drift <= 0.0:
            raise DomainError("subordinator stop moments need positive drift")
        q = self.jump_rate
        s = self._boundary_times(drift, x)
        total = 0.0
        for j in range(s.size - 1):
            n = np.arange(j + 1)
            total += np.sum(stats.poisson.cdf(n, q * s[j + 1]) - stats.poisson.cdf(n, q * s[j])) / q
        return float(total)

    def stop_second_moment(self, drift, x):
        _check_threshold(x)
        if x >= self.kappa_level:
            return 0.0
        if drift <= 0.0:
            raise DomainError("subordinator stop moments need positive drift")
        q = self.jump_rate
        s = self._boundary_times(drift, x)
        total = 0.0
        for j in range(s.size - 1):
            n = np.arange(j + 1)
            diff = stats.poisson.cdf(n + 1, q * s[j + 1]) - stats.poisson.cdf(n + 1, q * s[j])
            total += np.sum(2.0 * (n + 1) * diff) / q**2
        return float(total)

    def jump_count_pmf(self, drift: float, x: float) -> np.ndarray:
        """Distribution of the number of jumps seen before stopping."""
        _check_threshold(x)
        if x >= self.kappa_level:
            return np.array([1.0])
        q = self.jump_rate
        s = self._boundary_times(drift, x)
        n_levels = s.size  # levels 0 .. floor(kappa-x)+1
        pmf = np.zeros(n_levels)
        for n in range(n_levels):
            p = stats.poisson.pmf(n, q * s[n])
            if n > 0:
                i = np.arange(n)
                gap = s[n - 1] - s[n]
                p += np.sum(stats.poisson.pmf(i, q * s[n]) * stats.poisson.sf(n - i - 1, q * gap))
            pmf[n] = p
        return pmf

    def stop_value_integral(self, drift, x):
        # E integral_0^S (kappa - J) = kappa E[S] - (E[J(S)^2] - E[J(S)]) / (2q)
        _check_threshold(x)
        mean = self.stop_mean(drift, x)
        pmf = self.jump_count_pmf(drift, x)
        levels = np.arange(pmf.size)
        ej = float(np.sum(levels * pmf))
        ej2 = float(np.sum(levels**2 * pmf))
        return self.kappa_level * mean - (ej2 - ej) / (2.0 * self.jump_rate)

    def _n_jump_columns(self) -> int:
        return int(math.ceil(self.kappa_level))

    def sample_path(self, rng):
        m = self._n_jump_columns()
        jumps = np.cumsum(rng.exponential(1.0 / self.jump_rate, m))
        times = np.concatenate([[0.0], jumps])
        values = self.kappa_level - np.arange(m + 1, dtype=float)
        return StepPath(times, values)

    def sample_path_set(self, n, rng):
        m = self._n_jump_columns()
        jumps = np.cumsum(rng.exponential(1.0 / self.jump_rate, (n, m)), axis=1)
        times = np.concatenate([np.zeros((n, 1)), jumps], axis=1)
        values = np.tile(self.kappa_level - np.arange(m + 1, dtype=float), (n, 1))
        return StepPathSet(times, values)


@dataclass(frozen=True, eq=False)
class Mmff(ValueModel):
    """V(s) = kappa - integral of a state-dependent drain rate along a CTMC."""

    kappa_level: float
    rate_matrix: np.ndarray
    drain_rates: np.ndarray
    initial_dist: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.rate_matrix, float)
        u = np.asarray(self.drain_rates, float)
        eta = np.asarray(self.initial_dist, float)
        if not self.kappa_level > 0.0:
            raise ParameterError("kappa must be positive")
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise ParameterError("rate matrix must be square")
        n = q.shape[0]
        off = q - np.diag(np.diag(q))
        if np.any(off < 0.0):
            raise ParameterError("off-diagonal generator rates must be nonnegative")
        if np.max(np.abs(q.sum(axis=1))) > 1e-10:
            raise ParameterError("generator rows must sum to zero")
        if u.shape != (n,) or np.any(u <= 0.0):
            raise ParameterError("drain rates must be positive, one per state")
        if eta.shape != (n,) or np.any(eta < 0.0) or abs(eta.sum() - 1.0) > 1e-10:
            raise ParameterError("initial distribution must be a probability vector")
        object.__setattr__(self, "rate_matrix", q)
        object.__setattr__(self, "drain_rates", u)
        object.__setattr__(self, "initial_dist", eta)

    @property
    def kappa(self) -> float:
        return self.kappa_level

    def mean_initial_value(self) -> float:
        return self.kappa_level

    def mean_square_initial_value(self) -> float:
        return self.kappa_level**2

    def _simulate_segments(self, rng: Generator):
        """CTMC drain segments of one path, run until the value reaches zero."""
        q, u, eta = self.rate_matrix, self.drain_rates, self.initial_dist
        state = int(rng.choice(eta.size, p=eta))
        t, val = 0.0, self.kappa_level
        times, values = [0.0], [val]
        while val > 0.0:
            exit_rate = -q[state, state]
            hold = rng.exponential(1.0 / exit_rate) if exit_rate > 0.0 else math.inf
            drain_to_zero = val / u[state]
            if drain_to_zero <= hold:
                t += drain_to_zero
                val = 0.0
                times.append(t)
                values.append(0.0)
                break
            t += hold
            val -= u[state] * hold
            times.append(t)
            values.append(val)
            probs = np.clip(q[state].copy(), 0.0, None)
            probs[state] = 0.0
            probs /= probs.sum()
            state = int(rng.choice(eta.size, p=probs))
        return np.array(times), np.array(values), u[state]

    def sample_path(self, rng):
        times, values, last_drain = self._simulate_segments(rng)
        return PiecewiseLinearPath(times, values, tail_slope=-last_drain)

    def sample_path_set(self, n, rng):
        raw = [self._simulate_segments(rng) for _ in range(n)]
        k = max(t.size for t, _, _ in raw)
        times = np.full((n, k), np.inf)
        values = np.zeros((n, k))
        tails = np.empty(n)
        for i, (t, v, last_drain) in enumerate(raw):
            times[i, : t.size] = t
            values[i, : t.size] = v
            values[i, t.size:] = v[-1]
            tails[i] = -last_drain
        return PiecewiseLinearPathSet(times, values, tails)


@dataclass(frozen=True)
class Empirical(ValueModel):
    """A finite collection of observed step paths, used as the exact path law."""

    paths: tuple

    def __post_init__(self):
        if len(self.paths) == 0:
            raise ParameterError("empirical model needs at least one path")
        if not all(isinstance(p, StepPath) for p in self.paths):
            raise ParameterError("empirical model holds StepPath entries only")

    @property
    def kappa(self) -> float:
        return max(p.initial_value() for p in self.paths)

    def mean_initial_value(self) -> float:
        return float(np.mean([p.initial_value() for p in self.paths]))

    def mean_square_initial_value(self) -> float:
        return float(np.mean([p.initial_value() ** 2 for p in self.paths]))

    def sample_path(self, rng):
        return self.paths[int(rng.integers(len(self.paths)))]

    def sample_path_set(self, n, rng):
        # the collection itself is the model: enumerate it exactly
        k = max(p.times.size for p in self.paths)
        m = len(self.paths)
        times = np.full((m, k), np.inf)
        values = np.zeros((m, k))
        for i, p in enumerate(self.paths):
            times[i, : p.times.size] = p.times
            values[i, : p.times.size] = p.values
            values[i, p.times.size - 1:] = p.tail_value
        return StepPathSet(times, values)


AnyValueModel = Union[ConstantMarginal, LinearRemaining, PoissonSubordinator, Mmff, Empirical]


# ---------------------------------------------------------------------------
# Public stop-moment interface
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StopMoments:
    """Stop-time moments with standard errors (zero for closed forms)."""

    mean: float
    second_moment: float
    value_integral: float
    mean_se: float = 0.0
    second_moment_se: float = 0.0
    value_integral_se: float = 0.0
    n_paths: Optional[int] = None


def sample_path(model: ValueModel, rng: Generator) -> Path:
    """Draw one realisation of the model's value process."""
    return model.sample_path(rng)


def sample_path_set(model: ValueModel, n: int, seed_or_rng) -> PathSet:
    """Draw a frozen, vectorised collection of paths for Monte-Carlo reuse."""
    rng = seed_or_rng if isinstance(seed_or_rng, Generator) else default_rng(SeedSequence(seed_or_rng))
    return model.sample_path_set(n, rng)


def path_set_moments(path_set: PathSet, drift: float, x: float) -> StopMoments:
    stops = path_set.stop_times(drift, x)
    if not np.all(np.isfinite(stops)):
        raise DomainError("some paths never cross the threshold (drift is zero)")
    vints = path_set.value_integrals(stops)
    n = stops.size
    sq = stops**2

    def _se(a):
        return float(a.std(ddof=1) / math.sqrt(n)) if n > 1 else math.inf

    return StopMoments(
        mean=float(stops.mean()),
        second_moment=float(sq.mean()),
        value_integral=float(vints.mean()),
        mean_se=_se(stops),
        second_moment_se=_se(sq),
        value_integral_se=_se(vints),
        n_paths=n,
    )


def stop_moments(
    model: ValueModel,
    lam: float,
    gamma_eff: float,
    alpha: float,
    x: float,
    *,
    path_set: Optional[PathSet] = None,
    n_paths: int = DEFAULT_MC_PATHS,
    seed: int = 0,
) -> StopMoments:
    """Moments of S_alpha(x); closed form where available, Monte Carlo otherwise."""
    drift = drift_rate(lam, gamma_eff, alpha)
    if path_set is None and model.has_closed_forms:
        return StopMoments(
            mean=model.stop_mean(drift, x),
            second_moment=model.stop_second_moment(drift, x),
            value_integral=model.stop_value_integral(drift, x),
        )
    if path_set is None:
        path_set = sample_path_set(model, n_paths, seed)
    return path_set_moments(path_set, drift, x)


def mean_stop(model, lam, gamma_eff, alpha, x, **kw) -> float:
    """E S_alpha(x); see ``stop_moments`` for the Monte-Carlo keywords."""
    return stop_moments(model, lam, gamma_eff, alpha, x, **kw).mean


def second_moment_stop(model, lam, gamma_eff, alpha, x, **kw) -> float:
    """E S_alpha(x)^2; see ``stop_moments`` for the Monte-Carlo keywords."""
    return stop_moments(model, lam, gamma_eff, alpha, x, **kw).second_moment
