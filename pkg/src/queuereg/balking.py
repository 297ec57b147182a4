"""Heterogeneous customers who join only when their type clears a threshold.

Types T ~ F thin the Poisson arrivals: under a threshold t only the fraction
P_t = P(T > t) joins, and the joiners' value processes follow the conditional
law scale(T | T > t) * W(.).  Phase A solves the inner welfare optimisation at
fixed t (thinned arrival rate, conditional value law); Phase B maximises

    v(t) = P_t * g_t(alpha_t)

over t on a coarse grid followed by local golden-section refinement.  The
entry fee makes the type-t* customer exactly indifferent about joining.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np
from numpy.random import SeedSequence, default_rng

from .errors import DomainError, ParameterError
from .solver import ScenarioConfig, SolveResult, solve_with_path_set
from .values import (
    Exponential,
    PathSet,
    TDist,
    Uniform,
    ValueModel,
    drift_rate,
    sample_path_set,
)

DEFAULT_BANK_PATHS = 20_000
GRID_POINTS = 64
REFINE_TOL = 1e-5
INNER_ALPHA_TOL = 1e-7   # the outer search needs smooth values more than sharp optima
INNER_WIDTH_TOL = 1e-12
_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class AffineScale:
    """scale(t) = offset + slope * t with slope >= 0."""

    offset: float = 0.0
    slope: float = 1.0

    def __post_init__(self):
        if self.slope < 0.0:
            raise ParameterError("scale slope must be nonnegative")

    def __call__(self, t):
        return self.offset + self.slope * np.asarray(t, float)

    @property
    def strictly_increasing(self) -> bool:
        return self.slope > 0.0


@dataclass(frozen=True)
class PowerScale:
    """scale(t) = coeff * t**exponent on t >= 0."""

    coeff: float = 1.0
    exponent: float = 1.0

    def __post_init__(self):
        if self.coeff <= 0.0 or self.exponent <= 0.0:
            raise ParameterError("power scale needs positive coefficient and exponent")

    def __call__(self, t):
        return self.coeff * np.asarray(t, float) ** self.exponent

    @property
    def strictly_increasing(self) -> bool:
        return True


ScaleFunction = Union[AffineScale, PowerScale]


@dataclass(frozen=True)
class TypedValueModel:
    """Multiplicative type field: customer of type t has value process scale(t) * W(.)."""

    type_dist: TDist
    scale: ScaleFunction
    base: ValueModel

    def __post_init__(self):
        if not isinstance(self.type_dist, (Uniform, Exponential)):
            raise ParameterError("type distribution must have a continuous increasing cdf")
        if float(self.scale(self.t_min)) < 0.0:
            raise ParameterError("scale must be nonnegative on the type support")

    @property
    def t_min(self) -> float:
        return self.type_dist.lo if isinstance(self.type_dist, Uniform) else 0.0

    @property
    def t_max(self) -> float:
        return self.type_dist.truncated_upper()

    def join_probability(self, t: float) -> float:
        return float(1.0 - self.type_dist.cdf(t))

    def conditional_types(self, t: float, u: np.ndarray) -> np.ndarray:
        """Quantile coupling of T | T > t: the same uniforms drive every threshold."""
        f_t = float(self.type_dist.cdf(t))
        p = 1.0 - (1.0 - u) * (1.0 - f_t)
        if isinstance(self.type_dist, Uniform):
            d = self.type_dist
            return d.lo + p * (d.hi - d.lo)
        return -np.log1p(-p) / self.type_dist.rate


@dataclass(frozen=True)
class BalkingResult:
    t_star: float
    p_join: float
    inner: SolveResult
    v_star: float
    pi_star: Optional[float]
    fee_exists: bool
    grid: tuple  # sampled (t, v(t)) pairs from the outer search


@dataclass(frozen=True, eq=False)
class TypePathBank:
    """Frozen common random numbers: type uniforms plus base value paths."""

    uniforms: np.ndarray
    base_set: PathSet

    def conditional_set(self, typed: TypedValueModel, t: float) -> PathSet:
        factors = typed.scale(typed.conditional_types(t, self.uniforms))
        return self.base_set.scaled(np.asarray(factors, float))


def make_bank(typed: TypedValueModel, n_paths: int = DEFAULT_BANK_PATHS, seed: int = 0) -> TypePathBank:
    ss = SeedSequence(seed).spawn(2)
    u = default_rng(ss[0]).uniform(size=n_paths)
    base = sample_path_set(typed.base, n_paths, default_rng(ss[1]))
    return TypePathBank(u, base)


def _thinned_scenario(scenario: ScenarioConfig, p_join: float) -> ScenarioConfig:
    return replace(scenario, lam=scenario.lam * p_join)


def phase_a(typed: TypedValueModel, scenario: ScenarioConfig, t: float,
            *, bank: Optional[TypePathBank] = None,
            n_paths: int = DEFAULT_BANK_PATHS, seed: int = 0,
            alpha_tol: float = INNER_ALPHA_TOL,
            width_tol: float = INNER_WIDTH_TOL) -> SolveResult:
    """Inner optimisation at threshold t: thinned arrivals, conditional value law."""
    if not typed.t_min <= t < typed.t_max:
        raise DomainError(f"threshold t={t} outside [{typed.t_min}, {typed.t_max})")
    if bank is None:
        bank = make_bank(typed, n_paths, seed)
    p_join = typed.join_probability(t)
    return solve_with_path_set(bank.conditional_set(typed, t), _thinned_scenario(scenario, p_join),
                               alpha_tol=alpha_tol, width_tol=width_tol)


def outer_value(typed: TypedValueModel, scenario: ScenarioConfig, t: float,
                *, bank: TypePathBank,
                alpha_tol: float = INNER_ALPHA_TOL,
                width_tol: float = INNER_WIDTH_TOL) -> float:
    """v(t) = P_t * g_t(alpha_t), the per-arrival welfare at threshold t."""
    inner = phase_a(typed, scenario, t, bank=bank, alpha_tol=alpha_tol, width_tol=width_tol)
    return typed.join_probability(t) * inner.g_star


def phase_b(typed: TypedValueModel, scenario: ScenarioConfig,
            *, grid_points: int = GRID_POINTS, n_paths: int = DEFAULT_BANK_PATHS,
            seed: int = 0, refine_tol: float = REFINE_TOL,
            bank: Optional[TypePathBank] = None) -> BalkingResult:
    """Outer threshold search: coarse grid, then golden section in the winning bracket.

    v is continuous but not known to be concave, hence the grid stage; ties
    are broken toward the smallest threshold.
    """
    if bank is None:
        bank = make_bank(typed, n_paths, seed)
    lo, hi = typed.t_min, typed.t_max
    ts = lo + (hi - lo) * np.arange(grid_points) / grid_points
    vals = np.array([outer_value(typed, scenario, float(t), bank=bank) for t in ts])
    best = int(np.argmax(vals))

    a = float(ts[max(best - 1, 0)])
    b = float(ts[min(best + 1, grid_points - 1)])
    cache = {float(t): float(v) for t, v in zip(ts, vals)}

    def v_of(t: float) -> float:
        if t not in cache:
            cache[t] = outer_value(typed, scenario, t, bank=bank)
        return cache[t]

    while b - a > refine_tol:
        h = b - a
        c, d = b - _INVPHI * h, a + _INVPHI * h
        if v_of(c) >= v_of(d):
            b = d
        else:
            a = c
    t_star = 0.5 * (a + b)
    v_star = v_of(t_star)

    # leftmost tie-break: an earlier grid point that already attains the
    # refined value (up to solver noise) wins
    tie_tol = 1e-7 * max(1.0, abs(v_star))
    for t, v in zip(ts, vals):
        if float(t) >= t_star:
            break
        if v >= v_star - tie_tol:
            t_star, v_star = float(t), float(v)
            break

    inner = phase_a(typed, scenario, t_star, bank=bank)
    return BalkingResult(
        t_star=t_star,
        p_join=typed.join_probability(t_star),
        inner=inner,
        v_star=v_star,
        pi_star=None,
        fee_exists=False,
        grid=tuple((float(t), float(v)) for t, v in zip(ts, vals)),
    )


def type_benefit(typed: TypedValueModel, scenario: ScenarioConfig, result: BalkingResult,
                 t: float, *, bank: TypePathBank) -> float:
    """Expected joining benefit of a type-t customer, gross of the entry fee.

    The customer consumes until the marginal value scale(t)*W(s) falls to the
    marginal price, pays the non-fee part of the price, and waits through the
    stationary queue generated by the threshold-t* population.
    """
    inner = result.inner
    lam_eff = scenario.lam * result.p_join
    drift = drift_rate(lam_eff, scenario.gamma, inner.alpha_star)
    x = inner.x_star
    scaled = bank.base_set.scaled(np.full(bank.base_set.n_paths, float(typed.scale(t))))
    stops = scaled.stop_times(drift, x)
    vints = scaled.value_integrals(stops)
    surplus = float(np.mean(vints - x * stops - 0.5 * drift * stops**2))
    mean_wait = lam_eff * inner.second_moment_s / (2.0 * (1.0 - lam_eff * inner.mean_s))
    return surplus - scenario.gamma * mean_wait


def entry_fee(typed: TypedValueModel, scenario: ScenarioConfig, result: BalkingResult,
              *, bank: TypePathBank, check_points: int = 16) -> BalkingResult:
    """Fee making the threshold type indifferent; flags non-existence instead of raising."""
    pi = type_benefit(typed, scenario, result, result.t_star, bank=bank)
    # existence requires the net benefit to stay positive above the threshold
    probes = np.linspace(result.t_star, typed.t_max, check_points + 2)[1:-1]
    net = np.array([
        type_benefit(typed, scenario, result, float(t), bank=bank) - pi for t in probes
    ])
    exists = bool(np.all(net > -1e-10)) and typed.scale.strictly_increasing
    return replace(result, pi_star=pi if exists else None, fee_exists=exists)


def solve_balking(typed: TypedValueModel, scenario: ScenarioConfig,
                  *, grid_points: int = GRID_POINTS, n_paths: int = DEFAULT_BANK_PATHS,
                  seed: int = 0) -> BalkingResult:
    """Full pipeline: outer threshold search plus the implementing entry fee."""
    bank = make_bank(typed, n_paths, seed)
    result = phase_b(typed, scenario, grid_points=grid_points, bank=bank)
    return entry_fee(typed, scenario, result, bank=bank)
