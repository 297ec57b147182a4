"""Two-phase welfare optimisation.

Phase I inverts the mean constraint ``E S_alpha(x) = alpha`` in the threshold
``x`` by bisection on [0, kappa] (the stop mean is nonincreasing in x).
Phase II maximises the concave welfare curve

    g(alpha) = E integral_0^{S_alpha} [V(s) - drift(alpha) * s] ds

over alpha by golden-section search; an infeasible mean constraint
(``x_alpha < 0``) contracts the right bracket, since such alpha are dominated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

from .errors import DomainError, NumericalError, ParameterError, PreconditionError
from .pricing import ServerCost
from .values import (
    DEFAULT_MC_PATHS,
    PathSet,
    StopMoments,
    ValueModel,
    drift_rate,
    path_set_moments,
    sample_path_set,
)

MEAN_TOL = 1e-9          # relative tolerance on the Phase-I mean constraint
ALPHA_TOL = 1e-8         # argument tolerance of the Phase-II search
EDGE_SHRINK = 1e-9       # relative shrink of the open right boundary 1/lam
_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class ScenarioConfig:
    """System primitives: arrival rate, mean waiting-cost rate, operating cost, entry fee."""

    lam: float
    gamma: float
    xi: ServerCost = field(default_factory=ServerCost.zero)
    pi: float = 0.0

    def __post_init__(self):
        if not self.lam > 0.0:
            raise ParameterError("arrival rate must be positive")
        if not self.gamma > 0.0:
            raise ParameterError("waiting-cost rate must be positive")


@dataclass(frozen=True)
class SolveDiagnostics:
    phase1_calls: int
    phase2_evaluations: int
    bracket_history: tuple
    final_bracket_width: float
    mc_paths: Optional[int]


@dataclass(frozen=True)
class SolveResult:
    alpha_star: float
    x_star: float
    g_star: float
    mean_s: float
    second_moment_s: float
    welfare_rate: float
    x_identity_residual: float
    diagnostics: SolveDiagnostics


class _Kernel:
    """Uniform access to stop moments for either closed forms or a frozen path set."""

    def __init__(self, lam: float, gamma_eff: float, model: Optional[ValueModel] = None,
                 path_set: Optional[PathSet] = None):
        if (model is None) == (path_set is None):
            raise ParameterError("provide exactly one of model or path_set")
        self.lam = lam
        self.gamma_eff = gamma_eff
        self.model = model
        self.path_set = path_set
        self.calls = 0
        if model is not None:
            self.kappa = model.kappa
            self.ev0 = model.mean_initial_value()
        else:
            init = path_set.initial_values()
            self.kappa = float(init.max())
            self.ev0 = float(init.mean())

    @property
    def n_paths(self) -> Optional[int]:
        return None if self.path_set is None else self.path_set.n_paths

    def moments(self, alpha: float, x: float) -> StopMoments:
        self.calls += 1
        drift = drift_rate(self.lam, self.gamma_eff, alpha)
        if self.path_set is not None:
            return path_set_moments(self.path_set, drift, x)
        return StopMoments(
            mean=self.model.stop_mean(drift, x),
            second_moment=self.model.stop_second_moment(drift, x),
            value_integral=self.model.stop_value_integral(drift, x),
        )

    def mean(self, alpha: float, x: float) -> float:
        # bisection hot path: skip second moments and value integrals
        self.calls += 1
        drift = drift_rate(self.lam, self.gamma_eff, alpha)
        if self.path_set is not None:
            stops = self.path_set.stop_times(drift, x)
            return float(stops.mean())
        return self.model.stop_mean(drift, x)


def make_kernel(model, scenario, gamma_eff, path_set, mc_paths, seed) -> _Kernel:
    if path_set is not None:
        return _Kernel(scenario.lam, gamma_eff, path_set=path_set)
    if model.has_closed_forms:
        return _Kernel(scenario.lam, gamma_eff, model=model)
    return _Kernel(scenario.lam, gamma_eff, path_set=sample_path_set(model, mc_paths, seed))


def _bisect_threshold(kernel: _Kernel, alpha: float, tol: float = MEAN_TOL,
                      width_tol: float = 1e-15) -> Optional[float]:
    """Root of E S_alpha(x) = alpha on [0, kappa]; None when the root is negative.

    The bracket is driven down to ``width_tol * max(1, kappa)`` so the curve
    value downstream is a smooth function of alpha; the stated mean tolerance
    is verified afterwards.
    """
    if alpha < 0.0 or alpha >= 1.0 / kernel.lam:
        raise DomainError(f"alpha={alpha} outside [0, 1/lam)")
    if alpha == 0.0:
        return kernel.kappa
    target = tol * max(1.0, alpha)
    m0 = kernel.mean(alpha, 0.0)
    if m0 < alpha - target:
        return None  # the constraint needs a negative threshold: alpha exceeds the optimum
    lo, hi = 0.0, kernel.kappa
    width = width_tol * max(1.0, kernel.kappa)
    # branch on err >= 0 so a flat stretch of the mean (capped consumption)
    # resolves to its right edge rather than to zero
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        err = kernel.mean(alpha, mid) - alpha
        if err >= 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= width:
            break
    x = 0.5 * (lo + hi)
    if abs(kernel.mean(alpha, x) - alpha) > target:
        raise NumericalError(f"mean constraint not met at alpha={alpha}")
    return x


def solve_x_alpha(model: ValueModel, scenario: ScenarioConfig, gamma_eff: float, alpha: float,
                  *, path_set: Optional[PathSet] = None,
                  mc_paths: int = DEFAULT_MC_PATHS, seed: int = 0,
                  width_tol: float = 1e-15) -> Optional[float]:
    """Phase-I threshold x_alpha, or None when x_alpha would be negative."""
    kernel = make_kernel(model, scenario, gamma_eff, path_set, mc_paths, seed)
    return _bisect_threshold(kernel, alpha, width_tol=width_tol)


def curve_point(kernel: _Kernel, alpha: float, width_tol: float = 1e-15):
    """(g(alpha), x_alpha, moments) or None when the mean constraint is infeasible."""
    if alpha == 0.0:
        return 0.0, kernel.kappa, StopMoments(0.0, 0.0, 0.0)
    x = _bisect_threshold(kernel, alpha, width_tol=width_tol)
    if x is None:
        return None
    m = kernel.moments(alpha, x)
    drift = drift_rate(kernel.lam, kernel.gamma_eff, alpha)
    g = m.value_integral - 0.5 * drift * m.second_moment
    return g, x, m


def g_value(model: ValueModel, scenario: ScenarioConfig, gamma_eff: float, alpha: float,
            *, path_set: Optional[PathSet] = None,
            mc_paths: int = DEFAULT_MC_PATHS, seed: int = 0) -> float:
    """Phase-II objective at ``alpha``; requires a nonnegative threshold there."""
    kernel = make_kernel(model, scenario, gamma_eff, path_set, mc_paths, seed)
    out = curve_point(kernel, alpha)
    if out is None:
        raise PreconditionError(f"x_alpha < 0 at alpha={alpha}: welfare curve not defined")
    return out[0]


def _golden_maximize(evaluate: Callable[[float], Optional[float]], lo: float, hi: float,
                     tol: float):
    """Golden-section maximisation treating a None evaluation as 'argument too large'."""
    cache: dict = {}
    history = []

    def val(a: float) -> Optional[float]:
        if a not in cache:
            cache[a] = evaluate(a)
        return cache[a]

    guard = 0
    while hi - lo > tol:
        history.append((lo, hi))
        guard += 1
        if guard > 400:
            raise NumericalError("golden-section bracket failed to converge")
        h = hi - lo
        c = hi - _INVPHI * h
        d = lo + _INVPHI * h
        vc = val(c)
        if vc is None:
            hi = c
            continue
        vd = val(d)
        if vd is None:
            hi = d
            continue
        if vc >= vd:
            hi = d
        else:
            lo = c
    return lo, hi, cache, history


def maximize_curve(kernel: _Kernel, extra_term: Optional[Callable[[float], float]],
                    alpha_tol: float, width_tol: float = 1e-15):
    """Maximise g(alpha) (+ optional concave correction) over the valid alpha range."""
    lam = kernel.lam
    right = min((1.0 - EDGE_SHRINK) / lam, kernel.ev0 / (kernel.gamma_eff * lam))

    def evaluate(alpha: float) -> Optional[float]:
        out = curve_point(kernel, alpha, width_tol)
        if out is None:
            return None
        g = out[0]
        return g if extra_term is None else g + extra_term(alpha)

    lo, hi, cache, history = _golden_maximize(evaluate, 0.0, right, alpha_tol)
    alpha = 0.5 * (lo + hi)
    out = curve_point(kernel, alpha, width_tol)
    if out is None:
        # the midpoint can sit a hair inside the infeasible region; fall back to
        # the best cached feasible argument
        feasible = [(v, a) for a, v in cache.items() if v is not None]
        if not feasible:
            raise NumericalError("no feasible alpha found")
        alpha = max(feasible)[1]
        out = curve_point(kernel, alpha, width_tol)
    g, x, m = out
    objective = g if extra_term is None else g + extra_term(alpha)
    diags = SolveDiagnostics(
        phase1_calls=kernel.calls,
        phase2_evaluations=len(cache),
        bracket_history=tuple(history),
        final_bracket_width=hi - lo,
        mc_paths=kernel.n_paths,
    )
    return alpha, x, g, objective, m, diags


def identity_threshold(lam: float, gamma_eff: float, mean_s: float, second_moment_s: float) -> float:
    """Fixed-point value of the linear price coefficient, gamma*lam^2*ES^2/(2(1-lam*ES)^2)."""
    return gamma_eff * lam**2 * second_moment_s / (2.0 * (1.0 - lam * mean_s) ** 2)


def solve_alpha_star(model: ValueModel, scenario: ScenarioConfig,
                     *, gamma_eff: Optional[float] = None,
                     path_set: Optional[PathSet] = None,
                     mc_paths: int = DEFAULT_MC_PATHS, seed: int = 0,
                     alpha_tol: float = ALPHA_TOL, width_tol: float = 1e-15) -> SolveResult:
    """Socially optimal mean service time and price threshold for one scenario."""
    geff = scenario.gamma if gamma_eff is None else gamma_eff
    kernel = make_kernel(model, scenario, geff, path_set, mc_paths, seed)
    return _assemble(kernel, scenario, geff, alpha_tol, width_tol)


def solve_with_path_set(path_set: PathSet, scenario: ScenarioConfig,
                        *, gamma_eff: Optional[float] = None,
                        alpha_tol: float = ALPHA_TOL, width_tol: float = 1e-15) -> SolveResult:
    """Run the two-phase optimisation directly on a frozen path collection."""
    geff = scenario.gamma if gamma_eff is None else gamma_eff
    kernel = _Kernel(scenario.lam, geff, path_set=path_set)
    return _assemble(kernel, scenario, geff, alpha_tol, width_tol)


def snap_to_identity(kernel: _Kernel, alpha: float, x: float, x_identity: float) -> float:
    """Prefer the fixed-point threshold when it induces the same stop law.

    When consumption is capped, every threshold on a flat stretch of the mean
    yields the identical stopping time pathwise; the fixed-point value is the
    one the optimal price uses.  Outside a flat the mean constraint rejects
    the candidate and the bisection root stands.
    """
    if x_identity < 0.0 or x_identity > kernel.kappa or x_identity == x:
        return x
    if abs(kernel.mean(alpha, x_identity) - alpha) <= MEAN_TOL * max(1.0, alpha):
        return x_identity
    return x


def _assemble(kernel: _Kernel, scenario: ScenarioConfig, geff: float, alpha_tol: float,
              width_tol: float = 1e-15) -> SolveResult:
    alpha, x, g, _, m, diags = maximize_curve(kernel, None, alpha_tol, width_tol)
    x = snap_to_identity(kernel, alpha, x,
                         identity_threshold(kernel.lam, geff, m.mean, m.second_moment))
    if not (0.0 < alpha < 1.0 / scenario.lam) or x <= 0.0 or g <= 0.0:
        raise NumericalError(
            f"optimum violates its guarantees: alpha={alpha}, x={x}, g={g}")
    residual = abs(x - identity_threshold(scenario.lam, geff, m.mean, m.second_moment))
    return SolveResult(
        alpha_star=alpha,
        x_star=x,
        g_star=g,
        mean_s=m.mean,
        second_moment_s=m.second_moment,
        welfare_rate=scenario.lam * g,
        x_identity_residual=residual,
        diagnostics=diags,
    )
