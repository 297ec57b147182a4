"""Orbit-queue variant: no waiting room, exponential retrials, per-retrial costs.

Phase I is the standard threshold search with the waiting-cost rate replaced
by ``gamma + theta*delta``.  Phase II adds a concave orbit correction

    -lam * (gamma + theta*delta) * alpha / (theta * (1 - lam*alpha))

to the welfare curve.  The optimal price keeps the quadratic shape with the
re-parametrised cost rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import NumericalError, ParameterError
from .pricing import PriceFunction, build_price
from .solver import (
    ALPHA_TOL,
    ScenarioConfig,
    SolveDiagnostics,
    curve_point,
    make_kernel,
    maximize_curve,
    snap_to_identity,
)
from .values import DEFAULT_MC_PATHS, LinearRemaining, Mmff, PathSet, ValueModel

#: families whose sampled value paths are continuous, for which the
#: fixed-point identity below is enforced rather than merely reported
CONTINUOUS_PATH_FAMILIES = (LinearRemaining, Mmff)

IDENTITY_TOL = 1e-6
CONCAVITY_SLACK = 1e-8


@dataclass(frozen=True)
class RetrialConfig:
    theta: float   # retrial rate of each orbiting customer
    delta: float   # mean cost per retrial

    def __post_init__(self):
        if not self.theta > 0.0:
            raise ParameterError("retrial rate must be positive")
        if not self.delta > 0.0:
            raise ParameterError("retrial cost must be positive")


@dataclass(frozen=True)
class RetrialResult:
    alpha_star: float
    x_star: float
    g_tilde_star: float
    mean_t: float
    second_moment_t: float
    welfare_rate: float
    z_linear_coeff: float
    z_quad_coeff: float
    x_identity_residual: float
    identity_enforced: bool
    diagnostics: SolveDiagnostics


def _orbit_term(lam: float, gamma_eff: float, theta: float):
    def term(alpha: float) -> float:
        return -lam * gamma_eff * alpha / (theta * (1.0 - lam * alpha))

    return term


def _z_coefficients(lam: float, theta: float, alpha: float, second_moment: float):
    denom = 1.0 - lam * alpha
    linear = (lam * (0.5 * second_moment + alpha / theta) / denom + 1.0 / theta) / denom
    quad = 1.0 / (2.0 * denom)
    return linear, quad


def identity_threshold_retrial(lam: float, gamma_eff: float, theta: float,
                               alpha: float, second_moment: float) -> float:
    """First-order-condition value of the linear price coefficient."""
    a, _ = _z_coefficients(lam, theta, alpha, second_moment)
    return lam * gamma_eff * a


def _concave_on_grid(vals: np.ndarray, slack: float = CONCAVITY_SLACK) -> bool:
    mid = vals[1:-1]
    chords = 0.5 * (vals[:-2] + vals[2:])
    scale = np.maximum(1.0, np.abs(vals).max())
    return bool(np.all(mid >= chords - slack * scale))


def solve_retrial(model: ValueModel, scenario: ScenarioConfig, retrial: RetrialConfig,
                  *, path_set: Optional[PathSet] = None,
                  mc_paths: int = DEFAULT_MC_PATHS, seed: int = 0,
                  alpha_tol: float = ALPHA_TOL) -> RetrialResult:
    """Optimal mean service time and price threshold for the orbit queue."""
    lam = scenario.lam
    geff = scenario.gamma + retrial.theta * retrial.delta
    kernel = make_kernel(model, scenario, geff, path_set, mc_paths, seed)
    extra = _orbit_term(lam, geff, retrial.theta)

    # concavity is verified numerically before trusting golden section; on a
    # violation the search degrades to a dense grid plus local refinement
    right = min((1.0 - 1e-9) / lam, kernel.ev0 / (geff * lam))
    probe = np.linspace(0.0, right, 33)
    pvals, ok = [], []
    for a in probe:
        out = curve_point(kernel, float(a))
        if out is None:
            break
        pvals.append(out[0] + extra(float(a)))
        ok.append(float(a))
    pvals = np.array(pvals)
    if pvals.size >= 3 and not _concave_on_grid(pvals):
        alpha, x, g, objective, m, diags = _grid_maximize(kernel, extra, ok, pvals, alpha_tol)
    else:
        alpha, x, g, objective, m, diags = maximize_curve(kernel, extra, alpha_tol)

    z_lin, z_quad = _z_coefficients(lam, retrial.theta, m.mean, m.second_moment)
    x_identity = lam * geff * z_lin
    x = snap_to_identity(kernel, alpha, x, x_identity)
    if not (0.0 < alpha < 1.0 / lam) or x <= 0.0:
        raise NumericalError(f"retrial optimum violates its guarantees: alpha={alpha}, x={x}")
    residual = abs(x - x_identity)
    enforced = isinstance(model, CONTINUOUS_PATH_FAMILIES)
    if enforced and residual > IDENTITY_TOL * max(1.0, x):
        raise NumericalError(
            f"fixed-point identity violated for a continuous-path family: residual={residual:.3e}")
    return RetrialResult(
        alpha_star=alpha,
        x_star=x,
        g_tilde_star=objective,
        mean_t=m.mean,
        second_moment_t=m.second_moment,
        welfare_rate=lam * objective,
        z_linear_coeff=z_lin,
        z_quad_coeff=z_quad,
        x_identity_residual=residual,
        identity_enforced=enforced,
        diagnostics=diags,
    )


def _grid_maximize(kernel, extra, grid, vals, alpha_tol):
    best = int(np.argmax(vals))
    lo = grid[max(best - 1, 0)]
    hi = grid[min(best + 1, len(grid) - 1)]
    # dense scan inside the winning bracket
    dense = np.linspace(lo, hi, 257)
    best_alpha, best_val = grid[best], vals[best]
    for a in dense:
        out = curve_point(kernel, float(a))
        if out is None:
            continue
        v = out[0] + extra(float(a))
        if v > best_val:
            best_alpha, best_val = float(a), v
    out = curve_point(kernel, best_alpha)
    g, x, m = out
    diags = SolveDiagnostics(kernel.calls, len(dense) + len(grid), ((lo, hi),),
                             (hi - lo) / 256.0, kernel.n_paths)
    return best_alpha, x, g, best_val, m, diags


def z_value(result: RetrialResult, s) -> float:
    """Per-arrival externality shape z(s); nonnegative, increasing and convex."""
    s = np.asarray(s, float)
    out = result.z_linear_coeff * s + result.z_quad_coeff * s**2
    return float(out) if out.ndim == 0 else out


def retrial_price(scenario: ScenarioConfig, retrial: RetrialConfig,
                  result: RetrialResult) -> PriceFunction:
    """Optimal orbit-queue price: quadratic with cost rate gamma + theta*delta."""
    geff = scenario.gamma + retrial.theta * retrial.delta
    return build_price(scenario, result.alpha_star, result.x_star, gamma_eff=geff)
