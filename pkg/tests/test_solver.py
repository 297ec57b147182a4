"""Two-phase optimisation: threshold search, welfare curve, optimum."""

import math

import numpy as np
import pytest

from queuereg import (
    ConstantMarginal,
    Deterministic,
    Exponential,
    LinearRemaining,
    Mmff,
    PoissonSubordinator,
    ScenarioConfig,
    Uniform,
    g_value,
    identity_threshold,
    sample_path_set,
    solve_alpha_star,
    solve_x_alpha,
)
from queuereg.errors import DomainError, PreconditionError
from queuereg.solver import solve_with_path_set
from queuereg.values import drift_rate, path_set_moments

GAMMA = 1.0

# hand solution of the deterministic-horizon scenario: the first-order
# condition reduces to alpha^2 - 4 alpha + 3.2 = 0
ALPHA_DET = (4.0 - math.sqrt(3.2)) / 2.0
X_DET = 0.25 * ALPHA_DET**2 / (2.0 * (1.0 - 0.5 * ALPHA_DET) ** 2)
G_DET = 2.0 * ALPHA_DET - (0.5 / (1.0 - 0.5 * ALPHA_DET)) * ALPHA_DET**2 / 2.0


def test_threshold_at_zero_mean_is_kappa(scenario_det):
    sc, m = scenario_det
    assert solve_x_alpha(m, sc, GAMMA, 0.0) == m.kappa


def test_threshold_hand_inversion(scenario_det):
    sc, m = scenario_det
    # z(alpha, x) = alpha  ->  x = kappa - alpha*gamma*lam/(1 - lam*alpha)
    assert solve_x_alpha(m, sc, GAMMA, 1.0) == pytest.approx(1.0, abs=1e-9)


def test_threshold_flag_for_large_alpha(scenario_det):
    sc, m = scenario_det
    # ES_alpha(0) = (1 - 0.95) * 2 / 0.5 = 0.2 < 1.9
    assert solve_x_alpha(m, sc, GAMMA, 1.9) is None


def test_threshold_domain_error(scenario_det):
    sc, m = scenario_det
    with pytest.raises(DomainError):
        solve_x_alpha(m, sc, GAMMA, 2.0)


def test_threshold_nonincreasing_in_alpha(scenario_exp, scenario_unif, scenario_poisson):
    for sc, m in (scenario_exp, scenario_unif, scenario_poisson):
        amax = min(1.0 / sc.lam, m.mean_initial_value() / (GAMMA * sc.lam))
        xs, last = [], math.inf
        for alpha in np.linspace(0.0, 0.95 * amax, 20):
            x = solve_x_alpha(m, sc, GAMMA, float(alpha))
            if x is None:
                break
            assert x <= last + 1e-10
            last = x


def test_g_at_zero_is_zero(scenario_det):
    sc, m = scenario_det
    assert g_value(m, sc, GAMMA, 0.0) == 0.0


def test_g_hand_value(scenario_det):
    sc, m = scenario_det
    # g = kappa*alpha - (gamma lam/(1-lam alpha)) * alpha^2/2 at alpha = 1
    assert g_value(m, sc, GAMMA, 1.0) == pytest.approx(1.5, abs=1e-9)


def test_g_exponential_closed_form(scenario_exp):
    sc, m = scenario_exp
    q, kap = 1.0, 1.0
    for alpha in (0.2, 0.4, 0.6):
        expect = kap * alpha - (GAMMA * sc.lam / (1 - sc.lam * alpha)) * (
            (1 - alpha * q) * math.log(1 - alpha * q) + alpha * q) / q**2
        assert g_value(m, sc, GAMMA, alpha) == pytest.approx(expect, rel=1e-10)


def test_g_exponential_vs_monte_carlo_welfare(scenario_exp):
    # thresholded stopping rule applied to sampled paths reproduces g
    sc, m = scenario_exp
    alpha = 0.5
    x = solve_x_alpha(m, sc, GAMMA, alpha)
    d = drift_rate(sc.lam, GAMMA, alpha)
    ps = sample_path_set(m, 200_000, 314)
    mc = path_set_moments(ps, d, x)
    g_mc = mc.value_integral - 0.5 * d * mc.second_moment
    se = math.hypot(mc.value_integral_se, 0.5 * d * mc.second_moment_se)
    assert abs(g_value(m, sc, GAMMA, alpha) - g_mc) <= 3.0 * se


def test_g_precondition_error(scenario_det):
    sc, m = scenario_det
    with pytest.raises(PreconditionError):
        g_value(m, sc, GAMMA, 1.9)


def test_solve_deterministic_hand_solution(scenario_det):
    sc, m = scenario_det
    res = solve_alpha_star(m, sc)
    assert res.alpha_star == pytest.approx(ALPHA_DET, rel=1e-6)
    assert res.x_star == pytest.approx(X_DET, rel=1e-6)
    assert res.g_star == pytest.approx(G_DET, rel=1e-6)
    assert res.welfare_rate == pytest.approx(0.5 * G_DET, rel=1e-6)
    assert res.mean_s == pytest.approx(ALPHA_DET, rel=1e-6)
    assert res.x_identity_residual <= 1e-6 * max(1.0, res.x_star)


def test_solve_result_guarantees(scenario_det, scenario_exp, scenario_unif, scenario_poisson):
    for sc, m in (scenario_det, scenario_exp, scenario_unif, scenario_poisson):
        res = solve_alpha_star(m, sc)
        assert 0.0 < res.alpha_star < 1.0 / sc.lam
        assert res.alpha_star <= m.mean_initial_value() / (GAMMA * sc.lam) + 1e-12
        assert res.x_star > 0.0 and res.g_star > 0.0
        assert res.second_moment_s >= res.mean_s**2
        assert res.x_identity_residual <= 1e-6 * max(1.0, res.x_star)
        assert res.diagnostics.final_bracket_width <= 1e-7


def test_identity_threshold_formula():
    assert identity_threshold(0.5, 1.0, ALPHA_DET, ALPHA_DET**2) == pytest.approx(X_DET, rel=1e-12)


def test_concavity_on_grid(scenario_det, scenario_exp, scenario_unif, scenario_poisson):
    for sc, m in (scenario_det, scenario_exp, scenario_unif, scenario_poisson):
        amax = min(1.0 / sc.lam, m.mean_initial_value() / (GAMMA * sc.lam))
        vals = []
        for alpha in np.linspace(0.0, amax * (1 - 1e-9), 50):
            x = solve_x_alpha(m, sc, GAMMA, float(alpha))
            if x is None:
                break
            vals.append(g_value(m, sc, GAMMA, float(alpha)))
        vals = np.array(vals)
        assert vals.size >= 10
        mid = vals[1:-1]
        chord = 0.5 * (vals[:-2] + vals[2:])
        assert np.all(mid >= chord - 1e-8)


def test_g_upper_bound(scenario_det, scenario_exp, scenario_unif, scenario_poisson):
    # g(alpha) <= E V(0)^2 / (gamma lam) everywhere on the curve
    for sc, m in (scenario_det, scenario_exp, scenario_unif, scenario_poisson):
        bound = m.mean_square_initial_value() / (GAMMA * sc.lam)
        amax = min(1.0 / sc.lam, m.mean_initial_value() / (GAMMA * sc.lam))
        for alpha in np.linspace(0.0, amax * (1 - 1e-9), 25):
            x = solve_x_alpha(m, sc, GAMMA, float(alpha))
            if x is None:
                break
            assert g_value(m, sc, GAMMA, float(alpha)) <= bound + 1e-12


def test_grid_oracle_never_beats_optimum_coarse(scenario_det):
    """Brute force over (alpha, x) with independent hand formulas, coarse grid."""
    sc, m = scenario_det
    res = solve_alpha_star(m, sc)
    lam, kap, t0 = sc.lam, 2.0, 10.0
    alphas = np.arange(5e-3, 2.0, 5e-3)
    xs = np.arange(0.0, kap + 1e-12, 5e-3)
    a, x = np.meshgrid(alphas, xs, indexing="ij")
    drift = GAMMA * lam / (1.0 - lam * a)
    es = np.minimum((kap - x) / drift, t0)
    es2 = es**2
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = kap * es - GAMMA * lam * es2 / (2.0 * (1.0 - lam * es))
    phi[lam * es >= 1.0] = -np.inf
    assert phi.max() <= res.g_star + 1e-5


def test_monte_carlo_solve_deterministic_and_reproducible():
    model = Mmff(2.0, np.array([[-1.0, 1.0], [2.0, -2.0]]), np.array([1.0, 2.0]),
                 np.array([0.5, 0.5]))
    sc = ScenarioConfig(lam=0.5, gamma=1.0)
    r1 = solve_alpha_star(model, sc, mc_paths=20_000, seed=7)
    r2 = solve_alpha_star(model, sc, mc_paths=20_000, seed=7)
    assert r1 == r2
    assert r1.x_identity_residual <= 1e-6 * max(1.0, r1.x_star)
    assert r1.diagnostics.mc_paths == 20_000


def test_solve_with_path_set_matches_model_route(scenario_exp):
    sc, m = scenario_exp
    ps = sample_path_set(m, 50_000, 12)
    res_ps = solve_with_path_set(ps, sc)
    res_cf = solve_alpha_star(m, sc)
    # Monte-Carlo optimum close to the closed-form one at 50k paths
    assert res_ps.alpha_star == pytest.approx(res_cf.alpha_star, abs=0.02)
    assert res_ps.g_star == pytest.approx(res_cf.g_star, rel=0.02)
