"""Sample paths, threshold stopping times and stop-time moments."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from queuereg import (
    ConstantMarginal,
    Deterministic,
    Empirical,
    EmpiricalQuantile,
    Exponential,
    LinearPath,
    LinearRemaining,
    Mmff,
    PoissonSubordinator,
    StepPath,
    Uniform,
    mean_stop,
    path_value_integral,
    sample_path,
    sample_path_set,
    second_moment_stop,
    stop_time,
    stop_moments,
)
from queuereg.errors import DomainError, ParameterError
from queuereg.values import drift_rate, path_set_moments

RNG = np.random.default_rng


# ---------------------------------------------------------------------------
# path types and invariants
# ---------------------------------------------------------------------------


def test_step_path_validation():
    with pytest.raises(ParameterError):
        StepPath(np.array([1.0, 2.0]), np.array([1.0, 0.0]))  # first knot not at 0
    with pytest.raises(ParameterError):
        StepPath(np.array([0.0, 1.0]), np.array([1.0, 2.0]))  # increasing values
    with pytest.raises(ParameterError):
        StepPath(np.array([0.0, 0.0]), np.array([1.0, 0.0]))  # repeated times
    with pytest.raises(ParameterError):
        StepPath(np.array([0.0]), np.array([-1.0]))  # negative start
    p = StepPath(np.array([0.0, 2.0]), np.array([5.0, 1.0]))
    assert p.tail_value == 1.0
    assert p.value_at(0.0) == 5.0 and p.value_at(1.999) == 5.0 and p.value_at(2.0) == 1.0


def test_linear_path_validation():
    with pytest.raises(ParameterError):
        LinearPath(intercept=-1.0, slope=-1.0, floor_time=1.0)
    with pytest.raises(ParameterError):
        LinearPath(intercept=1.0, slope=0.5, floor_time=1.0)
    p = LinearPath(intercept=3.0, slope=-1.0, floor_time=3.0)
    assert p.value_at(1.0) == 2.0 and p.value_at(5.0) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**63 - 1))
def test_sampled_paths_satisfy_invariants(seed):
    rng = RNG(seed)
    models = [
        ConstantMarginal(2.0, Exponential(1.3)),
        PoissonSubordinator(2.5, 1.0),
        Mmff(1.0, np.array([[-1.0, 1.0], [2.0, -2.0]]), np.array([1.0, 2.0]), np.array([0.5, 0.5])),
    ]
    for model in models:
        p = sample_path(model, rng)
        t = p.times
        assert t[0] == 0.0
        assert np.all(np.diff(t) > 0.0)
        assert np.all(np.diff(p.values) <= 1e-12)
        assert p.values[0] >= 0.0


def test_constant_marginal_path_single_drop():
    path = sample_path(ConstantMarginal(2.0, Deterministic(10.0)), RNG(0))
    assert np.array_equal(path.times, [0.0, 10.0])
    assert np.array_equal(path.values, [2.0, 0.0])
    assert path.tail_value == 0.0


def test_poisson_path_unit_jumps():
    path = sample_path(PoissonSubordinator(3.0, 1.0), RNG(5))
    assert np.allclose(np.diff(path.values), -1.0)
    assert np.all(np.diff(path.times) > 0.0)
    assert path.values[0] == 3.0


def test_mmff_path_slopes_match_drain_rates():
    model = Mmff(1.0, np.array([[-1.0, 1.0], [2.0, -2.0]]), np.array([1.0, 2.0]),
                 np.array([0.5, 0.5]))
    rng = RNG(3)
    for _ in range(20):
        p = sample_path(model, rng)
        slopes = np.diff(p.values) / np.diff(p.times)
        assert np.all(np.isclose(slopes, -1.0) | np.isclose(slopes, -2.0))
        assert p.values[0] == 1.0


def test_mmff_mean_value_matches_uniformization_oracle():
    # independent CTMC oracle: E V(tau) = kappa - int_0^tau eta' exp(Q t) u dt
    from scipy.integrate import quad
    from scipy.linalg import expm

    q = np.array([[-1.0, 1.0], [2.0, -2.0]])
    u = np.array([1.0, 2.0])
    eta = np.array([0.6, 0.4])
    kappa, tau = 5.0, 0.8
    oracle = kappa - quad(lambda t: eta @ expm(q * t) @ u, 0.0, tau)[0]

    model = Mmff(kappa, q, u, eta)
    rng = RNG(99)
    vals = np.array([sample_path(model, rng).value_at(tau) for _ in range(4000)])
    se = vals.std(ddof=1) / math.sqrt(vals.size)
    assert abs(vals.mean() - oracle) <= 3.0 * se


def test_mmff_validation():
    with pytest.raises(ParameterError):
        Mmff(1.0, np.array([[-1.0, 0.5], [2.0, -2.0]]), np.array([1.0, 2.0]), np.array([0.5, 0.5]))
    with pytest.raises(ParameterError):
        Mmff(1.0, np.array([[-1.0, 1.0], [2.0, -2.0]]), np.array([1.0, -2.0]), np.array([0.5, 0.5]))
    with pytest.raises(ParameterError):
        Mmff(1.0, np.array([[-1.0, 1.0], [2.0, -2.0]]), np.array([1.0, 2.0]), np.array([0.5, 0.2]))


# ---------------------------------------------------------------------------
# stopping times
# ---------------------------------------------------------------------------


def test_stop_time_flat_segment():
    # V = 2 on [0, 10]: 2 - s = 1 at s = 1
    path = StepPath(np.array([0.0, 10.0]), np.array([2.0, 0.0]))
    assert stop_time(path, drift=1.0, x=1.0) == pytest.approx(1.0, abs=0)


def test_stop_time_threshold_met_at_zero():
    path = StepPath(np.array([0.0, 10.0]), np.array([2.0, 0.0]))
    assert stop_time(path, drift=0.7, x=2.0) == 0.0
    assert stop_time(path, drift=0.0, x=5.0) == 0.0


def test_stop_time_jump_crossing():
    # knots (0,5),(2,1): adjusted value 5-0.5*2=4 just before the jump, 1-1=0 at s=2
    path = StepPath(np.array([0.0, 2.0]), np.array([5.0, 1.0]))
    assert stop_time(path, drift=0.5, x=2.0) == pytest.approx(2.0, abs=0)


def test_stop_time_infinite_sentinel():
    path = StepPath(np.array([0.0]), np.array([3.0]))
    assert stop_time(path, drift=0.0, x=1.0) == math.inf


def test_stop_time_linear_path():
    p = LinearPath(intercept=4.0, slope=-1.0, floor_time=4.0)
    # 4 - s - 0.5 s = 1  ->  s = 2
    assert stop_time(p, drift=0.5, x=1.0) == pytest.approx(2.0)
    # crossing after the floor: value 0, -0.5 s <= -1 at s = 2... from floor time 4
    assert stop_time(p, drift=0.5, x=-3.0) == pytest.approx(6.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**62), st.floats(0.0, 3.0), st.floats(0.05, 2.0))
def test_stop_time_infimum_convention_and_bound(seed, x, drift):
    """At S the adjusted value is <= x; before S it stays above; bound holds."""
    rng = RNG(seed)
    for model in (ConstantMarginal(2.0, Exponential(1.0)), PoissonSubordinator(2.2, 1.5)):
        path = sample_path(model, rng)
        s = stop_time(path, drift, x)
        assert s <= (path.values[0] + abs(x)) / drift + 1e-12
        assert path.value_at(s) - drift * s <= x + 1e-12
        if s > 0.0:
            for u in np.linspace(0.0, s, 8)[:-1]:
                assert path.value_at(u) - drift * u > x - 1e-12


def test_path_value_integral_step():
    path = StepPath(np.array([0.0, 2.0]), np.array([5.0, 1.0]))
    assert path_value_integral(path, 1.0) == 5.0
    assert path_value_integral(path, 3.0) == 11.0


def test_path_value_integral_linear():
    p = LinearPath(intercept=4.0, slope=-1.0, floor_time=4.0)
    assert path_value_integral(p, 2.0) == pytest.approx(4 * 2 - 2.0)
    assert path_value_integral(p, 6.0) == pytest.approx(8.0)


# ---------------------------------------------------------------------------
# stop-time moments: hand values
# ---------------------------------------------------------------------------


def test_mean_stop_deterministic_hand_value():
    m = ConstantMarginal(2.0, Deterministic(10.0))
    # z = (kappa - x)(1 - lam a)/(gamma lam) = (2-1)(0.5)/0.5 = 1; ES = min(10, 1)
    assert mean_stop(m, 0.5, 1.0, 1.0, 1.0) == pytest.approx(1.0, abs=1e-14)


@pytest.mark.parametrize("model", [
    ConstantMarginal(2.0, Deterministic(10.0)),
    ConstantMarginal(1.0, Exponential(1.0)),
    LinearRemaining(Uniform(0.0, 1.0)),
    PoissonSubordinator(2.5, 1.0),
])
def test_stop_moments_vanish_at_kappa(model):
    assert mean_stop(model, 0.5, 1.0, 0.4, model.kappa) == 0.0
    assert second_moment_stop(model, 0.5, 1.0, 0.4, model.kappa) == 0.0


def test_second_moment_degenerate_stop():
    # S = 1 almost surely: second moment equals the squared mean
    m = ConstantMarginal(2.0, Deterministic(10.0))
    assert second_moment_stop(m, 0.5, 1.0, 1.0, 1.0) == pytest.approx(1.0, abs=1e-14)


def test_linear_remaining_uniform_second_moment_piecewise():
    # closed piecewise form for T ~ U[0, 1]
    lam, gamma = 0.5, 1.0
    m = LinearRemaining(Uniform(0.0, 1.0))
    for alpha in (0.05, 0.2, 0.3):
        b = 1.0 + gamma * lam / (1.0 - lam * alpha)
        ell = alpha * b
        if ell < 0.5:
            x = 1.0 - math.sqrt(2.0 * ell)
            expect = (1.0 - x) ** 3 / 3.0 / b**2
        else:
            x = 0.5 - ell
            expect = ((1.0 - x) ** 3 - (-x) ** 3) / 3.0 / b**2
        got = second_moment_stop(m, lam, gamma, alpha, x)
        assert got == pytest.approx(expect, rel=1e-12)


def test_poisson_mean_matches_survival_quadrature():
    # independent oracle: integrate the exact survival function numerically
    from scipy import integrate, stats

    kappa, q, lam, gamma = 2.5, 1.0, 0.4, 1.0
    m = PoissonSubordinator(kappa, q)
    for alpha, x in ((0.3, 0.2), (0.8, 0.9), (1.5, 1.7)):
        d = drift_rate(lam, gamma, alpha)

        def survival(s):
            b = kappa - x - d * s
            return 0.0 if b < 0 else stats.poisson.cdf(math.floor(b), q * s)

        j = int(math.floor(kappa - x))
        bps = sorted({(kappa - x - k) / d for k in range(j + 1)} | {0.0})
        es = sum(integrate.quad(survival, a, b, limit=200)[0] for a, b in zip(bps[:-1], bps[1:]))
        es2 = sum(integrate.quad(lambda s: 2 * s * survival(s), a, b, limit=200)[0]
                  for a, b in zip(bps[:-1], bps[1:]))
        assert mean_stop(m, lam, gamma, alpha, x) == pytest.approx(es, rel=1e-9)
        assert second_moment_stop(m, lam, gamma, alpha, x) == pytest.approx(es2, rel=1e-9)


def test_poisson_closed_form_within_monte_carlo_error():
    m = PoissonSubordinator(2.5, 1.0)
    lam, gamma, alpha, x = 0.4, 1.0, 0.5, 0.5
    ps = sample_path_set(m, 1_000_000, 2024)
    mc = path_set_moments(ps, drift_rate(lam, gamma, alpha), x)
    assert abs(mean_stop(m, lam, gamma, alpha, x) - mc.mean) <= 3.0 * mc.mean_se
    assert abs(second_moment_stop(m, lam, gamma, alpha, x) - mc.second_moment) <= 3.0 * mc.second_moment_se


@pytest.mark.parametrize("model,lam", [
    (ConstantMarginal(1.0, Exponential(1.0)), 0.5),
    (LinearRemaining(Uniform(0.0, 1.0)), 0.5),
    (PoissonSubordinator(2.5, 1.0), 0.4),
])
def test_closed_forms_agree_with_path_sampling(model, lam):
    """Closed forms against a 30k-path Monte-Carlo oracle on a small grid."""
    gamma = 1.0
    ps = sample_path_set(model, 30_000, 99)
    amax = 0.8 * min(1.0 / lam, model.mean_initial_value() / (gamma * lam))
    for alpha in np.linspace(0.1 * amax, amax, 3):
        for x in np.linspace(0.0, model.kappa * 0.9, 3):
            d = drift_rate(lam, gamma, float(alpha))
            mc = path_set_moments(ps, d, float(x))
            cm = model.stop_mean(d, float(x))
            c2 = model.stop_second_moment(d, float(x))
            cv = model.stop_value_integral(d, float(x))
            assert abs(cm - mc.mean) <= max(3.0 * mc.mean_se, 1e-9)
            assert abs(c2 - mc.second_moment) <= max(3.0 * mc.second_moment_se, 1e-9)
            assert abs(cv - mc.value_integral) <= max(3.0 * mc.value_integral_se, 1e-9)


@pytest.mark.parametrize("model,lam", [
    (ConstantMarginal(2.0, Deterministic(10.0)), 0.5),
    (ConstantMarginal(1.0, Exponential(1.0)), 0.5),
    (LinearRemaining(Uniform(0.0, 1.0)), 0.5),
    (PoissonSubordinator(2.5, 1.0), 0.4),
])
def test_mean_stop_nonincreasing_in_threshold(model, lam):
    for alpha in (0.1, 0.4):
        xs = np.linspace(0.0, model.kappa, 25)
        means = [mean_stop(model, lam, 1.0, alpha, float(x)) for x in xs]
        assert all(a >= b - 1e-12 for a, b in zip(means, means[1:]))


def test_mean_stop_bound():
    # 0 <= ES <= (kappa + |x|)/(gamma lam)
    for model, lam in ((ConstantMarginal(1.0, Exponential(1.0)), 0.5),
                       (PoissonSubordinator(2.5, 1.0), 0.4)):
        for alpha in (0.2, 0.7):
            for x in (0.0, 0.5, 1.1):
                v = mean_stop(model, lam, 1.0, alpha, x)
                assert 0.0 <= v <= (model.kappa + abs(x)) / (1.0 * lam) + 1e-12


def test_domain_errors():
    m = ConstantMarginal(2.0, Deterministic(10.0))
    with pytest.raises(DomainError):
        mean_stop(m, 0.5, 1.0, 2.5, 0.5)  # alpha >= 1/lam
    with pytest.raises(DomainError):
        drift_rate(0.5, 1.0, -0.1)
    with pytest.raises(ParameterError):
        ConstantMarginal(-1.0, Deterministic(1.0))
    with pytest.raises(ParameterError):
        Deterministic(0.0)
    with pytest.raises(ParameterError):
        Uniform(1.0, 0.5)
    with pytest.raises(ParameterError):
        LinearRemaining(Exponential(1.0))  # unbounded horizon


# ---------------------------------------------------------------------------
# Monte-Carlo models
# ---------------------------------------------------------------------------


def test_empirical_model_exact_enumeration():
    paths = (
        StepPath(np.array([0.0, 2.0]), np.array([5.0, 1.0])),
        StepPath(np.array([0.0, 1.0]), np.array([3.0, 0.0])),
    )
    model = Empirical(paths)
    lam, gamma, alpha, x = 0.25, 1.0, 0.5, 2.0
    d = drift_rate(lam, gamma, alpha)
    expect = np.mean([stop_time(p, d, x) for p in paths])
    got = stop_moments(model, lam, gamma, alpha, x)
    assert got.mean == pytest.approx(expect, rel=1e-12)
    assert got.n_paths == 2


def test_mmff_moments_reported_with_standard_errors():
    model = Mmff(1.0, np.array([[-1.0, 1.0], [2.0, -2.0]]), np.array([1.0, 2.0]),
                 np.array([0.5, 0.5]))
    got = stop_moments(model, 0.5, 1.0, 0.3, 0.2, n_paths=5_000, seed=4)
    assert got.mean_se > 0.0 and got.n_paths == 5_000
    assert got.second_moment >= got.mean**2


def test_path_set_stop_matches_scalar_stop():
    """Vectorised stops agree exactly with per-path scalar evaluation."""
    rng = RNG(11)
    for model in (ConstantMarginal(1.0, Exponential(1.0)),
                  PoissonSubordinator(2.2, 1.3),
                  LinearRemaining(Uniform(0.0, 1.0)),
                  Mmff(1.0, np.array([[-1.0, 1.0], [2.0, -2.0]]), np.array([1.0, 2.0]),
                       np.array([0.5, 0.5]))):
        paths = [sample_path(model, RNG(1000 + i)) for i in range(40)]
        ps = sample_path_set(model, 40, RNG(777))
        for drift, x in ((0.8, 0.3), (1.5, 0.0)):
            vec = ps.stop_times(drift, x)
            ints = ps.value_integrals(vec)
            # rebuild the scalar paths from the set rows
            for i in range(40):
                row_t = ps.times[i][np.isfinite(ps.times[i])]
                row_v = ps.values[i][: row_t.size]
                if hasattr(ps, "tail_slopes"):
                    from queuereg import PiecewiseLinearPath
                    p = PiecewiseLinearPath(row_t, row_v, float(ps.tail_slopes[i]))
                else:
                    p = StepPath(row_t, row_v)
                s_scalar = stop_time(p, drift, x)
                assert vec[i] == pytest.approx(s_scalar, rel=1e-12, abs=1e-12)
                assert ints[i] == pytest.approx(path_value_integral(p, s_scalar), rel=1e-10, abs=1e-12)


def test_empirical_quantile_integrals_match_numeric():
    sample = np.array([0.2, 0.5, 1.1, 2.0])
    d = EmpiricalQuantile(sample)
    for z in (0.3, 0.9, 1.5, 3.0):
        assert d.min_mean(z) == pytest.approx(np.minimum(sample, z).mean(), rel=1e-14)
        assert d.min_second_moment(z) == pytest.approx((np.minimum(sample, z) ** 2).mean(), rel=1e-14)
    for x in (0.0, 0.4, 1.2):
        assert d.excess_mean(x) == pytest.approx(np.maximum(sample - x, 0).mean(), rel=1e-14)
