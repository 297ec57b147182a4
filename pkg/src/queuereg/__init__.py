"""Socially optimal pricing for single-server queues whose customers choose
their service durations on the fly.

The package solves the two-phase welfare optimisation (threshold search over
stopping rules, then concave maximisation over the mean service time), builds
the implementing quadratic price function, handles the balking and retrial
variants, and validates every analytic quantity with a discrete-event
simulator and Monte-Carlo oracles.
"""

from .balking import (
    AffineScale,
    BalkingResult,
    PowerScale,
    TypedValueModel,
    entry_fee,
    make_bank,
    phase_a,
    phase_b,
    solve_balking,
    type_benefit,
)
from .errors import (
    ConfigError,
    DomainError,
    NumericalError,
    ParameterError,
    PreconditionError,
    QueueRegError,
    StabilityError,
)
from .pricing import PriceFunction, ServerCost, build_price, externalities, marginal_price
from .retrial import RetrialConfig, RetrialResult, retrial_price, solve_retrial, z_value
from .sim import (
    ExternalityReport,
    RetrialSimConfig,
    SimConfig,
    SimReport,
    estimate_externalities,
    estimate_retrial_externalities,
    simulate_balking,
    simulate_mg1,
    simulate_retrial,
)
from .solver import (
    ScenarioConfig,
    SolveResult,
    g_value,
    identity_threshold,
    solve_alpha_star,
    solve_x_alpha,
)
from .values import (
    ConstantMarginal,
    Deterministic,
    Empirical,
    EmpiricalQuantile,
    Exponential,
    LinearPath,
    LinearRemaining,
    Mmff,
    PiecewiseLinearPath,
    PoissonSubordinator,
    StepPath,
    StopMoments,
    Uniform,
    mean_stop,
    path_value_integral,
    sample_path,
    sample_path_set,
    second_moment_stop,
    stop_moments,
    stop_time,
)

__version__ = "0.1.0"
