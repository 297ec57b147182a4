"""Discrete-event simulation of the priced queue, its balking and retrial variants.

Service durations are endogenous: each customer stops at the first service age
where their sampled marginal value drops to the marginal price, i.e. at
``stop_time(path, price.drift, price.linear_coeff)``.  The plain FCFS system
uses the exact waiting-time recursion (vectorised running-minimum form); only
the retrial system needs an event timeline.  All estimates carry batch-means
standard errors and are bit-reproducible for a fixed (config, seed).
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from numpy.random import Generator, SeedSequence, default_rng

from .balking import TypedValueModel
from .errors import DomainError, NumericalError, ParameterError, StabilityError
from .pricing import PriceFunction
from .solver import ScenarioConfig
from .values import Empirical, ValueModel

UTILIZATION_LIMIT = 1.0 - 1e-3
_CHUNK = 250_000


@dataclass(frozen=True)
class RetrialSimConfig:
    theta: float
    delta: float
    cost_kind: str = "deterministic"  # per-retrial cost draw: deterministic | exponential

    def __post_init__(self):
        if self.theta <= 0.0 or self.delta <= 0.0:
            raise ParameterError("retrial rate and cost must be positive")
        if self.cost_kind not in ("deterministic", "exponential"):
            raise ParameterError("cost_kind must be deterministic or exponential")


@dataclass(frozen=True)
class SimConfig:
    scenario: ScenarioConfig
    model: Optional[ValueModel]
    price: PriceFunction
    horizon: int = 1_000_000
    warmup_fraction: float = 0.1
    batches: int = 20
    seed: int = 0
    waiting_cost_kind: str = "deterministic"  # mean is always the scenario's gamma
    retrial: Optional[RetrialSimConfig] = None
    join_threshold: Optional[float] = None
    typed_model: Optional[TypedValueModel] = None

    def __post_init__(self):
        if self.horizon < 1_000:
            raise ParameterError("horizon must be at least 1000 arrivals")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ParameterError("warmup fraction must lie in [0, 1)")
        if self.batches < 2:
            raise ParameterError("need at least two batches for standard errors")
        if self.waiting_cost_kind not in ("deterministic", "exponential"):
            raise ParameterError("waiting_cost_kind must be deterministic or exponential")


@dataclass(frozen=True)
class SimReport:
    welfare_rate: float
    welfare_rate_se: float
    mean_wait: float
    mean_wait_se: float
    mean_service: float
    mean_service_se: float
    service_second_moment: float
    service_second_moment_se: float
    utilization: float
    mean_payment: float
    arrivals: int
    served: int
    seed: int
    mean_retrials: Optional[float] = None
    mean_retrials_se: Optional[float] = None
    join_fraction: Optional[float] = None


@dataclass(frozen=True)
class ExternalityReport:
    demand: float
    saved_wait: float
    saved_wait_se: float
    replications: int
    seed: int
    saved_retrials: Optional[float] = None
    saved_retrials_se: Optional[float] = None
    coupled_fraction: float = 1.0


# ---------------------------------------------------------------------------
# Shared machinery
# ---------------------------------------------------------------------------


def _streams(seed: int, names: tuple) -> dict:
    children = SeedSequence(seed).spawn(len(names))
    return {name: default_rng(ss) for name, ss in zip(names, children)}


def _draw_costs(kind: str, mean: float, rng: Generator, n: int) -> np.ndarray:
    if kind == "deterministic":
        return np.full(n, mean)
    return rng.exponential(mean, n)


def lindley_waits(services: np.ndarray, interarrivals: np.ndarray,
                  initial_workload: float = 0.0) -> np.ndarray:
    """Waiting times of successive FCFS arrivals.

    ``interarrivals[i]`` is the gap in front of arrival i; ``services[i]`` is
    that arrival's own service time.  ``initial_workload`` is the work in
    system at the window start.  Uses the running-minimum form of the
    recursion w_i = max(0, w_{i-1} + S_{i-1} - tau_i), so it is exact.
    """
    n = interarrivals.size
    x = np.empty(n)
    x[0] = -interarrivals[0]
    x[1:] = services[:-1] - interarrivals[1:]
    y = np.cumsum(x)
    run_min = np.minimum.accumulate(y)
    w = np.maximum(initial_workload + y, y - run_min)
    return np.maximum(w, 0.0)


def _service_batch(model: ValueModel, drift: float, x: float, n: int, rng: Generator):
    """Service durations and consumed-value integrals of n independent customers."""
    if isinstance(model, Empirical):
        base = model.sample_path_set(0, rng)
        stops = base.stop_times(drift, x)
        vints = base.value_integrals(stops)
        idx = rng.integers(len(model.paths), size=n)
        return stops[idx], vints[idx]
    s_parts, v_parts = [], []
    done = 0
    while done < n:
        m = min(_CHUNK, n - done)
        ps = model.sample_path_set(m, rng)
        stops = ps.stop_times(drift, x)
        s_parts.append(stops)
        v_parts.append(ps.value_integrals(stops))
        done += m
    return np.concatenate(s_parts), np.concatenate(v_parts)


def _batch_mean_se(x: np.ndarray, batches: int):
    means = np.array([c.mean() for c in np.array_split(x, batches)])
    return float(x.mean()), float(means.std(ddof=1) / math.sqrt(batches))


def _batch_rate_se(contrib: np.ndarray, times: np.ndarray, batches: int):
    """Rate of accumulation of ``contrib`` over the span of ``times``."""
    idx = np.array_split(np.arange(contrib.size), batches)
    bounds = [times[c[0]] for c in idx] + [times[-1]]
    rates = np.array([
        contrib[c].sum() / max(bounds[k + 1] - bounds[k], 1e-300)
        for k, c in enumerate(idx)
    ])
    total = contrib.sum() / max(times[-1] - times[0], 1e-300)
    return float(total), float(rates.std(ddof=1) / math.sqrt(batches))


def _check_stable(lam: float, services: np.ndarray) -> None:
    if lam * services.mean() >= UTILIZATION_LIMIT:
        raise StabilityError(
            f"offered load {lam * services.mean():.4f} exceeds the stability guard")


# ---------------------------------------------------------------------------
# Plain FCFS system
# ---------------------------------------------------------------------------


def simulate_mg1(cfg: SimConfig) -> SimReport:
    """FCFS single-server run under the configured price."""
    if cfg.model is None:
        raise ParameterError("simulate_mg1 needs a value model")
    rngs = _streams(cfg.seed, ("arrivals", "paths", "costs"))
    n = cfg.horizon
    lam = cfg.scenario.lam
    inter = rngs["arrivals"].exponential(1.0 / lam, n)
    arr = np.cumsum(inter)
    services, vints = _service_batch(cfg.model, cfg.price.drift, cfg.price.linear_coeff,
                                     n, rngs["paths"])
    _check_stable(lam, services)
    waits = lindley_waits(services, inter)
    costs = _draw_costs(cfg.waiting_cost_kind, cfg.scenario.gamma, rngs["costs"], n)
    k0 = int(n * cfg.warmup_fraction)
    return _fcfs_report(cfg, arr[k0:], services[k0:], vints[k0:], waits[k0:], costs[k0:],
                        join_fraction=None, arrivals=n)


def _fcfs_report(cfg: SimConfig, arr, services, vints, waits, costs,
                 *, join_fraction, arrivals) -> SimReport:
    if arr.size < cfg.batches:
        raise DomainError("too few post-warmup customers for the requested batches")
    welfare = vints - costs * waits
    rate, rate_se = _batch_rate_se(welfare, arr, cfg.batches)
    mw, mw_se = _batch_mean_se(waits, cfg.batches)
    ms, ms_se = _batch_mean_se(services, cfg.batches)
    m2, m2_se = _batch_mean_se(services**2, cfg.batches)
    span = max(arr[-1] - arr[0], 1e-300)
    return SimReport(
        welfare_rate=rate,
        welfare_rate_se=rate_se,
        mean_wait=mw,
        mean_wait_se=mw_se,
        mean_service=ms,
        mean_service_se=ms_se,
        service_second_moment=m2,
        service_second_moment_se=m2_se,
        utilization=float(services.sum() / span),
        mean_payment=float(np.mean(cfg.price.price(services))),
        arrivals=arrivals,
        served=int(arr.size),
        seed=cfg.seed,
        join_fraction=join_fraction,
    )


def simulate_balking(cfg: SimConfig) -> SimReport:
    """Thinned FCFS run: type-T customers join only when T exceeds the threshold."""
    if cfg.typed_model is None or cfg.join_threshold is None:
        raise ParameterError("simulate_balking needs typed_model and join_threshold")
    rngs = _streams(cfg.seed, ("arrivals", "paths", "costs", "types"))
    n = cfg.horizon
    lam = cfg.scenario.lam
    inter = rngs["arrivals"].exponential(1.0 / lam, n)
    arr = np.cumsum(inter)
    types = cfg.typed_model.type_dist.sample(rngs["types"], n)
    join = types > cfg.join_threshold
    arr_j = arr[join]
    if arr_j.size < cfg.batches:
        raise DomainError("too few joining customers")

    factors = np.asarray(cfg.typed_model.scale(types[join]), float)
    base = cfg.typed_model.base
    s_parts, v_parts = [], []
    done = 0
    while done < arr_j.size:
        m = min(_CHUNK, arr_j.size - done)
        ps = base.sample_path_set(m, rngs["paths"]).scaled(factors[done:done + m])
        stops = ps.stop_times(cfg.price.drift, cfg.price.linear_coeff)
        s_parts.append(stops)
        v_parts.append(ps.value_integrals(stops))
        done += m
    services = np.concatenate(s_parts)
    vints = np.concatenate(v_parts)
    lam_eff = lam * arr_j.size / n
    _check_stable(lam_eff, services)

    inter_j = np.diff(arr_j, prepend=0.0)
    waits = lindley_waits(services, inter_j)
    costs = _draw_costs(cfg.waiting_cost_kind, cfg.scenario.gamma, rngs["costs"], arr_j.size)
    k0 = int(arr_j.size * cfg.warmup_fraction)
    return _fcfs_report(cfg, arr_j[k0:], services[k0:], vints[k0:], waits[k0:], costs[k0:],
                        join_fraction=float(arr_j.size / n), arrivals=n)


# ---------------------------------------------------------------------------
# Coupled twin runs: waiting externalities of a tagged demand
# ---------------------------------------------------------------------------


def estimate_externalities(cfg: SimConfig, demand: float, *,
                           replications: int = 1_000,
                           warmup_arrivals: int = 100_000) -> ExternalityReport:
    """Waiting time other customers would be spared if a tagged demand were zero.

    Twin runs share every random draw; the only difference is the tagged
    customer's service (``demand`` versus zero).  Each replication accumulates
    the waiting-time difference until the two workload paths merge, which
    happens at the end of the busy period containing the tagged customer, so
    the per-replication difference is exact.
    """
    if cfg.model is None:
        raise ParameterError("externality estimation needs a value model")
    if demand < 0.0:
        raise DomainError("tagged demand must be nonnegative")
    if replications < 2:
        raise ParameterError("need at least two replications")
    lam = cfg.scenario.lam
    drift, x = cfg.price.drift, cfg.price.linear_coeff
    roots = SeedSequence(cfg.seed).spawn(replications)
    saved = np.empty(replications)
    for r, root in enumerate(roots):
        rng_a, rng_p = (default_rng(s) for s in root.spawn(2))
        inter = rng_a.exponential(1.0 / lam, warmup_arrivals + 1)
        services, _ = _service_batch(cfg.model, drift, x, warmup_arrivals + 1, rng_p)
        if r == 0:
            _check_stable(lam, services)
        waits = lindley_waits(services, inter)
        w_tag = waits[-1]
        saved[r] = _tail_saved_wait(w_tag, demand, lam, cfg, rng_a, rng_p)
    return ExternalityReport(
        demand=demand,
        saved_wait=float(saved.mean()),
        saved_wait_se=float(saved.std(ddof=1) / math.sqrt(replications)),
        replications=replications,
        seed=cfg.seed,
    )


def _tail_saved_wait(w_tag: float, demand: float, lam: float, cfg: SimConfig,
                     rng_a: Generator, rng_p: Generator) -> float:
    """Sum of post-tagged waiting-time differences until the twin paths merge."""
    if demand == 0.0:
        return 0.0
    drift, x = cfg.price.drift, cfg.price.linear_coeff
    total = 0.0
    u_with = w_tag + demand
    u_without = w_tag
    block = 4096
    for _ in range(4000):
        inter = rng_a.exponential(1.0 / lam, block)
        services, _ = _service_batch(cfg.model, drift, x, block, rng_p)
        w1 = lindley_waits(services, inter, initial_workload=u_with)
        w0 = lindley_waits(services, inter, initial_workload=u_without)
        diff = w1 - w0
        merged = np.nonzero(diff <= 0.0)[0]
        if merged.size:
            total += diff[: merged[0]].sum()
            return total
        total += diff.sum()
        # continue from the workload just after the block's last arrival
        u_with = w1[-1] + services[-1]
        u_without = w0[-1] + services[-1]
    raise NumericalError("twin runs failed to merge; queue too close to instability")


# ---------------------------------------------------------------------------
# Retrial system
# ---------------------------------------------------------------------------


def simulate_retrial(cfg: SimConfig) -> SimReport:
    """Orbit queue with exponential retrials under the configured price.

    Failed attempts during busy stretches are tallied from their Poisson law
    instead of being scheduled one by one, which keeps the event count
    independent of the retrial rate while leaving every estimate exact in
    distribution.
    """
    if cfg.retrial is None or cfg.model is None:
        raise ParameterError("simulate_retrial needs a retrial block and a value model")
    theta = cfg.retrial.theta
    rngs = _streams(cfg.seed, ("arrivals", "paths", "costs", "retrial_costs",
                               "claims", "counts"))
    n = cfg.horizon
    lam = cfg.scenario.lam
    inter = rngs["arrivals"].exponential(1.0 / lam, n)
    arr = np.cumsum(inter)
    services, vints = _service_batch(cfg.model, cfg.price.drift, cfg.price.linear_coeff,
                                     n, rngs["paths"])
    _check_stable(lam, services)
    costs = _draw_costs(cfg.waiting_cost_kind, cfg.scenario.gamma, rngs["costs"], n)
    retrial_costs = _draw_costs(cfg.retrial.cost_kind, cfg.retrial.delta,
                                rngs["retrial_costs"], n)
    rng_claims, rng_counts = rngs["claims"], rngs["counts"]

    # state
    t_now = 0.0
    busy_accum = 0.0
    busy_until = math.inf  # inf encodes an idle server
    idle = True
    orbit: list = []       # entries (arrival_index, arrival_time, busy_accum at entry)
    claim_at = math.inf
    i_arr = 0

    order = []             # arrival indices in service-start order
    start_times = []
    waits = np.zeros(n)
    retrials = np.zeros(n)

    def advance(to: float):
        nonlocal t_now, busy_accum
        if not idle:
            busy_accum += to - t_now
        t_now = to

    def start_service(idx: int, at: float):
        nonlocal busy_until, idle, claim_at
        order.append(idx)
        start_times.append(at)
        busy_until = at + services[idx]
        idle = False
        claim_at = math.inf

    def begin_idle(at: float):
        nonlocal idle, busy_until, claim_at
        idle = True
        busy_until = math.inf
        claim_at = (at + rng_claims.exponential(1.0 / (len(orbit) * theta))
                    if orbit else math.inf)

    while i_arr < n or orbit or not idle:
        t_arrival = arr[i_arr] if i_arr < n else math.inf
        t_next = min(t_arrival, busy_until, claim_at)
        if t_next == t_arrival:
            advance(t_arrival)
            if idle:
                start_service(i_arr, t_arrival)
            else:
                orbit.append((i_arr, t_arrival, busy_accum))
            i_arr += 1
        elif t_next == busy_until:
            advance(busy_until)
            begin_idle(t_now)
        else:
            advance(claim_at)
            pick = int(rng_claims.integers(len(orbit)))
            idx, t_entry, busy_at_entry = orbit.pop(pick)
            exposure = busy_accum - busy_at_entry
            failed = int(rng_counts.poisson(theta * exposure))
            waits[idx] = t_now - t_entry
            retrials[idx] = failed + 1
            start_service(idx, t_now)

    order = np.array(order)
    start_times = np.array(start_times)
    k0 = int(n * cfg.warmup_fraction)
    sel = order[k0:]
    st = start_times[k0:]
    s_sel, v_sel = services[sel], vints[sel]
    w_sel, r_sel = waits[sel], retrials[sel]
    welfare = v_sel - costs[sel] * w_sel - retrial_costs[sel] * r_sel
    rate, rate_se = _batch_rate_se(welfare, st, cfg.batches)
    mw, mw_se = _batch_mean_se(w_sel, cfg.batches)
    ms, ms_se = _batch_mean_se(s_sel, cfg.batches)
    m2, m2_se = _batch_mean_se(s_sel**2, cfg.batches)
    mr, mr_se = _batch_mean_se(r_sel, cfg.batches)
    span = max(st[-1] - st[0], 1e-300)
    return SimReport(
        welfare_rate=rate,
        welfare_rate_se=rate_se,
        mean_wait=mw,
        mean_wait_se=mw_se,
        mean_service=ms,
        mean_service_se=ms_se,
        service_second_moment=m2,
        service_second_moment_se=m2_se,
        utilization=float(s_sel.sum() / span),
        mean_payment=float(np.mean(cfg.price.price(s_sel))),
        arrivals=n,
        served=int(sel.size),
        seed=cfg.seed,
        mean_retrials=mr,
        mean_retrials_se=mr_se,
    )


def _retrial_run_per_attempt(seed_children: tuple, cfg: SimConfig, n_total: int,
                             tagged_idx: int, tagged_service: float):
    """Per-attempt retrial run with per-customer retry clocks.

    ``seed_children`` are three spawned seed sequences (arrivals, paths,
    retries).  Every random object is indexed by arrival number, so two runs
    over the same children differ only through the tagged customer's service
    time and couple again once their states merge.
    """
    theta = cfg.retrial.theta
    rng_a, rng_p, rng_r = (default_rng(s) for s in seed_children)
    lam = cfg.scenario.lam
    inter = rng_a.exponential(1.0 / lam, n_total)
    arr = np.cumsum(inter)
    services, _ = _service_batch(cfg.model, cfg.price.drift, cfg.price.linear_coeff,
                                 n_total, rng_p)
    services = services.copy()
    services[tagged_idx] = tagged_service
    # per-customer retry gaps, drawn up-front so twins stay aligned
    gap_cols = 64
    gaps = rng_r.exponential(1.0 / theta, (n_total, gap_cols))

    waits = np.zeros(n_total)
    retrials = np.zeros(n_total, dtype=np.int64)
    attempt_ptr = np.zeros(n_total, dtype=np.int64)

    busy_until = math.inf
    idle = True
    heap: list = []  # (attempt_time, arrival_index)
    entry_time = np.zeros(n_total)
    i_arr = 0
    served = 0

    def next_gap(idx: int) -> float:
        k = attempt_ptr[idx]
        attempt_ptr[idx] += 1
        if k < gap_cols:
            return gaps[idx, k]
        # overflow clock; astronomically rare at the rates this runner uses
        return rng_r.exponential(1.0 / theta)

    while served < n_total:
        t_arrival = arr[i_arr] if i_arr < n_total else math.inf
        t_attempt = heap[0][0] if heap else math.inf
        t_next = min(t_arrival, busy_until, t_attempt)
        if t_next == t_arrival:
            if idle:
                busy_until = t_arrival + services[i_arr]
                idle = False
                served += 1
            else:
                entry_time[i_arr] = t_arrival
                heapq.heappush(heap, (t_arrival + next_gap(i_arr), i_arr))
            i_arr += 1
        elif t_next == busy_until:
            idle = True
            busy_until = math.inf
        else:
            t_at, idx = heapq.heappop(heap)
            retrials[idx] += 1
            if idle:
                waits[idx] = t_at - entry_time[idx]
                busy_until = t_at + services[idx]
                idle = False
                served += 1
            else:
                heapq.heappush(heap, (t_at + next_gap(idx), idx))
    return waits, retrials


def estimate_retrial_externalities(cfg: SimConfig, demand: float, *,
                                   replications: int = 200,
                                   warmup_arrivals: int = 20_000,
                                   tail_arrivals: int = 4_000) -> ExternalityReport:
    """Waiting and retrial externalities of a tagged demand in the orbit queue.

    Twin per-attempt runs share all per-customer randomness; the report
    carries the fraction of replications whose final stretch of customers was
    identical across the twins (a merged-state check for the window size).
    """
    if cfg.retrial is None or cfg.model is None:
        raise ParameterError("retrial externality estimation needs a retrial block and model")
    if replications < 2:
        raise ParameterError("need at least two replications")
    n_total = warmup_arrivals + 1 + tail_arrivals
    tagged = warmup_arrivals
    roots = SeedSequence(cfg.seed).spawn(replications)
    saved_w = np.empty(replications)
    saved_r = np.empty(replications)
    coupled = 0
    check = max(tail_arrivals // 10, 10)
    for r, root in enumerate(roots):
        children = tuple(root.spawn(3))
        w1, r1 = _retrial_run_per_attempt(children, cfg, n_total, tagged, demand)
        w0, r0 = _retrial_run_per_attempt(children, cfg, n_total, tagged, 0.0)
        keep = np.arange(n_total) != tagged
        saved_w[r] = (w1 - w0)[keep].sum()
        saved_r[r] = (r1 - r0)[keep].sum()
        if np.array_equal(w1[-check:], w0[-check:]) and np.array_equal(r1[-check:], r0[-check:]):
            coupled += 1
    return ExternalityReport(
        demand=demand,
        saved_wait=float(saved_w.mean()),
        saved_wait_se=float(saved_w.std(ddof=1) / math.sqrt(replications)),
        replications=replications,
        seed=cfg.seed,
        saved_retrials=float(saved_r.mean()),
        saved_retrials_se=float(saved_r.std(ddof=1) / math.sqrt(replications)),
        coupled_fraction=coupled / replications,
    )
