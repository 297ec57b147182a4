"""Command-line front end: strict JSON configs in, CSV or JSON reports out.

Commands
--------
solve          optimal mean service time, threshold and price coefficients
simulate       FCFS run under the solved (or configured) price
verify         solve, then simulate, and report analytic vs simulated z-scores
sweep          (alpha, x_alpha, g(alpha)) table over a grid
balking        threshold-type equilibrium and entry fee
retrial        orbit-queue optimum and its price
externalities  coupled-twin externality estimates vs the closed form

Exit codes: 0 success, 1 configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import asdict
from typing import Any, Optional

import numpy as np

from . import balking as bk
from . import retrial as rt
from . import sim as sm
from .errors import ConfigError, QueueRegError
from .pricing import ServerCost, build_price, externalities
from .solver import ScenarioConfig, solve_alpha_star, solve_x_alpha, g_value
from .values import (
    ConstantMarginal,
    Deterministic,
    EmpiricalQuantile,
    Exponential,
    LinearRemaining,
    Mmff,
    PoissonSubordinator,
    Uniform,
)

COMMANDS = ("solve", "simulate", "verify", "sweep", "balking", "retrial", "externalities")


# ---------------------------------------------------------------------------
# Strict config parsing: unknown keys are hard errors
# ---------------------------------------------------------------------------


def _require_keys(obj: dict, where: str, required: tuple, optional: tuple = ()) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = set(obj) - set(required) - set(optional)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {sorted(unknown)}")
    missing = [k for k in required if k not in obj]
    if missing:
        raise ConfigError(f"{where}: missing field(s) {missing}")


def _number(obj: dict, where: str, key: str, default=None):
    if key not in obj:
        if default is None:
            raise ConfigError(f"{where}.{key}: required")
        return default
    v = obj[key]
    if not isinstance(v, (int, float)) or isinstance(v, bool):
        raise ConfigError(f"{where}.{key}: expected a number, got {v!r}")
    return float(v)


def _parse_tdist(obj: dict, where: str):
    _require_keys(obj, where, ("kind",), ("value", "rate", "lo", "hi", "sample"))
    kind = obj["kind"]
    try:
        if kind == "deterministic":
            return Deterministic(_number(obj, where, "value"))
        if kind == "exponential":
            return Exponential(_number(obj, where, "rate"))
        if kind == "uniform":
            return Uniform(_number(obj, where, "lo"), _number(obj, where, "hi"))
        if kind == "empirical":
            sample = obj.get("sample")
            if not isinstance(sample, list):
                raise ConfigError(f"{where}.sample: expected a list")
            return EmpiricalQuantile(np.asarray(sample, float))
    except QueueRegError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    raise ConfigError(f"{where}.kind: unknown horizon kind {kind!r}")


def _parse_model(obj: dict, where: str = "model"):
    _require_keys(obj, where, ("family",),
                  ("kappa", "t", "jump_rate", "rate_matrix", "drain_rates", "initial_dist"))
    family = obj["family"]
    try:
        if family == "constant_marginal":
            return ConstantMarginal(_number(obj, where, "kappa"), _parse_tdist(obj["t"], where + ".t"))
        if family == "linear_remaining":
            return LinearRemaining(_parse_tdist(obj["t"], where + ".t"))
        if family == "poisson_subordinator":
            return PoissonSubordinator(_number(obj, where, "kappa"), _number(obj, where, "jump_rate"))
        if family == "mmff":
            return Mmff(
                _number(obj, where, "kappa"),
                np.asarray(obj.get("rate_matrix"), float),
                np.asarray(obj.get("drain_rates"), float),
                np.asarray(obj.get("initial_dist"), float),
            )
    except ConfigError:
        raise
    except (QueueRegError, TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    raise ConfigError(f"{where}.family: unknown family {family!r}")


def _parse_scenario(obj: dict) -> ScenarioConfig:
    _require_keys(obj, "scenario", ("lambda", "gamma"), ("pi", "xi"))
    xi = ServerCost.zero()
    if "xi" in obj:
        knots = obj["xi"]
        if not isinstance(knots, list) or not all(isinstance(k, list) and len(k) == 2 for k in knots):
            raise ConfigError("scenario.xi: expected a list of [time, rate] pairs")
        arr = np.asarray(knots, float)
        try:
            xi = ServerCost(arr[:, 0], arr[:, 1])
        except QueueRegError as exc:
            raise ConfigError(f"scenario.xi: {exc}") from exc
    try:
        return ScenarioConfig(
            lam=_number(obj, "scenario", "lambda"),
            gamma=_number(obj, "scenario", "gamma"),
            xi=xi,
            pi=_number(obj, "scenario", "pi", default=0.0),
        )
    except QueueRegError as exc:
        raise ConfigError(f"scenario: {exc}") from exc


def _parse_scale(obj: dict, where: str):
    _require_keys(obj, where, ("kind",), ("offset", "slope", "coeff", "exponent"))
    kind = obj["kind"]
    try:
        if kind == "affine":
            return bk.AffineScale(_number(obj, where, "offset", default=0.0),
                                  _number(obj, where, "slope", default=1.0))
        if kind == "power":
            return bk.PowerScale(_number(obj, where, "coeff", default=1.0),
                                 _number(obj, where, "exponent", default=1.0))
    except QueueRegError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    raise ConfigError(f"{where}.kind: unknown scale kind {kind!r}")


class RunSpec:
    """Validated run description built from a config file plus CLI overrides."""

    TOP_KEYS = ("seed", "scenario", "model", "sim", "solver", "retrial", "balking",
                "externalities", "sweep")

    def __init__(self, command: str, raw: dict, seed_override: Optional[int] = None):
        if command not in COMMANDS:
            raise ConfigError(f"unknown command {command!r}")
        _require_keys(raw, "config", ("scenario",), tuple(k for k in self.TOP_KEYS if k != "scenario"))
        self.command = command
        self.raw = raw
        self.scenario = _parse_scenario(raw["scenario"])
        self.seed = int(seed_override if seed_override is not None
                        else _number(raw, "config", "seed", default=0.0))

        self.model = _parse_model(raw["model"]) if "model" in raw else None

        sim = raw.get("sim", {})
        _require_keys(sim, "sim", (), ("horizon", "warmup_fraction", "batches",
                                       "waiting_cost_kind"))
        self.horizon = int(_number(sim, "sim", "horizon", default=1_000_000.0))
        self.warmup = _number(sim, "sim", "warmup_fraction", default=0.1)
        self.batches = int(_number(sim, "sim", "batches", default=20.0))
        self.waiting_cost_kind = sim.get("waiting_cost_kind", "deterministic")
        if self.waiting_cost_kind not in ("deterministic", "exponential"):
            raise ConfigError("sim.waiting_cost_kind: deterministic or exponential")

        solver = raw.get("solver", {})
        _require_keys(solver, "solver", (), ("mc_paths",))
        self.mc_paths = int(_number(solver, "solver", "mc_paths", default=100_000.0))

        self.retrial = None
        if "retrial" in raw:
            r = raw["retrial"]
            _require_keys(r, "retrial", ("theta", "delta"), ("cost_kind",))
            kind = r.get("cost_kind", "deterministic")
            try:
                self.retrial = sm.RetrialSimConfig(_number(r, "retrial", "theta"),
                                                   _number(r, "retrial", "delta"), kind)
            except QueueRegError as exc:
                raise ConfigError(f"retrial: {exc}") from exc

        self.balking = None
        if "balking" in raw:
            b = raw["balking"]
            _require_keys(b, "balking", ("type_dist", "scale", "base_model"),
                          ("grid_points", "mc_paths"))
            try:
                self.balking = bk.TypedValueModel(
                    type_dist=_parse_tdist(b["type_dist"], "balking.type_dist"),
                    scale=_parse_scale(b["scale"], "balking.scale"),
                    base=_parse_model(b["base_model"], "balking.base_model"),
                )
            except QueueRegError as exc:
                raise ConfigError(f"balking: {exc}") from exc
            self.balking_grid = int(_number(b, "balking", "grid_points", default=64.0))
            self.balking_paths = int(_number(b, "balking", "mc_paths", default=20_000.0))

        ext = raw.get("externalities", {})
        _require_keys(ext, "externalities", (), ("demand", "replications", "warmup_arrivals",
                                                 "tail_arrivals"))
        self.ext_demand = _number(ext, "externalities", "demand", default=1.0)
        self.ext_replications = int(_number(ext, "externalities", "replications", default=1000.0))
        self.ext_warmup = int(_number(ext, "externalities", "warmup_arrivals", default=100_000.0))
        self.ext_tail = int(_number(ext, "externalities", "tail_arrivals", default=4_000.0))

        sweep = raw.get("sweep", {})
        _require_keys(sweep, "sweep", (), ("points",))
        self.sweep_points = int(_number(sweep, "sweep", "points", default=50.0))

    def need_model(self):
        if self.model is None:
            raise ConfigError(f"command {self.command!r} requires a 'model' block")
        return self.model

    def sim_config(self, price, **overrides) -> sm.SimConfig:
        kw = dict(
            scenario=self.scenario, model=self.model, price=price, horizon=self.horizon,
            warmup_fraction=self.warmup, batches=self.batches, seed=self.seed,
            waiting_cost_kind=self.waiting_cost_kind, retrial=self.retrial,
        )
        kw.update(overrides)
        return sm.SimConfig(**kw)


# ---------------------------------------------------------------------------
# Command handlers: each returns (rows, columns) for emission
# ---------------------------------------------------------------------------


def _solve_row(spec: RunSpec) -> dict:
    model = spec.need_model()
    res = solve_alpha_star(model, spec.scenario, mc_paths=spec.mc_paths, seed=spec.seed)
    price = build_price(spec.scenario, res.alpha_star, res.x_star)
    return {
        "alpha_star": res.alpha_star,
        "x_star": res.x_star,
        "g_star": res.g_star,
        "mean_s": res.mean_s,
        "second_moment_s": res.second_moment_s,
        "welfare_rate": res.welfare_rate,
        "x_identity_residual": res.x_identity_residual,
        "price_pi": price.pi,
        "price_linear_coeff": price.linear_coeff,
        "price_quad_coeff": price.quad_coeff,
    }


def _report_row(rep: sm.SimReport) -> dict:
    row = asdict(rep)
    return {k: v for k, v in row.items() if v is not None}


def cmd_solve(spec: RunSpec):
    return [_solve_row(spec)]


def cmd_simulate(spec: RunSpec):
    model = spec.need_model()
    res = solve_alpha_star(model, spec.scenario, mc_paths=spec.mc_paths, seed=spec.seed)
    price = build_price(spec.scenario, res.alpha_star, res.x_star)
    rep = sm.simulate_mg1(spec.sim_config(price))
    return [_report_row(rep)]


def cmd_verify(spec: RunSpec):
    model = spec.need_model()
    res = solve_alpha_star(model, spec.scenario, mc_paths=spec.mc_paths, seed=spec.seed)
    price = build_price(spec.scenario, res.alpha_star, res.x_star)
    rep = sm.simulate_mg1(spec.sim_config(price))
    lam = spec.scenario.lam
    pk_wait = lam * res.second_moment_s / (2.0 * (1.0 - lam * res.mean_s))
    rows = []
    for name, analytic, sim_val, se in (
        ("welfare_rate", res.welfare_rate, rep.welfare_rate, rep.welfare_rate_se),
        ("mean_wait", pk_wait, rep.mean_wait, rep.mean_wait_se),
        ("mean_service", res.mean_s, rep.mean_service, rep.mean_service_se),
        ("service_second_moment", res.second_moment_s, rep.service_second_moment,
         rep.service_second_moment_se),
    ):
        rows.append({
            "quantity": name,
            "analytic": analytic,
            "simulated": sim_val,
            "se": se,
            "z": (sim_val - analytic) / se if se > 0 else math.inf,
        })
    return rows


def cmd_sweep(spec: RunSpec):
    model = spec.need_model()
    lam, gamma = spec.scenario.lam, spec.scenario.gamma
    right = min((1.0 - 1e-9) / lam, model.mean_initial_value() / (gamma * lam))
    rows = []
    for a in np.linspace(0.0, right, spec.sweep_points, endpoint=False):
        alpha = float(a)
        x = solve_x_alpha(model, spec.scenario, gamma, alpha,
                          mc_paths=spec.mc_paths, seed=spec.seed)
        if x is None:
            rows.append({"alpha": alpha, "x_alpha": math.nan, "g": math.nan,
                         "feasible": 0})
            continue
        g = g_value(model, spec.scenario, gamma, alpha, mc_paths=spec.mc_paths, seed=spec.seed)
        rows.append({"alpha": alpha, "x_alpha": x, "g": g, "feasible": 1})
    return rows


def cmd_balking(spec: RunSpec):
    if spec.balking is None:
        raise ConfigError("command 'balking' requires a 'balking' block")
    res = bk.solve_balking(spec.balking, spec.scenario, grid_points=spec.balking_grid,
                           n_paths=spec.balking_paths, seed=spec.seed)
    return [{
        "t_star": res.t_star,
        "p_join": res.p_join,
        "v_star": res.v_star,
        "alpha_star": res.inner.alpha_star,
        "x_star": res.inner.x_star,
        "welfare_rate": spec.scenario.lam * res.v_star,
        "fee_exists": int(res.fee_exists),
        "pi_star": res.pi_star if res.pi_star is not None else math.nan,
    }]


def cmd_retrial(spec: RunSpec):
    if spec.retrial is None:
        raise ConfigError("command 'retrial' requires a 'retrial' block")
    model = spec.need_model()
    rcfg = rt.RetrialConfig(spec.retrial.theta, spec.retrial.delta)
    res = rt.solve_retrial(model, spec.scenario, rcfg, mc_paths=spec.mc_paths, seed=spec.seed)
    price = rt.retrial_price(spec.scenario, rcfg, res)
    return [{
        "alpha_star": res.alpha_star,
        "x_star": res.x_star,
        "g_tilde_star": res.g_tilde_star,
        "mean_t": res.mean_t,
        "second_moment_t": res.second_moment_t,
        "welfare_rate": res.welfare_rate,
        "z_linear_coeff": res.z_linear_coeff,
        "z_quad_coeff": res.z_quad_coeff,
        "x_identity_residual": res.x_identity_residual,
        "identity_enforced": int(res.identity_enforced),
        "price_linear_coeff": price.linear_coeff,
        "price_quad_coeff": price.quad_coeff,
    }]


def cmd_externalities(spec: RunSpec):
    model = spec.need_model()
    s = spec.ext_demand
    if spec.retrial is not None:
        rcfg = rt.RetrialConfig(spec.retrial.theta, spec.retrial.delta)
        res = rt.solve_retrial(model, spec.scenario, rcfg, mc_paths=spec.mc_paths, seed=spec.seed)
        price = rt.retrial_price(spec.scenario, rcfg, res)
        cfg = spec.sim_config(price)
        rep = sm.estimate_retrial_externalities(
            cfg, s, replications=spec.ext_replications,
            warmup_arrivals=spec.ext_warmup, tail_arrivals=spec.ext_tail)
        lam = spec.scenario.lam
        z = rt.z_value(res, s)
        rows = []
        for name, est, se, conj in (
            ("saved_wait", rep.saved_wait, rep.saved_wait_se, lam * z),
            ("saved_retrials", rep.saved_retrials, rep.saved_retrials_se,
             lam * spec.retrial.theta * z),
        ):
            rows.append({"quantity": name, "estimate": est, "se": se,
                         "conjectured": conj,
                         "z": (est - conj) / se if se > 0 else math.inf,
                         "coupled_fraction": rep.coupled_fraction})
        return rows
    res = solve_alpha_star(model, spec.scenario, mc_paths=spec.mc_paths, seed=spec.seed)
    price = build_price(spec.scenario, res.alpha_star, res.x_star)
    cfg = spec.sim_config(price)
    rep = sm.estimate_externalities(cfg, s, replications=spec.ext_replications,
                                    warmup_arrivals=spec.ext_warmup)
    closed = externalities(s, spec.scenario.lam, res.mean_s, res.second_moment_s)
    return [{
        "quantity": "saved_wait",
        "estimate": rep.saved_wait,
        "se": rep.saved_wait_se,
        "closed_form": closed,
        "z": (rep.saved_wait - closed) / rep.saved_wait_se if rep.saved_wait_se > 0 else math.inf,
    }]


HANDLERS = {
    "solve": cmd_solve,
    "simulate": cmd_simulate,
    "verify": cmd_verify,
    "sweep": cmd_sweep,
    "balking": cmd_balking,
    "retrial": cmd_retrial,
    "externalities": cmd_externalities,
}


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.12g}"
    return str(v)


def emit_csv(rows: list) -> str:
    cols = list(rows[0].keys())
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in cols))
    return "\n".join(lines) + "\n"


def emit_json(rows: list, spec: RunSpec) -> str:
    payload: dict[str, Any] = {"command": spec.command, "seed": spec.seed, "config": spec.raw}
    if len(rows) == 1:
        payload.update(rows[0])
    else:
        for col in rows[0]:
            payload[col] = [row[col] for row in rows]
    return json.dumps(payload, indent=2, sort_keys=False) + "\n"


def run(spec: RunSpec, out_path: Optional[str], fmt: str) -> int:
    rows = HANDLERS[spec.command](spec)
    text = emit_csv(rows) if fmt == "csv" else emit_json(rows, spec)
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def main(argv: Optional[list] = None) -> int:
    parser = argparse.ArgumentParser(prog="queuereg", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="path to a JSON run configuration")
    parser.add_argument("--out", default=None, help="output file (default: stdout)")
    parser.add_argument("--format", default="csv", choices=("csv", "json"))
    parser.add_argument("--seed", default=None, type=int, help="override the config seed")
    args = parser.parse_args(argv)

    try:
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: line {exc.lineno}: {exc.msg}") from exc
        spec = RunSpec(args.command, raw, seed_override=args.seed)
        return run(spec, args.out, args.format)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except QueueRegError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
