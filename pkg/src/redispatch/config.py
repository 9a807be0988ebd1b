"""Instance configuration: JSON schema, validation, shipped examples.

Configs are plain JSON trees with unit-suffixed field names (minutes, MW,
euro).  Money is euro, time is minutes, power is MW throughout the solver;
marginal production costs are configured per MWh and converted on load.
"""

from __future__ import annotations

import json

import numpy as np

from .feasibility import DisruptionModel, FeasibilitySet
from .stochastic import DemandModel, Forecast
from .switchgraph import GeneratorSpec, SwitchNetwork, Transition

__all__ = [
    "Instance",
    "build_instance",
    "validate_config",
    "load_config",
    "example1",
    "example2_mini",
]

_EPS = 1e-9


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


class Instance:
    """A fully built problem instance plus solver defaults."""

    def __init__(self, name, network, demand, disruption, dt, horizon,
                 initial_mode, z0, areas, bounds_cfg, rmc_cfg, benchmark_cfg=None):
        self.name = name
        self.network = network
        self.demand = demand
        self.disruption = disruption
        self.dt = float(dt)
        self.horizon = float(horizon)
        self.initial_mode = int(initial_mode)
        self.z0 = z0
        self.areas = areas
        self.bounds_cfg = bounds_cfg
        self.rmc_cfg = rmc_cfg
        self.benchmark_cfg = benchmark_cfg or {}

    @property
    def n_steps(self):
        return int(round(self.horizon / self.dt))

    @property
    def times(self):
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    @property
    def x0(self):
        return self.demand.forecast(0.0) + self.z0

    def running_cost(self, x, mode_idx, r):
        p = self.network.production(mode_idx, r)
        return self.disruption.running_cost(p, x)

    def running_cost_bulk(self, production, demand):
        return self.disruption.running_cost_bulk(production, demand)


def _num(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _build_network(cfg):
    gens = []
    for g in cfg["generators"]:
        trans = [Transition(t["from_level"], t["to_level"], t["plateau_min"],
                            t["delay_min"], t["cost_eur"])
                 for t in g.get("transitions", [])]
        gens.append(GeneratorSpec(g["levels_mw"], trans, g.get("name", "")))
    return SwitchNetwork(gens)


def _build_demand(cfg):
    d = cfg["demand"]
    fc = Forecast(d["knots_min"], d["forecast_mw"])
    return DemandModel(fc, d["reversion_per_min"], d["volatility_mw_per_sqrt_min"])


def _build_disruption(cfg):
    sets = []
    intensity = []
    for c in cfg["contingencies"]:
        sets.append(FeasibilitySet(c["a_gen"], c["a_load"], c["offset_mw"],
                                   c.get("label", "")))
        intensity.append(c["intensity_per_min"])
    marginal = np.asarray(cfg["marginal_cost_eur_per_mwh"], dtype=float) / 60.0
    return DisruptionModel(sets, intensity, cfg["shed_cost_eur_per_mw"], marginal)


def build_instance(cfg):
    """Construct solver objects from a config tree.  Raises on bad configs;
    run validate_config first for a full report."""
    network = _build_network(cfg)
    demand = _build_demand(cfg)
    disruption = _build_disruption(cfg)
    entries = []
    for k, lv in enumerate(cfg["initial_mode"]):
        entries.append(int(lv))
    a0 = network.mode_index[tuple(entries)]
    z0 = np.asarray(cfg.get("z0_mw", [0.0] * demand.n_load), dtype=float)
    areas = cfg.get("areas", [[j] for j in range(demand.n_load)])
    return Instance(
        name=cfg.get("name", "instance"),
        network=network,
        demand=demand,
        disruption=disruption,
        dt=cfg["dt_min"],
        horizon=cfg["horizon_min"],
        initial_mode=a0,
        z0=z0,
        areas=[list(map(int, a)) for a in areas],
        bounds_cfg=dict(cfg.get("bounds", {})),
        rmc_cfg=dict(cfg.get("rmc", {})),
        benchmark_cfg=dict(cfg.get("benchmark", {})),
    )


def _is_multiple(x, dt):
    r = x / dt
    return abs(r - round(r)) < 1e-9


def validate_config(cfg):
    """Run every structural check; returns a list of (name, ok, message)."""
    checks = []

    def add(name, ok, msg=""):
        checks.append((name, bool(ok), msg))

    required = ["horizon_min", "dt_min", "demand", "generators",
                "initial_mode", "marginal_cost_eur_per_mwh",
                "shed_cost_eur_per_mw", "contingencies"]
    missing = [k for k in required if k not in cfg]
    add("required-fields", not missing,
        "missing: " + ", ".join(missing) if missing else "all present")
    if missing:
        return checks

    dt = cfg["dt_min"]
    horizon = cfg["horizon_min"]
    add("time-grid", _num(dt) and _num(horizon) and dt > 0
        and horizon > 0 and _is_multiple(horizon, dt),
        "horizon must be a positive integer multiple of dt")

    grid_ok = True
    grid_msg = []
    for g in cfg["generators"]:
        for t in g.get("transitions", []):
            for key in ("delay_min", "plateau_min"):
                if not _is_multiple(t[key], dt):
                    grid_ok = False
                    grid_msg.append(f"{g.get('name', '?')} {key}={t[key]}")
    add("delay-grid", grid_ok,
        "delays and plateaus must sit on the dt grid: " + "; ".join(grid_msg)
        if grid_msg else "all delays on the dt grid")

    try:
        network = _build_network(cfg)
        add("generators", True, f"{network.n_modes} modes")
    except (ValueError, KeyError) as exc:
        network = None
        add("generators", False, str(exc))

    ramp_ok = True
    ramp_msg = []
    for g in cfg["generators"]:
        cap = g.get("max_ramp_mw_per_min")
        if cap is None:
            continue
        lv = g["levels_mw"]
        for t in g.get("transitions", []):
            span = t["delay_min"] - t["plateau_min"]
            rate = abs(lv[t["to_level"]] - lv[t["from_level"]]) / span
            if rate > cap + 1e-9:
                ramp_ok = False
                ramp_msg.append(f"{g.get('name', '?')} "
                                f"{t['from_level']}->{t['to_level']} rate {rate:.3g}")
    add("ramp-rate", ramp_ok,
        "; ".join(ramp_msg) if ramp_msg else "all ramps within configured rates")

    try:
        demand = _build_demand(cfg)
        span_ok = (demand.forecast.knots[0] <= 0.0 + _EPS
                   and demand.forecast.knots[-1] >= horizon - _EPS)
        add("demand", span_ok,
            "forecast knots must cover [0, horizon]" if not span_ok else
            f"{demand.n_load} loads")
    except (ValueError, KeyError) as exc:
        demand = None
        add("demand", False, str(exc))

    closure_ok = True
    closure_msg = ""
    for c in cfg["contingencies"]:
        if np.any(np.asarray(c["a_load"], dtype=float) < 0.0):
            closure_ok = False
            closure_msg = (f"set '{c.get('label', '?')}' has a negative load "
                           "coefficient; feasibility sets must be downward "
                           "closed in demand")
            break
    add("downward-closure", closure_ok, closure_msg)

    try:
        disruption = _build_disruption(cfg)
        add("contingencies", True, f"{len(disruption.sets)} sets")
    except (ValueError, KeyError) as exc:
        disruption = None
        add("contingencies", False, str(exc))

    if network is not None and demand is not None and disruption is not None:
        dims_ok = all(s.n_load == demand.n_load and s.n_gen == network.n_gen
                      for s in disruption.sets)
        dims_ok = dims_ok and disruption.shed_cost.size == demand.n_load
        dims_ok = dims_ok and disruption.marginal_cost.size == network.n_gen
        add("dimensions", dims_ok, "" if dims_ok else
            "generator/load counts disagree across sections")

        ent = cfg["initial_mode"]
        mode_ok = (len(ent) == network.n_gen
                   and all(0 <= int(e) < network.gens[k].n_levels
                           for k, e in enumerate(ent)))
        add("initial-mode", mode_ok, "" if mode_ok else
            "initial mode must list one stationary level index per generator")

        if dims_ok:
            try:
                for s in disruption.sets:
                    s.dual_vertices(disruption.shed_cost)
                add("shedding-lp", True, "")
            except ValueError as exc:
                add("shedding-lp", False, str(exc))

    areas = cfg.get("areas")
    if areas is not None and demand is not None:
        flat = sorted(j for a in areas for j in a)
        add("areas", flat == list(range(demand.n_load)),
            "areas must partition the load indices")

    return checks


def example1():
    """Two-generator, one-load instance mirroring the shipped desk case."""
    return {
        "name": "example1",
        "horizon_min": 60.0,
        "dt_min": 0.5,
        "demand": {
            "knots_min": [0.0, 60.0],
            "forecast_mw": [[350.0], [450.0]],
            "reversion_per_min": 0.01,
            "volatility_mw_per_sqrt_min": [[5.0]],
        },
        "generators": [
            {
                "name": "g1",
                "levels_mw": [100.0, 150.0],
                "transitions": [
                    {"from_level": 0, "to_level": 1, "plateau_min": 5.0,
                     "delay_min": 10.0, "cost_eur": 500.0},
                    {"from_level": 1, "to_level": 0, "plateau_min": 5.0,
                     "delay_min": 7.5, "cost_eur": 250.0},
                ],
            },
            {
                "name": "g2",
                "levels_mw": [0.0, 100.0, 200.0],
                "transitions": [
                    {"from_level": 0, "to_level": 1, "plateau_min": 10.0,
                     "delay_min": 14.0, "cost_eur": 2000.0},
                    {"from_level": 1, "to_level": 0, "plateau_min": 5.0,
                     "delay_min": 7.0, "cost_eur": 500.0},
                    {"from_level": 1, "to_level": 2, "plateau_min": 1.0,
                     "delay_min": 5.0, "cost_eur": 500.0},
                    {"from_level": 2, "to_level": 1, "plateau_min": 1.0,
                     "delay_min": 3.0, "cost_eur": 200.0},
                ],
            },
        ],
        "initial_mode": [0, 0],
        "marginal_cost_eur_per_mwh": [20.0, 25.0],
        "shed_cost_eur_per_mw": [10000.0],
        "contingencies": [
            {"label": "nominal",
             "a_gen": [[-0.9, -0.85]],
             "a_load": [[1.0]],
             "offset_mw": [280.0],
             "intensity_per_min": 1.0},
            {"label": "line-a",
             "a_gen": [[-0.8, -0.6], [-0.4, -0.9]],
             "a_load": [[1.0], [1.0]],
             "offset_mw": [240.0, 270.0],
             "intensity_per_min": 0.01},
            {"label": "line-b",
             "a_gen": [[-0.5, -0.9]],
             "a_load": [[1.0]],
             "offset_mw": [260.0],
             "intensity_per_min": 0.01},
        ],
        "bounds": {"grid_points": 601, "grid_width_std": 6.0},
        "benchmark": {"grid_points": 1001, "grid_width_std": 6.0},
        "rmc": {"n_paths": 10000, "basis": "1,r,x",
                "demand_cells": 8, "progression_cells": 2},
    }


def example2_mini():
    """Three generators, four loads in two areas; small horizon."""
    return {
        "name": "example2-mini",
        "horizon_min": 30.0,
        "dt_min": 1.0,
        "demand": {
            "knots_min": [0.0, 15.0, 30.0],
            "forecast_mw": [
                [60.0, 45.0, 80.0, 55.0],
                [70.0, 55.0, 95.0, 60.0],
                [75.0, 60.0, 105.0, 70.0],
            ],
            "reversion_per_min": 0.05,
            "volatility_mw_per_sqrt_min": [
                [2.0, 0.3, 0.0, 0.0],
                [0.3, 1.5, 0.0, 0.0],
                [0.0, 0.0, 2.5, 0.4],
                [0.0, 0.0, 0.4, 1.5],
            ],
        },
        "generators": [
            {
                "name": "g1",
                "levels_mw": [50.0, 120.0],
                "max_ramp_mw_per_min": 40.0,
                "transitions": [
                    {"from_level": 0, "to_level": 1, "plateau_min": 1.0,
                     "delay_min": 3.0, "cost_eur": 100.0},
                    {"from_level": 1, "to_level": 0, "plateau_min": 0.0,
                     "delay_min": 2.0, "cost_eur": 50.0},
                ],
            },
            {
                "name": "g2",
                "levels_mw": [0.0, 80.0],
                "transitions": [
                    {"from_level": 0, "to_level": 1, "plateau_min": 1.0,
                     "delay_min": 4.0, "cost_eur": 300.0},
                    {"from_level": 1, "to_level": 0, "plateau_min": 1.0,
                     "delay_min": 2.0, "cost_eur": 80.0},
                ],
            },
            {
                "name": "g3",
                "levels_mw": [0.0, 60.0, 110.0],
                "transitions": [
                    {"from_level": 0, "to_level": 1, "plateau_min": 0.0,
                     "delay_min": 2.0, "cost_eur": 120.0},
                    {"from_level": 1, "to_level": 0, "plateau_min": 0.0,
                     "delay_min": 1.0, "cost_eur": 40.0},
                    {"from_level": 1, "to_level": 2, "plateau_min": 1.0,
                     "delay_min": 3.0, "cost_eur": 150.0},
                    {"from_level": 2, "to_level": 1, "plateau_min": 0.0,
                     "delay_min": 2.0, "cost_eur": 60.0},
                ],
            },
        ],
        "initial_mode": [0, 0, 1],
        "marginal_cost_eur_per_mwh": [18.0, 30.0, 24.0],
        "shed_cost_eur_per_mw": [8000.0, 8000.0, 9000.0, 9000.0],
        "areas": [[0, 1], [2, 3]],
        "contingencies": [
            {"label": "nominal",
             "a_gen": [[-0.9, -0.8, -0.5], [-0.3, -0.4, -0.9]],
             "a_load": [[1.0, 1.0, 0.2, 0.2], [0.2, 0.2, 1.0, 1.0]],
             "offset_mw": [120.0, 130.0],
             "intensity_per_min": 1.0},
            {"label": "tie-line",
             "a_gen": [[-0.8, -0.7, -0.2], [-0.1, -0.2, -0.8]],
             "a_load": [[1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0]],
             "offset_mw": [95.0, 105.0],
             "intensity_per_min": 0.02},
        ],
        "bounds": {"grid_points": 301, "grid_width_std": 6.0},
        "benchmark": {"grid_points": 301, "grid_width_std": 6.0},
        "rmc": {"n_paths": 5000, "basis": "1,xA",
                "demand_cells": 4, "progression_cells": 2},
    }
