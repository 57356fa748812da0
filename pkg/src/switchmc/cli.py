"""Configuration-driven experiment runner.

Verbs:

    switchmc run <config.toml>       solve, simulate strategies, write tables
    switchmc validate <config.toml>  check and echo the resolved configuration
    switchmc oracle <config.toml>    print the tiny-instance ground-truth table

Outputs are CSV tables plus a JSON report; given the same configuration and
RNG key the report bytes are identical at any worker count (wall-clock
timings go to a separate file).  The default RNG key comes from the
SWITCHMC_RNG_KEY environment variable when the config omits one.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import power as powermod
from .errors import ConfigError, SwitchMCError
from .instances import ou_test_instance
from .localbasis import brownian_radius, build_partition, min_cell_probability_bound
from .pathgen import TimeGrid, forward_sweep, suggested_checkpoints
from .rng import CounterNoise, parse_rng_key
from .switching import (
    SolverConfig,
    backward_induction,
    brute_force_value,
    policy_to_bytes,
    simulate_policy,
    validate,
)

__all__ = ["RunConfig", "load_config", "run", "main",
           "emit_density_tables", "emit_strategy_tables"]

DEFAULT_KEY = "5eed0f5eed0f5eed0f5eed0f5eed0f5eed0f5eed0f5eed0f5eed0f5eed0f0001"
DENSITY_BINS = 128


@dataclass
class RunConfig:
    """Numerical parameters of one experiment."""

    problem: str = "ou-test"
    T: float = 1.0
    steps_per_year: int = 10
    paths: int = 10_000
    eval_paths: int = 10_000
    cells: int = 64
    basis: str = "const"
    partition: str = "adaptive"
    epsilon: float = 0.01
    decision_stride: int = 1
    checkpoints: int = 0  # 0 -> mean-reversion rule
    rng_key: str = ""
    workers: int = 1
    start_regime: int = 0
    terminal: str = "zero"  # or "frozen": nested frozen-regime continuation
    terminal_horizon: float = 5.0
    oracle_nodes: int = 21
    oracle_quad: int = 64
    out: str = "out"
    assert_invariants: bool = False
    power: "powermod.PowerModelConfig" = field(default_factory=powermod.PowerModelConfig.desk)

    @property
    def n_steps(self) -> int:
        n = int(round(self.T * self.steps_per_year))
        if abs(n / self.steps_per_year - self.T) > 1e-9 * max(self.T, 1.0):
            raise ConfigError("T must be a whole number of steps", key="run.T")
        return n

    def key_int(self) -> int:
        key = self.rng_key or os.environ.get("SWITCHMC_RNG_KEY", DEFAULT_KEY)
        return parse_rng_key(key)


_RUN_KEYS = {
    "problem": str, "T": float, "steps_per_year": int, "paths": int,
    "eval_paths": int, "cells": int, "basis": str, "partition": str,
    "epsilon": float, "decision_stride": int, "checkpoints": int,
    "rng_key": str, "workers": int, "start_regime": int,
    "terminal": str, "terminal_horizon": float,
}
_ORACLE_KEYS = {"nodes": int, "quad": int}
_POWER_SCALARS = {"rho": float}
_POWER_SECTIONS = {
    "demand": {"d1": float, "d2": float, "d3": float, "alpha": float,
               "beta": float, "week_profile": list},
    "availability": {"c1": list, "c2": list, "c3": list, "alpha": list,
                     "beta": list, "floor": float},
    "fuel": {"s0": list, "sigma": list, "heat_rates": list,
             "emission_rates": list, "coint_kappa": float, "xi": list},
    "costs": {"kappa_prop_plus": list, "kappa_fixed_plus": list,
              "kappa_event": float, "kappa_prop_minus": list,
              "kappa_fixed_minus": list, "maintenance": list,
              "dismantling": bool},
    "price": {"m_max": float, "premium_ratio": float, "premium_scale": float},
    "fleet": {"i0": list, "mesh": float, "max_build": list},
}


def _check_keys(section, mapping, allowed):
    for key in mapping:
        if key not in allowed:
            raise ConfigError(f"unknown configuration key {section}.{key}", key=f"{section}.{key}")


def _coerce(section, mapping, allowed):
    _check_keys(section, mapping, allowed)
    out = {}
    for key, value in mapping.items():
        want = allowed[key]
        if want is list:
            if not isinstance(value, list):
                raise ConfigError(f"{section}.{key} must be an array", key=f"{section}.{key}")
            out[key] = value
        elif want is bool:
            if not isinstance(value, bool):
                raise ConfigError(f"{section}.{key} must be a boolean", key=f"{section}.{key}")
            out[key] = value
        else:
            try:
                out[key] = want(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{section}.{key}: {exc}", key=f"{section}.{key}")
    return out


def _power_from_mapping(mapping) -> "powermod.PowerModelConfig":
    base = powermod.PowerModelConfig.desk()
    _check_keys("power", mapping, set(_POWER_SECTIONS) | set(_POWER_SCALARS))
    kwargs = {}
    if "rho" in mapping:
        kwargs["rho"] = float(mapping["rho"])
    if "demand" in mapping:
        d = _coerce("power.demand", mapping["demand"], _POWER_SECTIONS["demand"])
        if "week_profile" in d:
            d["week_profile"] = tuple(float(v) for v in d["week_profile"])
        kwargs["demand"] = dataclasses.replace(base.demand, **d)
    if "availability" in mapping:
        a = _coerce("power.availability", mapping["availability"],
                    _POWER_SECTIONS["availability"])
        lists = {k: v for k, v in a.items() if isinstance(v, list)}
        n = len(next(iter(lists.values()))) if lists else len(base.availability)
        techs = []
        for j in range(n):
            kw = {k: float(v[j]) for k, v in lists.items()}
            if "floor" in a:
                kw["floor"] = float(a["floor"])
            techs.append(dataclasses.replace(powermod.AvailabilityParams(), **kw))
        kwargs["availability"] = tuple(techs)
    if "fuel" in mapping:
        f = _coerce("power.fuel", mapping["fuel"], _POWER_SECTIONS["fuel"])
        fk = {}
        for k in ("s0", "sigma", "heat_rates", "emission_rates"):
            if k in f:
                fk[k] = tuple(float(v) for v in f[k])
        if "coint_kappa" in f:
            fk["coint_kappa"] = f["coint_kappa"]
        if "xi" in f:
            fk["xi"] = tuple(tuple(float(v) for v in row) for row in f["xi"])
        kwargs["fuel"] = dataclasses.replace(base.fuel, **fk)
    if "costs" in mapping:
        c = _coerce("power.costs", mapping["costs"], _POWER_SECTIONS["costs"])
        ck = {k: (tuple(float(x) for x in v) if isinstance(v, list) else v)
              for k, v in c.items()}
        kwargs["costs"] = dataclasses.replace(base.costs, **ck)
    if "price" in mapping:
        p = _coerce("power.price", mapping["price"], _POWER_SECTIONS["price"])
        kwargs["price"] = dataclasses.replace(base.price, **p)
    if "fleet" in mapping:
        fl = _coerce("power.fleet", mapping["fleet"], _POWER_SECTIONS["fleet"])
        fk = {k: (tuple(float(x) for x in v) if isinstance(v, list) else float(v))
              for k, v in fl.items()}
        kwargs["fleet"] = dataclasses.replace(base.fleet, **fk)
    return dataclasses.replace(base, **kwargs)


def load_config(path) -> RunConfig:
    """Parse and strictly validate a TOML run configuration."""
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}")
    _check_keys("<root>", raw, {"run", "oracle", "power"})
    cfg = RunConfig()
    if "run" in raw:
        run_kw = _coerce("run", raw["run"], _RUN_KEYS)
        for k, v in run_kw.items():
            setattr(cfg, k, v)
    if "oracle" in raw:
        ora = _coerce("oracle", raw["oracle"], _ORACLE_KEYS)
        cfg.oracle_nodes = ora.get("nodes", cfg.oracle_nodes)
        cfg.oracle_quad = ora.get("quad", cfg.oracle_quad)
    if "power" in raw:
        cfg.power = _power_from_mapping(raw["power"])
    if cfg.problem not in ("power", "brownian-test", "ou-test"):
        raise ConfigError(f"unknown problem {cfg.problem!r}", key="run.problem")
    if cfg.basis not in ("const", "linear"):
        raise ConfigError(f"unknown basis {cfg.basis!r}", key="run.basis")
    if cfg.partition not in ("adaptive", "uniform"):
        raise ConfigError(f"unknown partition mode {cfg.partition!r}", key="run.partition")
    if cfg.terminal not in ("zero", "frozen"):
        raise ConfigError(f"unknown terminal mode {cfg.terminal!r}", key="run.terminal")
    if cfg.paths < cfg.cells:
        raise ConfigError("run.paths must be at least run.cells", key="run.paths")
    if cfg.problem == "power":
        cfg.power = cfg.power.validated()
    cfg.n_steps  # raises if T and steps_per_year are inconsistent
    return cfg


def resolved_config_dict(cfg: RunConfig) -> dict:
    # workers/out/assert flags are execution knobs, not experiment identity:
    # the report must be byte-identical at any worker count.
    out = {k: getattr(cfg, k) for k in _RUN_KEYS if k != "workers"}
    out["rng_key"] = f"{cfg.key_int():064x}"
    out["n_steps"] = cfg.n_steps
    out["oracle"] = {"nodes": cfg.oracle_nodes, "quad": cfg.oracle_quad}
    if cfg.problem == "power":
        out["power"] = _dataclass_dict(cfg.power)
    return out


def _dataclass_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _dataclass_dict(getattr(obj, f.name))
                for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_dataclass_dict(v) for v in obj]
    return obj


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


# ---------------------------------------------------------------------------
# table emission
# ---------------------------------------------------------------------------


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def emit_density_tables(prices, times, m_max, path):
    """Per-year price histograms: 128 bins over [0, m_max].

    prices: (n_slices, M); times: (n_slices,) in years.  Each year's mass
    column sums to one within 1e-12.
    """
    edges = np.linspace(0.0, float(m_max), DENSITY_BINS + 1)
    years = np.floor(np.asarray(times)).astype(int)
    rows = []
    for year in np.unique(years):
        block = prices[years == year].ravel()
        counts, _ = np.histogram(block, bins=edges)
        total = counts.sum()
        mass = counts / total if total else counts.astype(float)
        for b in range(DENSITY_BINS):
            rows.append((year, edges[b], edges[b + 1], counts[b], mass[b]))
    _write_csv(path, ["year", "bin_lo_eur_mwh", "bin_hi_eur_mwh", "count", "mass"], rows)
    return rows


def _year_summary(prices, times):
    years = np.floor(np.asarray(times)).astype(int)
    out = []
    for year in np.unique(years):
        block = prices[years == year].ravel()
        out.append((year, float(np.median(block)),
                    float(np.quantile(block, 0.25)), float(np.quantile(block, 0.75))))
    return out


def emit_strategy_tables(results, regimes, i0, out_dir, peak_prices=None):
    """Capacity paths, terminal-fleet histogram, fleet-vs-fuel joint table.

    results: {strategy name: GainDistribution}.  Returns the rank correlation
    between total terminal additions and the terminal peak-fuel price under
    the optimal strategy (0 when either is degenerate).
    """
    cap_rows = []
    term_rows = []
    for name, res in sorted(results.items()):
        fleets = regimes.points[res.decision_regimes]  # (n_dec, M, d')
        for k, step in enumerate(res.decision_steps):
            for j in range(fleets.shape[2]):
                col = fleets[k, :, j]
                cap_rows.append((name, step, j, float(col.mean()),
                                 float(np.quantile(col, 0.1)),
                                 float(np.quantile(col, 0.9))))
        term = res.decision_regimes[-1] if len(res.decision_steps) else None
        if term is not None:
            idx, counts = np.unique(term, return_counts=True)
            for i, c in zip(idx, counts):
                fleet = regimes.points[i]
                term_rows.append((name,) + tuple(float(v) for v in fleet) + (int(c),))
    _write_csv(Path(out_dir) / "capacity_paths.csv",
               ["strategy", "decision_step", "tech", "mean_gw", "q10_gw", "q90_gw"],
               cap_rows)
    d_prime = regimes.points.shape[1]
    _write_csv(Path(out_dir) / "terminal_fleet.csv",
               ["strategy"] + [f"tech{j}_gw" for j in range(d_prime)] + ["count"],
               term_rows)

    rank_corr = 0.0
    if peak_prices is not None and "optimal" in results:
        res = results["optimal"]
        added = (regimes.points[res.decision_regimes[-1]] - np.asarray(i0)).sum(axis=1)
        rows = [(float(a), float(p)) for a, p in zip(added, peak_prices)]
        _write_csv(Path(out_dir) / "fleet_vs_fuel.csv",
                   ["terminal_added_gw", "terminal_peak_fuel_eur_mwh"], rows)
        rank_corr = _spearman(added, peak_prices)
    return rank_corr


def _spearman(x, y):
    x, y = np.asarray(x, float), np.asarray(y, float)
    if np.all(x == x[0]) or np.all(y == y[0]):
        return 0.0
    rx = np.argsort(np.argsort(x, kind="stable"), kind="stable").astype(float)
    ry = np.argsort(np.argsort(y, kind="stable"), kind="stable").astype(float)
    rx -= rx.mean()
    ry -= ry.mean()
    return float(np.dot(rx, ry) / np.sqrt(np.dot(rx, rx) * np.dot(ry, ry)))


# ---------------------------------------------------------------------------
# runners
# ---------------------------------------------------------------------------


def _grid_for(cfg: RunConfig, spec) -> TimeGrid:
    n_cp = cfg.checkpoints or suggested_checkpoints(spec, cfg.T)
    return TimeGrid.regular(cfg.T, cfg.n_steps, decision_stride=cfg.decision_stride,
                            n_checkpoints=n_cp)


def _solver_config(cfg: RunConfig, keep_actions=True) -> SolverConfig:
    return SolverConfig(cells=cfg.cells, basis=cfg.basis,
                        partition_mode=cfg.partition, eps=cfg.epsilon,
                        keep_actions=keep_actions)


class _PriceRecorder:
    """Accumulates spot prices (and invariant checks) along a simulation."""

    def __init__(self, model_cfg, regimes, grid, check=False):
        self.cfg = model_cfg
        self.regimes = regimes
        self.check = check
        self.prices = np.empty((grid.N + 1, 0))
        self._rows = []
        self.violations = []

    def __call__(self, step, t, states, regime_idx):
        diag = powermod.slice_diagnostics(self.cfg, t, states,
                                          self.regimes.points[regime_idx])
        self._rows.append(diag["price"])
        if self.check:
            s_min = diag["s_tilde"].min(axis=1)
            if np.any(diag["price"] < s_min - 1e-9) or np.any(
                    diag["price"] > self.cfg.price.m_max):
                self.violations.append(f"price bounds violated at step {step}")
            expect = np.minimum(np.maximum(diag["demand"], 0.0),
                                diag["capacity"].sum(axis=1))
            if not np.array_equal(diag["dispatch"].total, expect):
                self.violations.append(f"dispatch identity violated at step {step}")
            a = diag["availability"]
            floors = np.array([av.floor for av in self.cfg.availability])
            if np.any(a < floors - 1e-12) or np.any(a > 1.0):
                self.violations.append(f"availability bounds violated at step {step}")

    def finish(self):
        self.prices = np.stack(self._rows)
        return self.prices


def _mean_schedule(res, regimes, i0, mesh, shape):
    """Deterministic schedule: mean optimal fleet, snapped to the grid."""
    fleets = regimes.points[res.decision_regimes]  # (n_dec, M, d')
    mean_path = fleets.mean(axis=1)  # (n_dec, d')
    steps = np.round((mean_path - np.asarray(i0)) / mesh).astype(np.int64)
    steps = np.clip(steps, 0, np.asarray(shape) - 1)
    steps = np.maximum.accumulate(steps, axis=0)  # enforce irreversibility
    return np.ravel_multi_index(tuple(steps.T), shape)


def _apply_terminal(cfg, spec, problem, key):
    if cfg.terminal != "frozen":
        return problem
    from .switching import frozen_regime_terminal

    g = frozen_regime_terminal(spec, problem, cfg.T, cfg.terminal_horizon,
                               substeps=10, rng_key=(key + 2) % (1 << 256))
    return dataclasses.replace(problem, terminal=g)


def run_power(cfg: RunConfig, out_dir: Path) -> dict:
    model = cfg.power
    spec, regimes, problem = powermod.build_problem(model)
    validate(problem, horizon=cfg.T)
    grid = _grid_for(cfg, spec)
    x0 = powermod.initial_state(model)
    key = cfg.key_int()
    eval_key = (key + 1) % (1 << 256)  # fresh paths for the policy bounds
    problem = _apply_terminal(cfg, spec, problem, key)

    ens = forward_sweep(spec, grid, cfg.paths, key, x0, workers=cfg.workers)
    surface = backward_induction(ens, problem, _solver_config(cfg))

    results = {}
    recorders = {}
    rec = _PriceRecorder(model, regimes, grid, check=cfg.assert_invariants)
    res_opt = simulate_policy(spec, grid, problem, surface, cfg.eval_paths,
                              eval_key, x0, start_regime=cfg.start_regime,
                              workers=cfg.workers, recorder=rec)
    rec.finish()
    results["optimal"] = res_opt
    recorders["optimal"] = rec

    schedule = _mean_schedule(res_opt, regimes, model.fleet.i0, model.fleet.mesh,
                              regimes.grid_shape)
    for name, policy in (("deterministic", schedule), ("nothing", None)):
        rec = _PriceRecorder(model, regimes, grid, check=cfg.assert_invariants)
        results[name] = simulate_policy(spec, grid, problem, policy, cfg.eval_paths,
                                        eval_key, x0, start_regime=cfg.start_regime,
                                        workers=cfg.workers, recorder=rec)
        rec.finish()
        recorders[name] = rec

    times = np.array([grid.time(i) for i in range(grid.N + 1)])
    price_summaries = {}
    for name, rec in recorders.items():
        emit_density_tables(rec.prices, times, model.price.m_max,
                            out_dir / f"price_density_{name}.csv")
        summary = _year_summary(rec.prices, times)
        _write_csv(out_dir / f"price_summary_{name}.csv",
                   ["year", "median_eur_mwh", "q25_eur_mwh", "q75_eur_mwh"], summary)
        price_summaries[name] = [list(r) for r in summary]

    # terminal peak-fuel price per eval path (last strategy-independent slice)
    noise_states = _terminal_states(spec, grid, cfg.eval_paths, eval_key, x0, cfg.workers)
    peak_prices = model.fuel.s_tilde(noise_states[:, model.n_tech + 1:])[:, -1]
    rank_corr = emit_strategy_tables(results, regimes, model.fleet.i0, out_dir,
                                     peak_prices=peak_prices)

    _write_csv(out_dir / "values_t0.csv",
               ["regime"] + [f"tech{j}_gw" for j in range(model.n_tech)] + ["value_eur"],
               [(i,) + tuple(float(v) for v in regimes.points[i]) + (float(surface.value0[i]),)
                for i in range(regimes.q)])
    (out_dir / "policy.bin").write_bytes(policy_to_bytes(surface))

    violations = sum((rec.violations for rec in recorders.values()), [])
    if cfg.assert_invariants:
        for name in ("optimal", "deterministic"):
            fleets = regimes.points[results[name].decision_regimes]
            if fleets.shape[0] > 1 and np.any(np.diff(fleets, axis=0) < 0):
                violations.append(f"{name} fleet path decreases somewhere")
    if cfg.assert_invariants and violations:
        raise SwitchMCError("invariant violations: " + "; ".join(violations[:5]))

    return {
        "problem": "power",
        "invariants_checked": bool(cfg.assert_invariants),
        "invariant_violations": violations,
        "value_t0_start": float(surface.value0[cfg.start_regime]),
        "values_t0_minmax": [float(surface.value0.min()), float(surface.value0.max())],
        "strategies": {
            name: {
                "mean_gain_eur": res.mean,
                "stderr_eur": res.stderr,
                "switch_count_histogram": _hist_dict(res.switch_counts),
            }
            for name, res in sorted(results.items())
        },
        "strategy_ordering": ["optimal", "deterministic", "nothing"],
        "price_summaries": price_summaries,
        "terminal_fleet_vs_peak_fuel_rank_corr": rank_corr,
        "peak_state_floats": int(ens.tracker.peak),
        "units": {"value": "EUR", "price": "EUR/MWh", "capacity": "GW", "time": "years"},
    }


def _terminal_states(spec, grid, m, key, x0, workers):
    ens = forward_sweep(spec, grid, m, key, x0, workers=workers)
    return ens.states


def _hist_dict(counts):
    idx, cnt = np.unique(np.asarray(counts), return_counts=True)
    return {str(int(i)): int(c) for i, c in zip(idx, cnt)}


def run_ou_test(cfg: RunConfig, out_dir: Path) -> dict:
    inst = ou_test_instance()
    grid = _grid_for(cfg, inst.spec)
    key = cfg.key_int()
    problem = _apply_terminal(cfg, inst.spec, inst.problem, key)
    ens = forward_sweep(inst.spec, grid, cfg.paths, key, inst.x0, workers=cfg.workers)
    surface = backward_induction(ens, problem, _solver_config(cfg))
    report = {
        "problem": "ou-test",
        "value_t0": [float(v) for v in surface.value0],
        "peak_state_floats": int(ens.tracker.peak),
    }
    if grid.N <= 12 and problem.q <= 3 and cfg.oracle_nodes <= 51:
        oracle = brute_force_value(inst.spec, grid, problem, inst.x0,
                                   inst.lattice_lo, inst.lattice_hi,
                                   cfg.oracle_nodes, cfg.oracle_quad)
        gap = np.abs(surface.value0 - oracle) / np.abs(oracle)
        report["oracle"] = [float(v) for v in oracle]
        report["relative_gap"] = [float(g) for g in gap]
    res = simulate_policy(inst.spec, grid, problem, surface, cfg.eval_paths,
                          (key + 1) % (1 << 256), inst.x0,
                          start_regime=cfg.start_regime, workers=cfg.workers)
    report["out_of_sample"] = {"mean": res.mean, "stderr": res.stderr,
                               "switch_count_histogram": _hist_dict(res.switch_counts)}
    _write_csv(out_dir / "values_t0.csv", ["regime", "value"],
               [(i, float(v)) for i, v in enumerate(surface.value0)])
    return report


def run_brownian_test(cfg: RunConfig, out_dir: Path) -> dict:
    """Localization audit on a standard Brownian motion."""
    eps = cfg.epsilon
    key = cfg.key_int()
    n = max(cfg.paths, 10_000)
    rows = []
    worst_excess = 0.0
    for t in (0.25, 0.5, 1.0):
        radius = brownian_radius(t, eps, d=1)
        w = np.sqrt(t) * CounterNoise(key, 1).forward_block(int(t * 1000), n)[:, 0]
        excess = np.abs(w - np.clip(w, -radius, radius))
        se = excess.std() / np.sqrt(n)
        rows.append((t, radius, float(excess.mean()), float(se), eps))
        worst_excess = max(worst_excess, float(excess.mean() - 2 * se))
    _write_csv(out_dir / "localization_audit.csv",
               ["t", "radius", "mean_excess", "stderr", "eps"], rows)

    t = 1.0
    radius = brownian_radius(t, eps, d=1)
    w = np.clip(CounterNoise(key, 1).forward_block(9999, n), -radius, radius)
    k = max(2, int(np.floor(2 * radius / 0.5)))
    part = build_partition(w, k, mode="uniform",
                           box=(np.array([-radius]), np.array([radius])))
    p_min = min_cell_probability_bound(part)
    bound = eps * 0.5 ** 1 / (4 * t) ** 1
    return {
        "problem": "brownian-test",
        "radius_t1": radius,
        "clamp_mass_ok": bool(worst_excess <= eps),
        "min_cell_probability": p_min,
        "min_cell_lower_bound": bound,
        "min_cell_ok": bool(part.delta_min >= 0.5 and p_min >= bound),
    }


def run(cfg: RunConfig, out_dir=None) -> dict:
    """Execute the configured experiment; returns the report dictionary."""
    out_dir = Path(out_dir or cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    if cfg.problem == "power":
        report = run_power(cfg, out_dir)
    elif cfg.problem == "ou-test":
        report = run_ou_test(cfg, out_dir)
    elif cfg.problem == "brownian-test":
        report = run_brownian_test(cfg, out_dir)
    else:  # pragma: no cover - guarded by load_config
        raise ConfigError(f"unknown problem {cfg.problem!r}")
    report["config"] = resolved_config_dict(cfg)
    report = _jsonable(report)
    blob = json.dumps(report, sort_keys=True, indent=2) + "\n"
    (out_dir / "report.json").write_text(blob)
    timings = {"wall_seconds": time.perf_counter() - t0}
    (out_dir / "timings.json").write_text(json.dumps(timings) + "\n")
    return report


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="switchmc", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in ("run", "validate", "oracle"):
        p = sub.add_parser(verb)
        p.add_argument("config", type=str)
        p.add_argument("--out", type=str, default=None)
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--assert-invariants", action="store_true")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.workers is not None:
            cfg.workers = args.workers
        if args.out is not None:
            cfg.out = args.out
        if args.assert_invariants:
            cfg.assert_invariants = True
        if args.verb == "validate":
            print(json.dumps(resolved_config_dict(cfg), sort_keys=True, indent=2))
            return 0
        if args.verb == "oracle":
            inst = ou_test_instance()
            grid = _grid_for(cfg, inst.spec)
            vals = brute_force_value(inst.spec, grid, inst.problem, inst.x0,
                                     inst.lattice_lo, inst.lattice_hi,
                                     cfg.oracle_nodes, cfg.oracle_quad)
            print(json.dumps({"oracle_values_t0": [float(v) for v in vals],
                              "nodes": cfg.oracle_nodes, "quad": cfg.oracle_quad,
                              "N": grid.N, "T": cfg.T}, sort_keys=True, indent=2))
            return 0
        report = run(cfg)
        print(json.dumps({k: report[k] for k in sorted(report) if k != "config"},
                         sort_keys=True, indent=2))
        return 0
    except SwitchMCError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
