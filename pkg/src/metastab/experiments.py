"""Declarative scaling experiments on the zero-range model.

A config is flat ``key value`` text; grid keys (``N``, ``lambda``) repeat.
Model keys (``kappa``, ``walk_rate``, ``delta``, ``gamma``, ``speedup``) may
appear inline or come from a file named by ``model``.  Each experiment
writes ``<output>/<experiment>.csv`` with a fixed column order and a JSON
manifest holding the config echo, versions and timings.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass

import numpy as np
import scipy

from . import __version__
from .metastability import (
    check_condition_D,
    check_condition_R,
    check_condition_V,
    check_H0_H1,
    extract_reduced_generator,
    mixing_time,
    reflected_chain,
    spectral_gap,
    tv_curve,
)
from .potential import capacity
from .sim import order_exit_statistics
from .zero_range import (
    ZRModel,
    capacity_test_function_q,
    config_count,
    enumerate_configs,
    limit_generator_LY,
    parse_model_spec,
    search_superharmonic_constants,
    walk_capacity,
    zr_generator,
    zr_measure,
    zr_wells,
)

__all__ = [
    "EXPERIMENTS",
    "COLUMNS",
    "ExperimentConfig",
    "ResultRecord",
    "ConfigError",
    "parse_config",
    "validate_config",
    "run_experiment",
]

_TAIL = ["status", "reason"]

COLUMNS = {
    "condensation": ["N", "mu_E_total", "mu_Delta", "mu_E_min", "mu_E_max", "Z"],
    "capacity-limit": ["N", "cap_N", "limit", "ratio", "dirichlet_Q", "witness"],
    "resolvent-check": ["N", "lambda", "max_oscillation", "f_min", "f_max", "residual"],
    "reduced-generator": ["N", "lambda", "rate_min", "rate_max", "negativity", "discrepancy", "limit_rate"],
    "condition-D": ["N", "lambda", "max_diagnostic", "mu_Delta"],
    "condition-V": ["N", "u_N", "worst_start", "tail_exact", "tail_sim", "tail_sim_se",
                    "mean_exact", "mean_sim", "mean_sim_se", "markov_bound", "censored"],
    "mixing": ["N", "s_N", "states_V", "tv_at_s", "t_mix_quarter"],
    "spectral-gap": ["N", "s_N", "states_V", "gap", "gap_times_s"],
    "superharmonic": ["N", "m_terms", "constants", "max_drift_full", "max_drift_reflected",
                      "boundary_monotone", "c1", "c2", "verdict"],
    "order-exit": ["N", "samples", "exit_rate", "exit_rate_se", "limit_rate", "ks_statistic",
                   "ks_pvalue", "censored"],
    "h0h1": ["N", "h1_ratio_max", "jump_rate_min", "jump_rate_max"],
}
EXPERIMENTS = tuple(COLUMNS)
PER_LAMBDA = {"resolvent-check", "reduced-generator", "condition-D"}

_MODEL_KEYS = {"kappa", "walk_rate", "delta", "gamma", "speedup"}


class ConfigError(ValueError):
    def __init__(self, violations):
        super().__init__("; ".join(violations))
        self.violations = list(violations)


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    model: dict
    N_grid: tuple
    lambda_grid: tuple = (0.5, 1.0, 2.0)
    seed: int = 0
    output: str = "results"
    workers: int = 1
    samples: int = 10_000
    max_states: int = 200_000
    m_terms: int = 8

    def echo(self) -> dict:
        d = asdict(self)
        d["model"] = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.model.items()}
        d["N_grid"] = list(self.N_grid)
        d["lambda_grid"] = list(self.lambda_grid)
        return d


@dataclass
class ResultRecord:
    experiment: str
    N: int
    params: dict
    diagnostics: dict
    wall_time: float
    status: str = "ok"
    reason: str = ""


# -- config parsing -------------------------------------------------------------

def parse_config(text: str, base_dir: str = ".") -> ExperimentConfig:
    """Parse and normalize a config; raises :class:`ConfigError` listing every violation."""
    violations = []
    scalars: dict = {}
    Ns, lams, model_lines = [], [], []
    model_file = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *vals = line.split()
        if key in _MODEL_KEYS:
            model_lines.append(line)
            continue
        if len(vals) != 1:
            violations.append(f"line {lineno}: expected '{key} <value>'")
            continue
        v = vals[0]
        try:
            if key == "N":
                Ns.append(int(v))
            elif key == "lambda":
                lams.append(float(v))
            elif key == "model":
                model_file = v
            elif key == "experiment" or key == "output":
                scalars[key] = v
            elif key in ("seed", "workers", "samples", "max_states", "m_terms"):
                scalars[key] = int(v)
            else:
                violations.append(f"line {lineno}: unknown key {key!r}")
        except ValueError:
            violations.append(f"line {lineno}: bad value {v!r} for {key}")
    exp = scalars.get("experiment")
    if exp is None:
        violations.append("missing 'experiment'")
    elif exp not in EXPERIMENTS:
        violations.append(f"unknown experiment {exp!r}; choose one of: {', '.join(EXPERIMENTS)}")
    model_text = "\n".join(model_lines)
    if model_file is not None:
        path = model_file if os.path.isabs(model_file) else os.path.join(base_dir, model_file)
        try:
            with open(path) as fh:
                model_text = fh.read() + "\n" + model_text
        except OSError as exc:
            violations.append(f"cannot read model file {model_file!r}: {exc.strerror}")
    model = {}
    if model_text.strip() or model_file is None:
        try:
            model = parse_model_spec(model_text)
            model.pop("N", None)
        except ValueError as exc:
            violations.append(f"model: {exc}")
    if not Ns:
        violations.append("N grid is empty")
    elif any(b <= a for a, b in zip(Ns, Ns[1:])):
        violations.append("N grid must be strictly increasing")
    if any(n < 2 for n in Ns):
        violations.append("every N must be at least 2")
    if any(not l > 0 for l in lams):
        violations.append("lambda grid must be positive")
    if model:
        kappa = model["walk_rates"].shape[0]
        gamma = model.get("gamma")
        if gamma is not None and not gamma < 2.0 / kappa:
            violations.append(f"gamma must be < 2/kappa = {2.0 / kappa:g}")
        elif gamma is not None and not gamma > 0:
            violations.append("gamma must be positive")
        delta = model.get("delta", 0.25)
        if not 0 < delta < 1:
            violations.append("delta must lie in (0, 1)")
        if not violations:
            try:
                ZRModel(N=max(Ns), **model)
            except ValueError as exc:
                violations.append(f"model: {exc}")
    for key in ("samples", "max_states", "workers"):
        if key in scalars and scalars[key] < 1:
            violations.append(f"{key} must be positive")
    if "m_terms" in scalars and scalars["m_terms"] <= 2:
        violations.append("m_terms must exceed 2")
    if violations:
        raise ConfigError(violations)
    model.setdefault("delta", 0.25)
    model.setdefault("speedup", True)
    kw = {k: scalars[k] for k in ("seed", "output", "workers", "samples", "max_states", "m_terms") if k in scalars}
    return ExperimentConfig(experiment=exp, model=model, N_grid=tuple(Ns),
                            lambda_grid=tuple(lams) if lams else (0.5, 1.0, 2.0), **kw)


def validate_config(path) -> ExperimentConfig:
    """Read and normalize a config file.

    Raises ``OSError`` when unreadable and :class:`ConfigError` with the full
    list of violations otherwise.
    """
    with open(path) as fh:
        text = fh.read()
    return parse_config(text, os.path.dirname(os.path.abspath(path)))


# -- cells ------------------------------------------------------------------

class _Bundle:
    """Lazily built objects for one model size."""

    def __init__(self, model: ZRModel):
        self.model = model
        self.configs = enumerate_configs(model.N, model.kappa)
        self.chain = zr_generator(model, self.configs)
        self.mu, self.Z = zr_measure(model, self.configs)
        self._wells = None

    @property
    def wells(self):
        if self._wells is None:
            self._wells = zr_wells(self.model, self.configs)
        return self._wells


def _cell_condensation(b, cfg):
    E = b.wells.E
    masses = [b.mu.mass(E[x]) for x in E.labels]
    return [{"mu_E_total": math.fsum(masses), "mu_Delta": b.mu.mass(E.delta),
             "mu_E_min": min(masses), "mu_E_max": max(masses), "Z": b.Z}]


def _cell_capacity(b, cfg):
    E = b.wells.E
    labels = E.labels
    half = len(labels) // 2
    S1, S2 = labels[:half], labels[half:]
    cap = capacity(b.chain, b.mu, E.union(S1), E.union(S2), verify=False)
    r = b.model.walk_rates
    limit = 6.0 * sum(walk_capacity(r, [x - 1], [y - 1]) for x in S1 for y in S2)
    # the asymptotic form uses the sped-up generator; without speedup rescale by theta
    tf = b.model.time_factor
    cap_sped = cap * b.model.scales.theta / tf
    _, DQ, _ = capacity_test_function_q(b.model, 0, b.chain, b.mu, b.configs)
    sc = b.model.scales
    DQ_sped = DQ * sc.theta / tf
    return [{"cap_N": cap_sped, "limit": limit, "ratio": cap_sped / limit, "dirichlet_Q": DQ_sped,
             "witness": DQ_sped * sc.m ** 2 * math.log(sc.N) / sc.theta}]


def _unit_g(k):
    g = np.zeros(k)
    g[0] = 1.0
    return g


def _cell_resolvent(b, cfg):
    from .potential import solve_resolvent
    from .metastability import lift_well_function
    rows = []
    E = b.wells.E
    for lam in cfg.lambda_grid:
        g = _unit_g(len(E.labels))
        rep, F, f = check_condition_R(b.chain, b.mu, E, lam, g)
        res = solve_resolvent(b.chain, lam, lift_well_function(E, g)).residual
        rows.append({"lambda": lam, "max_oscillation": max(d["oscillation"] for d in rep.diagnostics.values()),
                     "f_min": float(f.min()), "f_max": float(f.max()), "residual": res})
    return rows


def _offdiag(R):
    return R[~np.eye(R.shape[0], dtype=bool)]


def _cell_reduced(b, cfg):
    E = b.wells.E
    tf_ratio = b.model.scales.theta / b.model.time_factor
    limit = limit_generator_LY(b.model)
    gens = [extract_reduced_generator(b.chain, b.mu, E, lam) for lam in cfg.lambda_grid]
    ref = _offdiag(gens[-1].rates)
    rows = []
    for lam, G in zip(cfg.lambda_grid, gens):
        off = _offdiag(G.rates)
        rows.append({"lambda": lam, "rate_min": float(off.min()) * tf_ratio,
                     "rate_max": float(off.max()) * tf_ratio,
                     "negativity": G.diagnostics["negativity"],
                     "discrepancy": float(np.max(np.abs(off - ref) / ref)),
                     "limit_rate": float(_offdiag(limit.rates).max())})
    return rows


def _cell_condition_D(b, cfg):
    E = b.wells.E
    rows = []
    for lam in cfg.lambda_grid:
        rep = check_condition_D(b.chain, E, lam)
        rows.append({"lambda": lam, "max_diagnostic": max(d["max_discounted"] for d in rep.diagnostics.values()),
                     "mu_Delta": b.mu.mass(E.delta)})
    return rows


def _cell_condition_V(b, cfg):
    E = b.wells.E
    u = b.model.scales.u * b.model.scales.theta / b.model.time_factor
    x = E.labels[0]
    sub = type(E)(E.n, {x: E[x]})
    rep = check_condition_V(b.chain, sub, {x: b.wells.anchors[x]}, [u], n_samples=cfg.samples,
                            seed=cfg.seed, stream=b.model.N)
    d = rep.diagnostics[x]
    return [{"u_N": u, "worst_start": d["worst_start"], "tail_exact": d["tail_exact_worst"][0],
             "tail_sim": d["tail_sim"][0], "tail_sim_se": d["tail_sim_se"][0],
             "mean_exact": d["mean_hitting_worst"], "mean_sim": d["mean_sim"],
             "mean_sim_se": d["mean_sim_se"], "markov_bound": d["markov_bound"][0],
             "censored": d["censored"]}]


def _reflected(b):
    V = b.wells.V[1]
    ref = reflected_chain(b.chain, V)
    return ref, b.mu.conditioned(V), V


def _cell_mixing(b, cfg):
    ref, pi, V = _reflected(b)
    s = b.model.scales.s * b.model.scales.theta / b.model.time_factor
    return [{"s_N": s, "states_V": int(V.size), "tv_at_s": float(tv_curve(ref, pi, [s])[0]),
             "t_mix_quarter": mixing_time(ref, pi, 0.25)}]


def _cell_gap(b, cfg):
    ref, pi, V = _reflected(b)
    s = b.model.scales.s * b.model.scales.theta / b.model.time_factor
    gap = spectral_gap(ref, pi)
    return [{"s_N": s, "states_V": int(V.size), "gap": gap, "gap_times_s": gap * s}]


def _cell_superharmonic(b, cfg):
    coeffs, _, rep = search_superharmonic_constants(b.model, 0, cfg.m_terms)
    const = "" if coeffs is None else ";".join(f"{k}={v!r}" for k, v in sorted(coeffs.items()))
    return [{"m_terms": cfg.m_terms, "constants": const,
             "max_drift_full": rep.get("max_normalized_drift_full", float("nan")),
             "max_drift_reflected": rep.get("max_normalized_drift_reflected", float("nan")),
             "boundary_monotone": rep.get("boundary_monotone", False),
             "c1": rep.get("c1", float("nan")), "c2": rep.get("c2", float("nan")),
             "verdict": rep["verdict"]}]


def _cell_order_exit(b, cfg):
    E = b.wells.E
    x = E.labels[0]
    st = order_exit_statistics(b.chain, E, x, cfg.samples, (cfg.seed, b.model.N), mu=b.mu)
    scale = b.model.scales.theta / b.model.time_factor
    limit = limit_generator_LY(b.model)
    return [{"samples": cfg.samples, "exit_rate": st["exit_rate"] * scale,
             "exit_rate_se": st["exit_rate_se"] * scale,
             "limit_rate": float(limit.rates[0].sum()), "ks_statistic": st["ks_statistic"],
             "ks_pvalue": st["ks_pvalue"], "censored": st["censored"]}]


def _cell_h0h1(b, cfg):
    rep = check_H0_H1(b.chain, b.mu, b.wells.E, b.wells.anchors)
    rates = [r for d in rep.diagnostics.values() for r in d["jump_rates"].values()]
    scale = b.model.scales.theta / b.model.time_factor
    return [{"h1_ratio_max": max(d["h1_ratio"] for d in rep.diagnostics.values()),
             "jump_rate_min": min(rates) * scale, "jump_rate_max": max(rates) * scale}]


_CELLS = {
    "condensation": _cell_condensation,
    "capacity-limit": _cell_capacity,
    "resolvent-check": _cell_resolvent,
    "reduced-generator": _cell_reduced,
    "condition-D": _cell_condition_D,
    "condition-V": _cell_condition_V,
    "mixing": _cell_mixing,
    "spectral-gap": _cell_gap,
    "superharmonic": _cell_superharmonic,
    "order-exit": _cell_order_exit,
    "h0h1": _cell_h0h1,
}


def _run_cell(cfg: ExperimentConfig, N: int):
    t0 = time.perf_counter()
    cols = COLUMNS[cfg.experiment]
    try:
        kappa = cfg.model["walk_rates"].shape[0]
        need = config_count(N, kappa)
        if need > cfg.max_states:
            raise MemoryError(f"N={N} needs {need} states; the cap is {cfg.max_states}")
        model = ZRModel(N=N, **cfg.model)
        rows = _CELLS[cfg.experiment](_Bundle(model), cfg)
        for r in rows:
            for k, v in r.items():
                if isinstance(v, float) and not math.isfinite(v):
                    raise FloatingPointError(f"diagnostic {k} is not finite")
        recs = [ResultRecord(cfg.experiment, N, {"lambda": r["lambda"]} if "lambda" in r else {},
                             {k: v for k, v in r.items() if k in cols}, 0.0) for r in rows]
    except Exception as exc:  # a failed cell never aborts its siblings
        recs = [ResultRecord(cfg.experiment, N, {}, {}, 0.0, "failed", f"{type(exc).__name__}: {exc}")]
    wall = time.perf_counter() - t0
    for r in recs:
        r.wall_time = wall / len(recs)
    return recs


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def _row(cfg, rec: ResultRecord):
    cols = COLUMNS[cfg.experiment]
    vals = {"N": rec.N, **rec.params, **rec.diagnostics}
    return [_fmt(vals.get(c, "")) for c in cols] + [rec.status, rec.reason]


def run_experiment(cfg: ExperimentConfig, workers: int | None = None):
    """Run every cell of the N grid; returns ``(records, exit_status)``.

    Rows are written in grid order as soon as all earlier cells are done.
    Exit status is 1 when any cell failed and 0 otherwise.
    """
    env = os.environ.get("METASTAB_WORKERS", "").strip()
    if workers is None:
        workers = int(env) if env else cfg.workers
    os.makedirs(cfg.output, exist_ok=True)
    csv_path = os.path.join(cfg.output, f"{cfg.experiment}.csv")
    man_path = os.path.join(cfg.output, f"{cfg.experiment}.manifest.json")
    results: dict = {}
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(COLUMNS[cfg.experiment] + _TAIL)
        fh.flush()
        nxt = 0

        def drain():
            nonlocal nxt
            while nxt < len(cfg.N_grid) and cfg.N_grid[nxt] in results:
                for rec in results[cfg.N_grid[nxt]]:
                    w.writerow(_row(cfg, rec))
                fh.flush()
                nxt += 1

        if workers <= 1:
            for N in cfg.N_grid:
                results[N] = _run_cell(cfg, N)
                drain()
        else:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                futs = {ex.submit(_run_cell, cfg, N): N for N in cfg.N_grid}
                for fut in as_completed(futs):
                    results[futs[fut]] = fut.result()
                    drain()
    records = [r for N in cfg.N_grid for r in results[N]]
    manifest = {
        "config": cfg.echo(),
        "versions": {"metastab": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "cells": [{"N": r.N, "params": r.params, "status": r.status, "reason": r.reason,
                   "wall_time": r.wall_time} for r in records],
        "csv": os.path.basename(csv_path),
    }
    with open(man_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    status = 1 if any(r.status != "ok" for r in records) else 0
    return records, status


def csv_text(cfg: ExperimentConfig, records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(COLUMNS[cfg.experiment] + _TAIL)
    for r in records:
        w.writerow(_row(cfg, r))
    return buf.getvalue()
