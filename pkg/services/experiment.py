"""
Experiment runner: one cell per (method, δ, seed), cells optionally in a process pool.
Per-cell files are reproducible; timestamps and versions go to metadata.json only.
"""
from __future__ import annotations

import logging
import math
import platform
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np
import pydantic
import scipy

from services.baselines import chebyshev_tightening, gaussian_tightening, scenario_tightening
from services.experiment_config import ExperimentConfig
from services.gp_classify import laplace_fit, predict
from services.plant import RngStream
from services.smpc import TighteningVector
from services.tightener import final_gamma, run, simulate_closed_loop
from storage.trace_store import (
    read_csv,
    read_gamma,
    read_snapshot,
    write_csv,
    write_gamma,
    write_json,
    write_rollout,
    write_snapshot,
    write_steps,
    write_updates,
)

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = [
    "method", "delta", "seed", "status", "gamma_tilde_final",
    "gamma_weighted_sum", "empirical_H", "avg_cost", "runtime_s",
]

# Подпотоки одного seed: обучение, оценка, сэмплы сценарного метода
_LEARN_STREAM, _EVAL_STREAM, _SCENARIO_STREAM = 0, 1, 2


@dataclass(frozen=True)
class Cell:
    method: str
    delta: float
    seed: int

    @property
    def dirname(self) -> str:
        return f"{self.method}-d{self.delta!r}-s{self.seed}"


@dataclass
class ExperimentResult:
    out_dir: Path
    rows: list[dict[str, Any]]

    @property
    def failures(self) -> int:
        return sum(1 for r in self.rows if r["status"] != "ok")


def cells_for(cfg: ExperimentConfig, seed_offset: int = 0) -> list[Cell]:
    return [Cell(m, d, s + seed_offset) for m in cfg.methods for d in cfg.deltas for s in cfg.seeds]


def run_cell(cfg: ExperimentConfig, profile_name: str | None, cell: Cell, out_dir: Path) -> dict[str, Any]:
    started = time.perf_counter()
    profile = cfg.resolve_profile(profile_name)
    plant = cfg.build_plant()
    spec = cfg.build_ocp(plant)
    weights = cfg.weights(spec)
    rng = RngStream(cell.seed)
    cell_dir = out_dir / "cells" / cell.dirname
    row: dict[str, Any] = {"method": cell.method, "delta": cell.delta, "seed": cell.seed,
                           "status": "ok", "gamma_tilde_final": None}

    if cell.method == "learned":
        space = cfg.build_gamma_space(spec)
        tcfg = cfg.build_tightener(spec, cell.delta, profile)
        trace = run(plant, spec, space, tcfg, rng.substream(_LEARN_STREAM))
        write_updates(cell_dir / "updates.csv", trace.updates)
        write_steps(cell_dir / "train_steps.csv", trace.steps, plant.d_x, plant.d_u)
        if trace.final_fit is not None:
            write_snapshot(cell_dir / "model.snapshot", trace.final_fit)
        if trace.final_infeasible:
            row.update(status="final_infeasible", gamma_weighted_sum=None, empirical_H=None, avg_cost=None,
                       runtime_s=time.perf_counter() - started)
            return row
        gamma = trace.final_gamma.vector
        row["gamma_tilde_final"] = ";".join(repr(v) for v in trace.final_gamma.reduced)
    elif cell.method in ("chebyshev", "gaussian"):
        fn = chebyshev_tightening if cell.method == "chebyshev" else gaussian_tightening
        gamma = fn(plant.A, plant.noise.covariance(), plant.constraint, cell.delta, spec.horizon)
    elif cell.method == "scenario":
        gamma, _ = scenario_tightening(plant.A, plant.noise, plant.constraint, cell.delta, spec.horizon,
                                       cfg.scenario.samples, rng.substream(_SCENARIO_STREAM))
    else:
        raise ValueError(f"unknown method {cell.method}")

    write_gamma(cell_dir / "gamma.csv", gamma, spec.d_c)
    rollout = simulate_closed_loop(plant, spec, gamma, cfg.eval_horizon(profile), rng.substream(_EVAL_STREAM),
                                   burn_in=cfg.evaluation.burn_in)
    write_rollout(cell_dir / "steps.csv", rollout.start, rollout.states, rollout.inputs,
                  rollout.labels, rollout.stage_costs)
    row.update(
        gamma_weighted_sum=float(weights @ gamma.values),
        empirical_H=rollout.satisfaction_rate,
        avg_cost=rollout.average_cost,
        runtime_s=time.perf_counter() - started,
    )
    logger.info("Cell %s: H=%.4f cost=%.5f", cell.dirname, row["empirical_H"], row["avg_cost"])
    return row


def _safe_cell(cfg: ExperimentConfig, profile_name: str | None, cell: Cell, out_dir: Path) -> dict[str, Any]:
    try:
        return run_cell(cfg, profile_name, cell, out_dir)
    except Exception:
        logger.exception("Cell %s failed", cell.dirname)
        return {"method": cell.method, "delta": cell.delta, "seed": cell.seed, "status": "error",
                "gamma_tilde_final": None, "gamma_weighted_sum": None, "empirical_H": None,
                "avg_cost": None, "runtime_s": None}


def write_summary(out_dir: Path, rows: list[dict[str, Any]]) -> None:
    write_csv(out_dir / "summary.csv", SUMMARY_COLUMNS, ([r.get(c) for c in SUMMARY_COLUMNS] for r in rows))


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: str | Path,
    profile: str | None = None,
    seed_offset: int = 0,
    jobs: int = 1,
) -> ExperimentResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    profile_name = profile or cfg.profile
    cfg.resolve_profile(profile_name)
    cells = cells_for(cfg, seed_offset)
    started_at = datetime.now(timezone.utc).isoformat()
    logger.info("Running %d cells of '%s' (profile %s, jobs %d) into %s",
                len(cells), cfg.name, profile_name, jobs, out_dir)

    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_safe_cell, cfg, profile_name, c, out_dir) for c in cells]
            rows = [f.result() for f in futures]
    else:
        rows = [_safe_cell(cfg, profile_name, c, out_dir) for c in cells]

    write_summary(out_dir, rows)
    write_json(out_dir / "metadata.json", {
        "name": cfg.name,
        "profile": profile_name,
        "seed_offset": seed_offset,
        "jobs": jobs,
        "started_at": started_at,
        "finished_at": datetime.now(timezone.utc).isoformat(),
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pydantic": pydantic.VERSION,
        },
        "config": cfg.model_dump(),
    })
    result = ExperimentResult(out_dir, rows)
    if result.failures:
        logger.warning("%d of %d cells did not finish cleanly", result.failures, len(rows))
    return result



_CELL_NAME = re.compile(r"^(?P<method>[a-z]+)-d(?P<delta>[^-]+(?:e-\d+)?)-s(?P<seed>-?\d+)$")


@dataclass(frozen=True)
class ReplayResult:
    steps: int
    empirical_H: float
    avg_cost: float
    gamma_sum: float | None
    updates: int
    final_gamma_tilde: tuple[float, ...] | None = None
    final_probability: float | None = None


def _parse_cell_name(name: str) -> Cell | None:
    m = _CELL_NAME.match(name)
    if not m:
        return None
    return Cell(m.group("method"), float(m.group("delta")), int(m.group("seed")))


def replay_cell(cell_dir: str | Path, cfg: ExperimentConfig | None = None) -> ReplayResult:
    """Recompute a cell's metrics from its files; with the config, redo the final γ choice from the snapshot."""
    cell_dir = Path(cell_dir)
    steps = read_csv(cell_dir / "steps.csv") if (cell_dir / "steps.csv").exists() else []
    labels = [int(r["label"]) for r in steps]
    costs = [float(r["stage_cost"]) for r in steps]
    gamma: TighteningVector | None = None
    if (cell_dir / "gamma.csv").exists():
        gamma = read_gamma(cell_dir / "gamma.csv")
    updates = read_csv(cell_dir / "updates.csv") if (cell_dir / "updates.csv").exists() else []

    final_tilde, final_prob = None, None
    snapshot = cell_dir / "model.snapshot"
    cell = _parse_cell_name(cell_dir.name)
    if snapshot.exists():
        dataset, kernel, _ = read_snapshot(snapshot)
        fit = laplace_fit(dataset, kernel)
        if cfg is not None and cell is not None and updates:
            spec = cfg.build_ocp()
            space = cfg.build_gamma_space(spec)
            tcfg = cfg.build_tightener(spec, cell.delta, cfg.resolve_profile())
            visited = [space.candidate(np.array([float(v) for v in r["gamma_tilde"].split(";")])) for r in updates]
            chosen, prob = final_gamma(fit, list({c.full: c for c in visited}.values()), tcfg)
            if chosen is not None:
                final_tilde, final_prob = chosen.reduced, prob
        elif gamma is not None:
            final_prob = predict(fit, gamma.values).probability

    return ReplayResult(
        steps=len(steps),
        empirical_H=float(np.mean(labels)) if labels else math.nan,
        avg_cost=float(np.mean(costs)) if costs else math.nan,
        gamma_sum=None if gamma is None else float(gamma.values.sum()),
        updates=len(updates),
        final_gamma_tilde=final_tilde,
        final_probability=final_prob,
    )
