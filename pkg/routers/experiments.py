"""
Experiment API: validate configs, start runs in the background, report their status and summary rows.
"""
from __future__ import annotations

import logging

from fastapi import APIRouter, BackgroundTasks, HTTPException, Query, Request

import app_state
from config import PROFILES
from errors import ConfigParseError, ConfigValidationError
from services.experiment import cells_for, run_experiment
from services.experiment_config import ExperimentConfig, parse_config

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/api", tags=["experiments"])


async def _config_from_body(request: Request) -> ExperimentConfig:
    text = (await request.body()).decode("utf-8", errors="replace")
    try:
        return parse_config(text, source="request body")
    except ConfigParseError as e:
        raise HTTPException(status_code=422, detail={"error": str(e), "line": e.line, "column": e.column})
    except ConfigValidationError as e:
        raise HTTPException(status_code=422, detail={"error": str(e), "fields": e.fields})


def _describe(cfg: ExperimentConfig, profile: str | None = None) -> dict:
    prof = cfg.resolve_profile(profile)
    return {
        "name": cfg.name,
        "methods": list(cfg.methods),
        "deltas": cfg.deltas,
        "seeds": list(cfg.seeds),
        "profile": profile or cfg.profile,
        "schedule": prof.model_dump(),
        "cells": len(cells_for(cfg)),
    }


@router.get("/profiles")
def profiles() -> dict[str, dict[str, int]]:
    """Built-in schedule profiles."""
    return PROFILES


@router.post("/validate")
async def validate(request: Request):
    """Validate a TOML experiment file sent as the request body."""
    cfg = await _config_from_body(request)
    return {"valid": True, **_describe(cfg)}


def _execute(run_id: str, cfg: ExperimentConfig, profile: str, seed_offset: int, jobs: int) -> None:
    rec = app_state.get_run(run_id)
    app_state.set_status(run_id, "running")
    try:
        result = run_experiment(cfg, rec.out_dir, profile=profile, seed_offset=seed_offset, jobs=jobs)
    except Exception as e:
        logger.exception("Run %s failed", run_id)
        app_state.set_status(run_id, "failed", error=str(e))
        return
    status = "done" if result.failures == 0 else "failed"
    error = None if status == "done" else f"{result.failures} cell(s) failed"
    app_state.set_status(run_id, status, error=error, rows=result.rows)


@router.post("/runs", status_code=202)
async def start_run(
    request: Request,
    background: BackgroundTasks,
    profile: str | None = Query(None, description="Schedule profile, e.g. desk or paper"),
    seed_offset: int = Query(0),
    jobs: int = Query(1, ge=1),
):
    cfg = await _config_from_body(request)
    profile = profile or cfg.profile
    try:
        cfg.resolve_profile(profile)
    except ConfigValidationError as e:
        raise HTTPException(status_code=422, detail={"error": str(e), "fields": e.fields})
    rec = app_state.register_run(cfg.name, profile, cfg.output_dir)
    background.add_task(_execute, rec.run_id, cfg, profile, seed_offset, jobs)
    return {"run_id": rec.run_id, "status": rec.status, "out_dir": rec.out_dir}


@router.get("/runs")
def runs() -> list[dict]:
    return [
        {k: v for k, v in rec.to_dict().items() if k != "rows"}
        for rec in app_state.list_runs()
    ]


@router.get("/runs/{run_id}")
def run_status(run_id: str) -> dict:
    rec = app_state.get_run(run_id)
    if rec is None:
        raise HTTPException(status_code=404, detail=f"unknown run {run_id}")
    return rec.to_dict()
