"""
Реестр запусков, стартованных через API.
Отдельный модуль, чтобы избежать циклического импорта main <-> routers.experiments.
"""
from __future__ import annotations

import os
import threading
import time
import uuid
from dataclasses import asdict, dataclass, field
from typing import Any

from config import OUTPUT_DIR

_lock = threading.Lock()
_runs: dict[str, RunRecord] = {}


@dataclass
class RunRecord:
    run_id: str
    name: str
    out_dir: str
    profile: str
    status: str = "pending"
    created_ms: int = field(default_factory=lambda: int(time.time() * 1000))
    finished_ms: int | None = None
    error: str | None = None
    rows: list[dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def register_run(name: str, profile: str, out_dir: str | None = None) -> RunRecord:
    """Создать запись со статусом pending. Без out_dir результаты пишутся в OUTPUT_DIR/<name>-<id>."""
    run_id = uuid.uuid4().hex[:12]
    out_dir = out_dir or os.path.join(OUTPUT_DIR, f"{name}-{run_id}")
    rec = RunRecord(run_id=run_id, name=name, out_dir=out_dir, profile=profile)
    with _lock:
        _runs[rec.run_id] = rec
    return rec


def set_status(run_id: str, status: str, *, error: str | None = None,
               rows: list[dict[str, Any]] | None = None) -> None:
    with _lock:
        rec = _runs[run_id]
        rec.status = status
        if error is not None:
            rec.error = error
        if rows is not None:
            rec.rows = rows
        if status in ("done", "failed"):
            rec.finished_ms = int(time.time() * 1000)


def get_run(run_id: str) -> RunRecord | None:
    with _lock:
        return _runs.get(run_id)


def list_runs() -> list[RunRecord]:
    """Все запуски, новые первыми."""
    with _lock:
        return sorted(_runs.values(), key=lambda r: r.created_ms, reverse=True)


def clear() -> None:
    with _lock:
        _runs.clear()
