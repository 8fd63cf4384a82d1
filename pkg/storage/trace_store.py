"""
CSV / snapshot files for runs. Every file is written to a temp name and moved into place.
"""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Any

import numpy as np

from errors import SmpcError
from services.gp_classify import ClassificationDataset, LaplaceFit, SeKernel
from services.smpc import TighteningVector
from services.tightener import StepRecord, UpdateRecord

SNAPSHOT_HEADER = "# gp-snapshot v1"


def fmt(value: Any) -> str:
    """Decimal text that round-trips: repr for floats, '' for None and nan."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "" if np.isnan(value) else repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    _atomic_write(Path(path), buf.getvalue())


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def write_json(path: str | Path, payload: dict[str, Any]) -> None:
    _atomic_write(Path(path), json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


# --- tightening vectors -------------------------------------------------------------

def write_gamma(path: str | Path, gamma: TighteningVector, d_c: int) -> None:
    blocks = gamma.blocks(d_c)
    write_csv(path, ["tau", "row", "g"],
              ((tau, r, blocks[tau, r]) for tau in range(blocks.shape[0]) for r in range(d_c)))


def read_gamma(path: str | Path) -> TighteningVector:
    rows = sorted(read_csv(path), key=lambda r: (int(r["tau"]), int(r["row"])))
    return TighteningVector(np.array([float(r["g"]) for r in rows]))


# --- step logs ----------------------------------------------------------------------

def _step_header(d_x: int, d_u: int) -> list[str]:
    inputs = ["u"] if d_u == 1 else [f"u{j + 1}" for j in range(d_u)]
    return ["t"] + [f"x{j + 1}" for j in range(d_x)] + inputs + ["label", "stage_cost"]


def write_steps(path: str | Path, steps: Sequence[StepRecord], d_x: int, d_u: int) -> None:
    write_csv(path, _step_header(d_x, d_u),
              ([s.t, *s.x, *s.u, s.label, s.stage_cost] for s in steps))


def write_rollout(
    path: str | Path,
    start: int,
    states: np.ndarray,
    inputs: np.ndarray,
    labels: np.ndarray,
    costs: np.ndarray,
) -> None:
    d_x, d_u = states.shape[1], inputs.shape[1]
    write_csv(path, _step_header(d_x, d_u),
              ([start + k, *states[k], *inputs[k], labels[k], costs[k]] for k in range(states.shape[0])))


def write_updates(path: str | Path, updates: Sequence[UpdateRecord]) -> None:
    d_x = len(updates[0].x) if updates else 0
    header = ["i", "t_i", "gamma_tilde", "feasible", "random", "psi", "lambda", "dataset_size"]
    header += [f"x{j + 1}" for j in range(d_x)]

    def row(u: UpdateRecord) -> list[Any]:
        return [u.i, u.t_i, ";".join(fmt(v) for v in u.gamma.reduced), u.feasible, u.random,
                u.psi, u.lambda_, u.dataset_size, *u.x]

    write_csv(path, header, (row(u) for u in updates))


# --- GP snapshots ---------------------------------------------------------------------

def write_snapshot(path: str | Path, fit: LaplaceFit) -> None:
    data = fit.dataset
    lines = [
        SNAPSHOT_HEADER,
        f"psi {fmt(fit.kernel.psi)}",
        f"lambda {fmt(fit.kernel.lambda_)}",
        f"dim {data.inputs.shape[1]}",
        f"entries {len(data)}",
    ]
    for x, n, k, f in zip(data.inputs, data.trials, data.successes, fit.mode):
        lines.append(" ".join([*(fmt(v) for v in x), str(int(n)), str(int(k)), fmt(f)]))
    _atomic_write(Path(path), "\n".join(lines) + "\n")


def read_snapshot(path: str | Path) -> tuple[ClassificationDataset, SeKernel, np.ndarray]:
    """Dataset, kernel and stored latent mode."""
    with open(path, encoding="utf-8") as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or lines[0] != SNAPSHOT_HEADER:
        raise SmpcError(f"{path}: not a GP snapshot (expected '{SNAPSHOT_HEADER}')")
    fields = dict(ln.split(" ", 1) for ln in lines[1:5])
    kernel = SeKernel(psi=float(fields["psi"]), lambda_=float(fields["lambda"]))
    dim, m = int(fields["dim"]), int(fields["entries"])
    body = [ln.split() for ln in lines[5:5 + m]]
    if len(body) != m:
        raise SmpcError(f"{path}: snapshot truncated ({len(body)} of {m} entries)")
    triples = [([float(v) for v in row[:dim]], int(row[dim]), int(row[dim + 1])) for row in body]
    mode = np.array([float(row[dim + 2]) for row in body])
    return ClassificationDataset.from_triples(triples), kernel, mode
