"""Result persistence: atomic writes, allocation records, CSV tables and run manifests."""

import hashlib
import json
import math
import os
import tempfile
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import pandas as pd

from eefwq.errors import InvalidInputError
from eefwq.flsim import TRACE_COLUMNS, TrainingTrace
from eefwq.solver import Allocation, Scenario


def tool_version() -> str:
    try:
        return version("eefwq")
    except PackageNotFoundError:
        return "unknown"


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@contextmanager
def atomic_path(path) -> Iterator[Path]:
    """
    Yield a temporary path next to path; move it into place on success.

    On any error the temporary file is removed and path is left untouched.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    os.close(fd)
    tmp = Path(tmp_name)
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def _clean(value):
    """JSON-safe copy: numpy scalars/arrays to Python, non-finite floats to None."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, np.generic):
        return _clean(value.item())
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_json(path, data: dict) -> Path:
    with atomic_path(path) as tmp:
        tmp.write_text(json.dumps(_clean(data), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return Path(path)


def write_csv(path, frame: pd.DataFrame) -> Path:
    with atomic_path(path) as tmp:
        frame.to_csv(tmp, index=False)
    return Path(path)


def allocation_record(scenario: Scenario, allocation: Allocation, strategy: str = "fwq",
                      seed: Optional[int] = None) -> dict:
    """Everything needed to audit an allocation, in SI units."""
    report = allocation.report
    return {
        "strategy": strategy,
        "seed": seed,
        "inputs": {
            "n_devices": scenario.n,
            "b_max_hz": scenario.net.b_max,
            "n0_w": scenario.net.n0,
            "d_g_bits": scenario.net.d_g,
            "rate_log": scenario.net.rate_log,
            "t_max_s": scenario.t_max,
            "q_set": list(scenario.q_set),
            "coeffs": asdict(scenario.coeffs),
            "devices": [
                {
                    "id": d.id,
                    "pi_weight": d.pi_weight,
                    "p_cm_w": d.radio.p_cm,
                    "channel_gain": d.radio.h,
                    "mem_capacity_bits": d.mem_capacity,
                    "model_size_bits": d.model_size,
                    "gpu": asdict(d.gpu),
                }
                for d in scenario.devices
            ],
        },
        "allocation": {
            "h": allocation.h,
            "k_rounds": allocation.k_rounds,
            "k_ceil": allocation.k_ceil,
            "eps_q": allocation.eps_q,
            "q": list(allocation.q),
            "b_hz": allocation.b,
            "objective_j": allocation.objective,
            "omega": allocation.omega,
            "per_device": [asdict(e) for e in allocation.per_device],
        },
        "solver": {
            "converged": allocation.converged,
            "iterations": allocation.iterations,
            "stop_reason": allocation.stop_reason,
            "history": allocation.history,
            "relaxed": allocation.relaxed,
        },
        "feasibility": {
            "feasible": report.feasible if report else None,
            "first_violation": report.first_violation() if report else None,
            "slacks": report.slacks if report else {},
        },
    }


def trace_meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def write_trace(path, trace: TrainingTrace) -> list[Path]:
    """Trace CSV plus a sidecar with the settings a coefficient fit needs."""
    csv_path = write_csv(path, trace.to_frame())
    meta_path = write_json(trace_meta_path(path), {
        "h_steps": trace.h_steps,
        "batch": trace.batch,
        "bits": list(trace.bits),
        "pi_weights": list(trace.pi_weights),
    })
    return [csv_path, meta_path]


def read_trace(path) -> TrainingTrace:
    """
    Load a trace written by write_trace.

    Raises:
        FileNotFoundError: If the sidecar is missing.
        InvalidInputError: If the CSV lacks trace columns.
    """
    path = Path(path)
    meta_path = trace_meta_path(path)
    if not meta_path.exists():
        raise FileNotFoundError(f"Trace metadata not found: {meta_path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    frame = pd.read_csv(path)
    missing = [c for c in TRACE_COLUMNS if c not in frame.columns]
    if missing:
        raise InvalidInputError(f"{path}: missing columns {missing}")
    return TrainingTrace(
        h_steps=int(meta["h_steps"]),
        batch=int(meta["batch"]),
        bits=meta["bits"],
        pi_weights=[float(p) for p in meta["pi_weights"]],
        loss=frame["loss"].tolist(),
        grad_norm_sq=frame["grad_norm_sq"].tolist(),
        accuracy=frame["accuracy"].tolist(),
        energy_j=frame["energy_j"].tolist(),
    )


def read_traces(directory) -> list[TrainingTrace]:
    """All traces (CSV files with a metadata sidecar) in a directory, sorted by name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"Trace directory not found: {directory}")
    return [read_trace(p) for p in sorted(directory.glob("*.csv")) if trace_meta_path(p).exists()]


def config_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass
class RunManifest:
    """Provenance of one CLI run."""
    command: str
    config_digest: str
    seed: int
    version: str = field(default_factory=tool_version)
    started_at: str = field(default_factory=utc_now)
    finished_at: str = ""
    outputs: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def finish(self, outputs) -> "RunManifest":
        self.outputs = [str(p) for p in outputs]
        self.finished_at = utc_now()
        return self

    def write(self, path) -> Path:
        return write_json(path, asdict(self))
