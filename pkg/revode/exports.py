"""Run directories and the CSV / JSON / JSON-lines files written into them."""

import csv
import json
import logging
import os
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .instrumentation import Counters
from .step_control import StepRecord

logger = logging.getLogger(__name__)

RUN_PREFIX = "run_"


def get_next_run_number(output_root="output") -> int:
    """One past the highest existing run_XXXX number under output_root, or 1."""
    output_dir = Path(output_root)
    existing_runs = [d for d in output_dir.glob(f"{RUN_PREFIX}*") if d.is_dir() and d.name[len(RUN_PREFIX):].isdigit()]
    if not existing_runs:
        return 1
    return max(int(d.name[len(RUN_PREFIX):]) for d in existing_runs) + 1


def create_run_directory(output_root="output", run_number: Optional[int] = None) -> Path:
    """Create output/run_XXXX, taking the next free number unless one is given."""
    if run_number is None:
        run_number = get_next_run_number(output_root)
    run_dir = Path(output_root) / f"{RUN_PREFIX}{run_number:04d}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _plain(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def write_json(path, data) -> Path:
    """Write JSON atomically: a temporary sibling is renamed over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, default=_plain)
        f.write("\n")
    os.replace(tmp, path)
    return path


def append_jsonl(path, rows: Iterable[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, default=_plain) + "\n")
    return path


def read_jsonl(path) -> List[dict]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def write_csv(path, rows: Sequence[dict], fieldnames: Optional[Sequence[str]] = None) -> Path:
    """
    Write dict rows with csv.DictWriter.

    Floats are written with repr so they read back bit-exactly.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fieldnames is None:
        fieldnames = []
        for row in rows:
            fieldnames.extend(k for k in row if k not in fieldnames)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(fieldnames))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return path


def write_step_record(path, record: StepRecord) -> Path:
    """Accepted grid as `n,t,h`."""
    return write_csv(path, record.rows(), ["n", "t", "h"])


def write_counters(path, counters: Counters, **extra) -> Path:
    return write_json(path, {**counters.to_dict(), **extra})


def write_snapshots(path, times: Sequence[float], states: Sequence[np.ndarray]) -> Path:
    """Observed states as `t,y0,...,y{d-1}`."""
    rows = []
    for t, y in zip(times, states):
        row = {"t": float(t)}
        row.update({f"y{i}": float(v) for i, v in enumerate(np.ravel(y))})
        rows.append(row)
    return write_csv(path, rows)


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    return path
