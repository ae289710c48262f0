"""CSV ingestion and emission with full-precision round trips."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .model import Trajectory


class DataFormatError(ValueError):
    pass


def fmt(v: float) -> str:
    """17 significant digits: enough to reproduce any double exactly."""
    return format(float(v), ".17g")


def write_trajectory(path, traj: Trajectory) -> None:
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "x", "y"])
        for t, (x, y) in enumerate(zip(traj.states, traj.observations)):
            wr.writerow([t, fmt(x), fmt(y)])


def write_observations(path, y) -> None:
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "y"])
        for t, v in enumerate(np.asarray(y, dtype=float)):
            wr.writerow([t, fmt(v)])


def read_csv_series(path) -> tuple[np.ndarray | None, np.ndarray]:
    """Read a ``t,y`` or ``t,x,y`` file; returns (states or None, observations)."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError("no observations")
    header = [h.strip() for h in rows[0]]
    if header not in (["t", "y"], ["t", "x", "y"]):
        raise DataFormatError(f"line 1: expected header 't,y' or 't,x,y', got {','.join(header)!r}")
    body = [(i + 2, r) for i, r in enumerate(rows[1:]) if any(c.strip() for c in r)]
    if not body:
        raise DataFormatError("no observations")
    ncol = len(header)
    ts, cols = [], [[] for _ in range(ncol - 1)]
    for line, r in body:
        if len(r) != ncol:
            raise DataFormatError(f"line {line}: expected {ncol} fields, got {len(r)}")
        try:
            t = int(r[0])
            vals = [float(c) for c in r[1:]]
        except ValueError as exc:
            raise DataFormatError(f"line {line}: {exc}") from None
        if not all(np.isfinite(vals)):
            raise DataFormatError(f"line {line}: non-finite value")
        expected = ts[-1] + 1 if ts else 0
        if t != expected:
            raise DataFormatError(f"line {line}: gap in t, expected {expected} but found {t}")
        ts.append(t)
        for c, v in zip(cols, vals):
            c.append(v)
    arrs = [np.array(c) for c in cols]
    return (arrs[0], arrs[1]) if ncol == 3 else (None, arrs[0])


def read_observations(path) -> np.ndarray:
    return read_csv_series(path)[1]


def read_trajectory(path) -> Trajectory:
    x, y = read_csv_series(path)
    if x is None:
        raise DataFormatError("file has no state column")
    return Trajectory(x, y)


def write_rows(path, header: list[str], rows) -> None:
    """Generic CSV writer; floats at 17 significant digits."""
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for r in rows:
            wr.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (tuple, set)):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
