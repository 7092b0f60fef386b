"""Readers for the experiment artifact CSVs.

Each reader validates the header exactly and converts columns to numpy
arrays; schema violations raise FigsError naming the offending column.
The readers never modify the files they parse.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np


class FigsError(ValueError):
    """Raised for schema mismatches, empty inputs, and bad jobs."""


METRICS_COLUMNS = ("time_index", "method", "metric", "value", "run_id")
TRUTH_COLUMNS = ("time_index", "kind", "axis", "value", "run_id")
SWEEP_COLUMNS = ("axis", "value", "method", "metric", "mean", "stderr",
                 "wall_seconds")
DENSITY_COLUMNS = ("x", "density")


def _read_rows(path: Path) -> List[List[str]]:
    if not path.exists():
        raise FigsError(f"input file does not exist: {path}")
    with open(path, newline="") as fh:
        rows = [row for row in csv.reader(fh) if row]
    if not rows:
        raise FigsError(f"{path.name}: empty input (no header)")
    return rows


def _check_header(path: Path, found: Sequence[str], expected: Sequence[str]):
    for pos in range(max(len(found), len(expected))):
        want = expected[pos] if pos < len(expected) else "<nothing>"
        got = found[pos] if pos < len(found) else "<missing>"
        if want != got:
            raise FigsError(f"{path.name}: expected column '{want}' at "
                            f"position {pos}, found '{got}'")


def _column(path: Path, rows: List[List[str]], pos: int, name: str, kind):
    out = []
    for i, row in enumerate(rows):
        try:
            out.append(kind(row[pos]))
        except (ValueError, IndexError):
            raise FigsError(f"{path.name}: bad value for column '{name}' on "
                            f"data row {i + 1}") from None
    return out


def sniff_schema(path) -> str:
    """Return which artifact schema a CSV file carries.

    Recognizes 'metrics', 'truth', 'particles', 'sweep', and 'density' by
    the header line alone.
    """
    p = Path(path)
    header = _read_rows(p)[0]
    if tuple(header) == METRICS_COLUMNS:
        return "metrics"
    if tuple(header) == TRUTH_COLUMNS:
        return "truth"
    if tuple(header) == SWEEP_COLUMNS:
        return "sweep"
    if tuple(header) == DENSITY_COLUMNS:
        return "density"
    if (len(header) >= 5 and header[:3] == ["time_index", "method", "particle_index"]
            and header[-1] == "run_id"
            and all(h == f"x{k}" for k, h in enumerate(header[3:-1]))):
        return "particles"
    raise FigsError(f"{p.name}: header matches no artifact schema: "
                    f"{','.join(header)}")


def read_metrics(path) -> Dict[str, np.ndarray]:
    """Parse metrics.csv into columns time_index/method/metric/value/run_id."""
    p = Path(path)
    rows = _read_rows(p)
    _check_header(p, rows[0], METRICS_COLUMNS)
    body = rows[1:]
    if not body:
        raise FigsError(f"{p.name}: empty input (no data rows)")
    return {
        "time_index": np.array(_column(p, body, 0, "time_index", int)),
        "method": np.array(_column(p, body, 1, "method", str), dtype=object),
        "metric": np.array(_column(p, body, 2, "metric", str), dtype=object),
        "value": np.array(_column(p, body, 3, "value", float)),
        "run_id": np.array(_column(p, body, 4, "run_id", int)),
    }


def read_truth(path) -> Dict[str, np.ndarray]:
    """Parse truth.csv into columns time_index/kind/axis/value/run_id."""
    p = Path(path)
    rows = _read_rows(p)
    _check_header(p, rows[0], TRUTH_COLUMNS)
    body = rows[1:]
    if not body:
        raise FigsError(f"{p.name}: empty input (no data rows)")
    return {
        "time_index": np.array(_column(p, body, 0, "time_index", int)),
        "kind": np.array(_column(p, body, 1, "kind", str), dtype=object),
        "axis": np.array(_column(p, body, 2, "axis", int)),
        "value": np.array(_column(p, body, 3, "value", float)),
        "run_id": np.array(_column(p, body, 4, "run_id", int)),
    }


def read_particles(path) -> Dict[str, np.ndarray]:
    """Parse particles.csv; the coordinate block becomes one (rows, dim) array."""
    p = Path(path)
    rows = _read_rows(p)
    header = rows[0]
    dim = len(header) - 4
    expected = (["time_index", "method", "particle_index"]
                + [f"x{k}" for k in range(max(dim, 1))] + ["run_id"])
    _check_header(p, header, expected)
    body = rows[1:]
    if not body:
        raise FigsError(f"{p.name}: empty input (no data rows)")
    coords = np.column_stack([
        _column(p, body, 3 + k, f"x{k}", float) for k in range(dim)])
    return {
        "time_index": np.array(_column(p, body, 0, "time_index", int)),
        "method": np.array(_column(p, body, 1, "method", str), dtype=object),
        "particle_index": np.array(_column(p, body, 2, "particle_index", int)),
        "coords": coords,
        "run_id": np.array(_column(p, body, 3 + dim, "run_id", int)),
    }


def read_sweep(path) -> Dict[str, np.ndarray]:
    """Parse sweep.csv into its seven aggregate columns."""
    p = Path(path)
    rows = _read_rows(p)
    _check_header(p, rows[0], SWEEP_COLUMNS)
    body = rows[1:]
    if not body:
        raise FigsError(f"{p.name}: empty input (no data rows)")
    return {
        "axis": np.array(_column(p, body, 0, "axis", str), dtype=object),
        "value": np.array(_column(p, body, 1, "value", float)),
        "method": np.array(_column(p, body, 2, "method", str), dtype=object),
        "metric": np.array(_column(p, body, 3, "metric", str), dtype=object),
        "mean": np.array(_column(p, body, 4, "mean", float)),
        "stderr": np.array(_column(p, body, 5, "stderr", float)),
        "wall_seconds": np.array(_column(p, body, 6, "wall_seconds", float)),
    }


def read_density(path) -> Dict[str, np.ndarray]:
    """Parse an oracle density CSV with columns x and density."""
    p = Path(path)
    rows = _read_rows(p)
    _check_header(p, rows[0], DENSITY_COLUMNS)
    body = rows[1:]
    if not body:
        raise FigsError(f"{p.name}: empty input (no data rows)")
    return {
        "x": np.array(_column(p, body, 0, "x", float)),
        "density": np.array(_column(p, body, 1, "density", float)),
    }
