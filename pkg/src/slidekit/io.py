"""File formats: grid functions, masks, parameter files and reports.

A grid function is a JSON header plus a payload file next to it::

    {"dim": 2, "resolution": 65, "radius": 1.0, "format": "f8le", "payload": "u.f8"}

``format`` is ``"f8le"`` (little-endian float64, row-major, bit-exact) or ``"csv"``
(one value per line, row-major, written with ``repr`` so it also round-trips).
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any

import numpy as np

from .grid import Grid, GridFunction, Mask

SCHEMA_VERSION = 1


class FormatError(ValueError):
    """Raised for malformed input files."""


def save_grid_function(u: GridFunction, path: str | os.PathLike, fmt: str = "f8le") -> Path:
    path = Path(path)
    if fmt == "f8le":
        payload = path.with_suffix(".f8")
        payload.write_bytes(np.ascontiguousarray(u.values, dtype="<f8").tobytes(order="C"))
    elif fmt == "csv":
        payload = path.with_suffix(".csv")
        payload.write_text("\n".join(repr(float(x)) for x in u.values.ravel(order="C")) + "\n")
    else:
        raise FormatError(f"unknown payload format {fmt!r}")
    header = {
        "dim": u.grid.dim,
        "resolution": u.grid.resolution,
        "radius": u.radius,
        "format": fmt,
        "payload": payload.name,
    }
    path.write_text(json.dumps(header, indent=2) + "\n")
    return path


def load_grid_function(path: str | os.PathLike) -> GridFunction:
    path = Path(path)
    try:
        header = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    for key in ("dim", "resolution", "format", "payload"):
        if key not in header:
            raise FormatError(f"{path}: header is missing {key!r}")
    grid = Grid(int(header["dim"]), int(header["resolution"]))
    payload = path.parent / header["payload"]
    if header["format"] == "f8le":
        data = np.frombuffer(payload.read_bytes(), dtype="<f8")
    elif header["format"] == "csv":
        data = np.array([float(line) for line in payload.read_text().split()], dtype=float)
    else:
        raise FormatError(f"{path}: unknown payload format {header['format']!r}")
    if data.size != np.prod(grid.shape):
        raise FormatError(f"{path}: payload has {data.size} values, expected {np.prod(grid.shape)}")
    values = data.astype(float).reshape(grid.shape)
    return GridFunction(grid, values, radius=float(header.get("radius", 1.0)))


def save_mask(mask: Mask, path: str | os.PathLike) -> Path:
    path = Path(path)
    doc = {
        "dim": mask.grid.dim,
        "resolution": mask.grid.resolution,
        "indices": mask.indices().tolist(),
    }
    path.write_text(json.dumps(doc) + "\n")
    return path


def load_mask(path: str | os.PathLike, grid: Grid | None = None) -> Mask:
    """Read a mask file: either an index list or a ball ``{"ball": {"radius": r, "center": [...]}}``."""
    doc = read_json(path)
    if grid is None:
        grid = Grid(int(doc["dim"]), int(doc["resolution"]))
    if "ball" in doc:
        spec = doc["ball"]
        return grid.ball(float(spec["radius"]), spec.get("center"))
    members = np.zeros(grid.shape, dtype=bool)
    idx = np.asarray(doc.get("indices", []), dtype=int)
    if idx.size:
        members[tuple(idx.T)] = True
    return Mask(grid, members)


def read_json(path: str | os.PathLike) -> dict[str, Any]:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc


def _default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return _finite_or_tag(float(o))
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _finite_or_tag(x: float):
    if np.isnan(x):
        return "nan"
    if np.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def _sanitize(obj):
    if isinstance(obj, float):
        return _finite_or_tag(obj)
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _sanitize(obj.tolist())
    if isinstance(obj, np.floating):
        return _finite_or_tag(float(obj))
    return obj


def dumps(doc: dict[str, Any]) -> str:
    """Deterministic JSON (sorted keys, non-finite floats as strings)."""
    return json.dumps(_sanitize(doc), indent=2, sort_keys=True, default=_default) + "\n"


def write_json(doc: dict[str, Any], path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(doc))
    return path


def write_series_csv(rows: list[dict[str, Any]], path: str | os.PathLike) -> Path | None:
    if not rows:
        return None
    path = Path(path)
    keys = list(rows[0].keys())
    lines = [",".join(keys)]
    for row in rows:
        lines.append(",".join(repr(row.get(k)) if isinstance(row.get(k), float) else str(row.get(k)) for k in keys))
    path.write_text("\n".join(lines) + "\n")
    return path
