"""CSV, TUM and range-matrix files.

Floats are written with ``%.17g`` so every value survives a write/read
round trip bit for bit. Column orders are fixed.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np

from .factors import OdometryPose, RangeMeasurement
from .geometry import Pose
from .trilateration import AnchorMap, load_range_matrix

FLOAT = "%.17g"

POSE_HEADER = ["t", "x", "y", "z", "qx", "qy", "qz", "qw"]
RANGE_HEADER = ["t", "anchor_id", "range_m"]
ANCHOR_HEADER = ["anchor_id", "x", "y", "z", "fixed_x", "fixed_y", "fixed_z"]


class DataError(ValueError):
    """A data file is missing or violates its schema."""


def _f(x: float) -> str:
    return FLOAT % float(x)


def _write_rows(path, header, rows):
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def _read_rows(path, header):
    path = Path(path)
    try:
        fh = path.open(newline="")
    except FileNotFoundError as exc:
        raise DataError(f"{path}: file not found") from exc
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None or [c.strip() for c in first] != header:
            raise DataError(f"{path}:1: expected header {','.join(header)}")
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{reader.line_num}: expected {len(header)} columns, got {len(row)}")
            yield reader.line_num, row


def _float(path, line, value) -> float:
    try:
        x = float(value)
    except ValueError:
        raise DataError(f"{path}:{line}: not a number: {value!r}") from None
    if not math.isfinite(x):
        raise DataError(f"{path}:{line}: non-finite value {value!r}")
    return x


def _pose_row(t: float, pose: Pose) -> list[str]:
    return [_f(t)] + [_f(v) for v in pose.to_tum()]


def _parse_pose(path, line, values) -> tuple[float, Pose]:
    v = [_float(path, line, x) for x in values]
    q = np.array(v[4:8])
    n = float(np.linalg.norm(q))
    if abs(n - 1.0) > 1e-6:
        raise DataError(f"{path}:{line}: quaternion norm {n:.9f} is not 1")
    return v[0], Pose.from_tum(v[1:])


def _check_increasing(path, times):
    for i in range(1, len(times)):
        if not times[i] > times[i - 1]:
            raise DataError(f"{path}: timestamps must increase (row {i + 1})")


# --- poses -------------------------------------------------------------------


def write_poses(path, stamped):
    """``[(t, Pose)]`` as ``t,x,y,z,qx,qy,qz,qw``."""
    _write_rows(path, POSE_HEADER, (_pose_row(t, p) for t, p in stamped))


def read_poses(path) -> list[tuple[float, Pose]]:
    out = [_parse_pose(path, line, row) for line, row in _read_rows(path, POSE_HEADER)]
    _check_increasing(path, [t for t, _ in out])
    return out


def write_odometry(path, odometry):
    write_poses(path, ((o.timestamp, o.pose) for o in odometry))


def read_odometry(path) -> list[OdometryPose]:
    return [OdometryPose(t, p) for t, p in read_poses(path)]


def write_tum(path, stamped):
    """TUM trajectory: ``t x y z qx qy qz qw`` per line, space separated."""
    with Path(path).open("w") as fh:
        for t, p in stamped:
            fh.write(" ".join(_pose_row(t, p)) + "\n")


def read_tum(path) -> list[tuple[float, Pose]]:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except FileNotFoundError as exc:
        raise DataError(f"{path}: file not found") from exc
    out = []
    for i, text in enumerate(lines, 1):
        text = text.strip()
        if not text or text.startswith("#"):
            continue
        parts = text.split()
        if len(parts) != 8:
            raise DataError(f"{path}:{i}: expected 8 columns, got {len(parts)}")
        out.append(_parse_pose(path, i, parts))
    _check_increasing(path, [t for t, _ in out])
    return out


# --- ranges ------------------------------------------------------------------


def write_ranges(path, ranges):
    _write_rows(path, RANGE_HEADER, ([_f(m.timestamp), str(int(m.anchor_id)), _f(m.range)] for m in ranges))


def read_ranges(path) -> list[RangeMeasurement]:
    out = []
    last = -math.inf
    for line, row in _read_rows(path, RANGE_HEADER):
        t = _float(path, line, row[0])
        try:
            aid = int(row[1])
        except ValueError:
            raise DataError(f"{path}:{line}: anchor_id must be an integer, got {row[1]!r}") from None
        r = _float(path, line, row[2])
        if r <= 0:
            raise DataError(f"{path}:{line}: range must be positive")
        if t < last:
            raise DataError(f"{path}:{line}: timestamps must not decrease")
        last = t
        out.append(RangeMeasurement(t, aid, r))
    return out


# --- anchors -----------------------------------------------------------------


def write_anchors(path, anchors: AnchorMap):
    rows = (
        [str(aid)] + [_f(v) for v in p] + [str(int(m)) for m in f]
        for aid, p, f in zip(anchors.ids, anchors.positions, anchors.fixed)
    )
    _write_rows(path, ANCHOR_HEADER, rows)


def read_anchors(path) -> AnchorMap:
    ids, pos, fixed = [], [], []
    for line, row in _read_rows(path, ANCHOR_HEADER):
        try:
            ids.append(int(row[0]))
            mask = [int(v) for v in row[4:]]
        except ValueError:
            raise DataError(f"{path}:{line}: anchor id and fixed flags must be integers") from None
        if any(m not in (0, 1) for m in mask):
            raise DataError(f"{path}:{line}: fixed flags must be 0 or 1")
        pos.append([_float(path, line, v) for v in row[1:4]])
        fixed.append([bool(m) for m in mask])
    if not ids:
        raise DataError(f"{path}: no anchors")
    try:
        return AnchorMap(ids, np.array(pos), np.array(fixed))
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def write_range_matrix(path, D):
    np.savetxt(path, np.asarray(D, dtype=float), fmt=FLOAT)


def read_range_matrix(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    try:
        return load_range_matrix(path)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


# --- traces and reports ------------------------------------------------------


def write_anchor_trace(path, names, trace):
    """``n_ranges`` then one column per free scalar, one row per calibration solve."""
    _write_rows(path, ["n_ranges"] + list(names), ([str(int(n))] + [_f(v) for v in vals] for n, vals in trace))


def read_anchor_trace(path) -> tuple[list[str], list[tuple[int, np.ndarray]]]:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [(int(r[0]), np.array([float(v) for v in r[1:]])) for r in reader if r]
    return header[1:], rows


def format_value(v) -> str:
    return _f(v) if isinstance(v, (float, np.floating)) else str(v)


def write_key_values(path, items: dict):
    """``key = value`` lines in insertion order."""
    with Path(path).open("w") as fh:
        for k, v in items.items():
            fh.write(f"{k} = {format_value(v)}\n")


def write_pose_errors(path, timestamps, errors):
    _write_rows(path, ["t", "error_m"], ([_f(t), _f(e)] for t, e in zip(timestamps, errors)))


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, items: dict):
    Path(path).write_text(json.dumps(items, indent=2, sort_keys=True) + "\n")
