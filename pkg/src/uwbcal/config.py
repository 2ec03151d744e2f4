"""Run configuration: a YAML tree mapped onto the option dataclasses.

Every key is checked against the dataclass it lands in; unknown keys and
badly typed values raise ``ConfigError`` naming the dotted key path and the
line of the offending entry.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .fgo import SolverOptions, ValidationError
from .geometry import Pose
from .pipeline import PipelineOptions
from .simulator import (
    REFERENCE_ANCHORS,
    REFERENCE_GAUGE,
    ConfigError,
    Dropout,
    NlosConfig,
    NoiseConfig,
    SelfCalibrationConfig,
    SimConfig,
    TrajectoryConfig,
)
from .trilateration import AnchorMap

# initial anchor guess: the tape-measured layout with the usual placement slop
DEFAULT_INITIAL_ANCHORS = ((0.0, 0.0, 2.08), (0.12, 2.93, 0.98), (4.12, 0.0, 0.78), (4.32, 3.02, 0.30))


def default_gauge() -> AnchorMap:
    return AnchorMap([1, 2, 3, 4], np.array(DEFAULT_INITIAL_ANCHORS), np.array(REFERENCE_GAUGE))


@dataclass
class SolverSection:
    localization: SolverOptions = field(default_factory=SolverOptions)
    calibration: SolverOptions = field(default_factory=SolverOptions)


@dataclass
class RunConfig:
    simulation: SimConfig = field(default_factory=SimConfig)
    gauge: AnchorMap = field(default_factory=default_gauge)
    pipeline: PipelineOptions = field(default_factory=PipelineOptions)
    solver: SolverSection = field(default_factory=SolverSection)
    output: str = "out"

    def pipeline_options(self) -> PipelineOptions:
        """Pipeline options with the solver section folded in."""
        return dataclasses.replace(
            self.pipeline,
            localization_solver=self.solver.localization,
            calibration_solver=self.solver.calibration,
        )

    def to_dict(self) -> dict:
        return {
            "simulation": _sim_to_dict(self.simulation),
            "gauge": _anchors_to_list(self.gauge, with_mask=True),
            "pipeline": _plain(self.pipeline, skip=("localization_solver", "calibration_solver")),
            "solver": {
                "localization": _plain(self.solver.localization),
                "calibration": _plain(self.solver.calibration),
            },
            "output": self.output,
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form; identical configs hash identically."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# --- YAML with line numbers --------------------------------------------------


def _to_python(node, path: str, lines: dict):
    lines[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for knode, vnode in node.value:
            key = knode.value
            sub = f"{path}.{key}" if path else key
            if key in out:
                raise ConfigError(f"{sub}: duplicate key (line {knode.start_mark.line + 1})")
            out[key] = _to_python(vnode, sub, lines)
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_to_python(v, f"{path}[{i}]", lines) for i, v in enumerate(node.value)]
    return yaml.SafeLoader(str()).construct_object(node)


def _load_yaml(text: str) -> tuple[dict, dict]:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        raise ConfigError(f"not valid YAML: {exc}") from exc
    lines: dict[str, int] = {}
    if node is None:
        return {}, lines
    data = _to_python(node, "", lines)
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping")
    return data, lines


class _Reader:
    def __init__(self, lines: dict):
        self.lines = lines

    def fail(self, path: str, msg: str):
        line = self.lines.get(path)
        where = f" (line {line})" if line else ""
        raise ConfigError(f"{path}{where}: {msg}")

    def scalar(self, value, kind: str, path: str):
        optional = kind.endswith("| None")
        base = kind.split("|")[0].strip()
        if value is None:
            if optional:
                return None
            self.fail(path, "must not be empty")
        if base == "bool":
            if not isinstance(value, bool):
                self.fail(path, f"expected true/false, got {value!r}")
            return value
        if base == "int":
            if isinstance(value, bool) or not isinstance(value, int):
                self.fail(path, f"expected an integer, got {value!r}")
            return value
        if base == "float":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                self.fail(path, f"expected a number, got {value!r}")
            return float(value)
        if base == "str":
            if not isinstance(value, str):
                self.fail(path, f"expected a string, got {value!r}")
            return value
        if base == "list":
            if not isinstance(value, list):
                self.fail(path, f"expected a list, got {value!r}")
            return value
        raise AssertionError(f"unhandled field type {kind}")

    def dataclass(self, cls, data, path: str, skip=(), special=None):
        special = special or {}
        if data is None:
            data = {}
        if not isinstance(data, dict):
            self.fail(path, "expected a mapping")
        names = {f.name: f for f in dataclasses.fields(cls) if f.name not in skip}
        for key in data:
            if key not in names:
                sub = f"{path}.{key}" if path else key
                self.fail(sub, f"unknown key (allowed: {', '.join(sorted(names))})")
        kwargs = {}
        for name, f in names.items():
            if name not in data:
                continue
            sub = f"{path}.{name}" if path else name
            if name in special:
                kwargs[name] = special[name](data[name], sub)
            else:
                kwargs[name] = self.scalar(data[name], str(f.type), sub)
        try:
            return cls(**kwargs)
        except (ValueError, ValidationError) as exc:
            self.fail(path or "<root>", str(exc))

    def vector(self, value, n: int, path: str) -> list[float]:
        if not isinstance(value, list) or len(value) != n:
            self.fail(path, f"expected a list of {n} numbers")
        return [self.scalar(v, "float", f"{path}[{i}]") for i, v in enumerate(value)]

    def anchors(self, value, path: str, with_mask: bool) -> AnchorMap:
        if not isinstance(value, list) or not value:
            self.fail(path, "expected a non-empty list of anchors")
        ids, pos, fixed = [], [], []
        allowed = {"id", "position", "fixed"} if with_mask else {"id", "position"}
        for i, item in enumerate(value):
            sub = f"{path}[{i}]"
            if not isinstance(item, dict):
                self.fail(sub, "expected a mapping with id and position")
            for key in item:
                if key not in allowed:
                    self.fail(f"{sub}.{key}", f"unknown key (allowed: {', '.join(sorted(allowed))})")
            if "id" not in item or "position" not in item:
                self.fail(sub, "anchor needs id and position")
            ids.append(self.scalar(item["id"], "int", f"{sub}.id"))
            pos.append(self.vector(item["position"], 3, f"{sub}.position"))
            mask = item.get("fixed", [False, False, False])
            if not isinstance(mask, list) or len(mask) != 3:
                self.fail(f"{sub}.fixed", "expected three booleans for x, y, z")
            fixed.append([self.scalar(m, "bool", f"{sub}.fixed[{j}]") for j, m in enumerate(mask)])
        try:
            return AnchorMap(ids, np.array(pos), np.array(fixed))
        except ValueError as exc:
            self.fail(path, str(exc))


def _sim_from(r: _Reader, data, path: str) -> SimConfig:
    def dropouts(value, sub):
        if not isinstance(value, list):
            r.fail(sub, "expected a list")
        return [r.dataclass(Dropout, d, f"{sub}[{i}]") for i, d in enumerate(value)]

    def offset(value, sub):
        if value is None:
            return None
        v = r.vector(value, 7, sub)
        if abs(float(np.linalg.norm(v[3:])) - 1.0) > 1e-6:
            r.fail(sub, "quaternion part must have unit norm")
        return Pose.from_tum(v)

    special = {
        "anchors_truth": lambda v, sub: r.anchors(v, sub, with_mask=True),
        "trajectory": lambda v, sub: r.dataclass(TrajectoryConfig, v, sub),
        "noise": lambda v, sub: r.dataclass(NoiseConfig, v, sub),
        "nlos": lambda v, sub: r.dataclass(NlosConfig, v, sub),
        "dropouts": dropouts,
        "map_frame_offset": offset,
        "self_calibration": lambda v, sub: r.dataclass(SelfCalibrationConfig, v, sub),
    }
    sim = r.dataclass(SimConfig, data, path, special=special)
    try:
        sim.validate()
    except ConfigError as exc:
        r.fail(path, str(exc))
    return sim


def parse_config(text: str) -> RunConfig:
    data, lines = _load_yaml(text)
    r = _Reader(lines)
    special = {
        "simulation": lambda v, sub: _sim_from(r, v, sub),
        "gauge": lambda v, sub: r.anchors(v, sub, with_mask=True),
        "pipeline": lambda v, sub: r.dataclass(
            PipelineOptions, v, sub, skip=("localization_solver", "calibration_solver")
        ),
        "solver": lambda v, sub: r.dataclass(
            SolverSection, v, sub,
            special={
                "localization": lambda v2, s2: r.dataclass(SolverOptions, v2, s2),
                "calibration": lambda v2, s2: r.dataclass(SolverOptions, v2, s2),
            },
        ),
    }
    cfg = r.dataclass(RunConfig, data, "", special=special)
    if not cfg.gauge.fixed[:, :2].all(axis=1).any():
        r.fail("gauge", "one anchor needs x and y fixed (the origin)")
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


# --- serialization -----------------------------------------------------------


def _plain(obj, skip=()) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        if f.name in skip:
            continue
        v = getattr(obj, f.name)
        out[f.name] = [list(x) if isinstance(x, (list, tuple)) else x for x in v] if isinstance(v, list) else v
    return out


def _anchors_to_list(anchors: AnchorMap, with_mask: bool) -> list[dict]:
    out = []
    for aid, p, m in zip(anchors.ids, anchors.positions, anchors.fixed):
        item = {"id": int(aid), "position": [float(x) for x in p]}
        if with_mask:
            item["fixed"] = [bool(x) for x in m]
        out.append(item)
    return out


def _sim_to_dict(sim: SimConfig) -> dict:
    out = _plain(sim, skip=("anchors_truth", "trajectory", "noise", "nlos", "dropouts",
                            "map_frame_offset", "self_calibration"))
    out["anchors_truth"] = _anchors_to_list(sim.anchors_truth, with_mask=True)
    out["trajectory"] = _plain(sim.trajectory)
    out["noise"] = _plain(sim.noise)
    out["nlos"] = _plain(sim.nlos)
    out["dropouts"] = [_plain(d) for d in sim.dropouts]
    out["map_frame_offset"] = None if sim.map_frame_offset is None else list(sim.map_frame_offset.to_tum())
    out["self_calibration"] = _plain(sim.self_calibration)
    return out


__all__ = [
    "ConfigError",
    "REFERENCE_ANCHORS",
    "RunConfig",
    "SolverSection",
    "default_gauge",
    "load_config",
    "parse_config",
]
