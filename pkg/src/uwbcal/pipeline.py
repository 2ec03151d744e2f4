"""The two graphs: robot localization / data fusion and UWB anchor calibration.

Measurements are consumed in timestamp order. The localization graph
re-solves every ``resolve_every`` odometry poses; the calibration graph
re-solves every ``recalib_every`` ranges once the map-to-UWB transform has
settled, and always reads the latest fused positions.
"""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import factors as F
from .fgo import Loss, Problem, SolverOptions, SolverReport, solve
from .geometry import Pose, between, compose, pose_distance
from .metrics import align_umeyama
from .trilateration import AnchorMap, FixStream, self_calibrate_anchors

log = logging.getLogger(__name__)


class InitializationStarved(RuntimeError):
    """Too few UWB/odometry correspondences to initialize ``T_um``.

    ``partial`` holds the odometry-only result.
    """

    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = partial


class PipelineError(RuntimeError):
    pass


@dataclass
class PipelineOptions:
    resolve_every: int = 10
    init_pairs: int = 20
    max_window_poses: int | None = None
    recalib_every: int = 100
    stable_translation: float = 0.05
    stable_rotation_deg: float = 1.0
    stable_solves: int = 3
    feedback_anchors: bool = False
    gravity_aligned: bool = True
    fix_window: float = 0.1
    tag_height: float | None = None
    association_gap: float = F.ASSOCIATION_GAP
    uwb_huber: float = 0.1
    range_huber: float = 0.5
    range_loss: str = "huber"  # "huber" | "identity"
    # odometry increments are far more precise than single UWB fixes
    weight_odometry: float = 1000.0
    weight_uwb: float = 1.0
    weight_transform: float = 1.0
    weight_range: float = 1.0
    # "auto": self-calibration when inter-anchor ranges are available, else the given map
    initial_anchors: str = "auto"  # "auto" | "config" | "self_calibration"
    localization_solver: SolverOptions = field(default_factory=SolverOptions)
    calibration_solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if self.resolve_every < 1 or self.recalib_every < 1 or self.init_pairs < 3:
            raise ValueError("cadences must be >= 1 and init_pairs >= 3")
        for name in ("weight_odometry", "weight_uwb", "weight_transform", "weight_range",
                     "uwb_huber", "range_huber", "fix_window", "stable_translation", "stable_rotation_deg"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.association_gap < 0 or self.stable_solves < 2:
            raise ValueError("association_gap must be >= 0 and stable_solves >= 2")
        if self.max_window_poses is not None and self.max_window_poses < 2:
            raise ValueError("max_window_poses must be >= 2")
        if self.range_loss not in ("huber", "identity"):
            raise ValueError(f"unknown range loss {self.range_loss!r}")
        if self.initial_anchors not in ("auto", "config", "self_calibration"):
            raise ValueError(f"unknown initial anchor source {self.initial_anchors!r}")

    def range_loss_fn(self) -> Loss:
        return Loss.huber(self.range_huber) if self.range_loss == "huber" else Loss.identity()


# --- localization / fusion graph ---------------------------------------------


class LocalizationGraph:
    """Global poses of the robot and the map-to-UWB transform."""

    def __init__(self, options: PipelineOptions):
        self.options = options
        self.odometry: list[F.OdometryPose] = []
        self.fixes: list[F.UwbFix] = []
        self.estimates: list[Pose] = []
        self.online: list[Pose] = []
        self.T_um = Pose.identity()
        self.initialized = False
        self.t_um_trace: list[tuple[float, Pose]] = []
        self.reports: list[SolverReport] = []
        self.diagnostics = F.Diagnostics()
        self._since_solve = 0

    @property
    def timestamps(self) -> np.ndarray:
        return np.fromiter((o.timestamp for o in self.odometry), float, len(self.odometry))

    def add_odometry(self, odom: F.OdometryPose) -> bool:
        """Append a pose; returns True when a re-solve is due."""
        if self.odometry and odom.timestamp <= self.odometry[-1].timestamp:
            raise PipelineError(f"odometry timestamps must increase (t={odom.timestamp})")
        if self.estimates and self.initialized:
            prev = self.odometry[-1].pose
            pred = compose(self.estimates[-1], between(prev, odom.pose))
        else:
            pred = compose(self.T_um, odom.pose)
        self.odometry.append(odom)
        self.estimates.append(pred)
        self.online.append(pred)
        self._since_solve += 1
        return self._since_solve >= self.options.resolve_every

    def add_fix(self, fix: F.UwbFix):
        self.fixes.append(fix)

    def _pairs(self):
        t_fix = np.array([f.timestamp for f in self.fixes], dtype=float)
        ks = F.associate_many(self.timestamps, t_fix, self.options.association_gap)
        pairs = [(int(k), fix) for k, fix in zip(ks, self.fixes) if k >= 0]
        self.diagnostics.dropped_fixes = len(self.fixes) - len(pairs)
        return pairs

    def _initialize(self, pairs) -> bool:
        if len(pairs) < self.options.init_pairs:
            return False
        for subset in (pairs[: self.options.init_pairs], pairs):
            src = np.array([self.odometry[k].pose.translation for k, _ in subset])
            dst = np.array([f.position for _, f in subset])
            try:
                self.T_um = align_umeyama(src, dst, yaw_only=self.options.gravity_aligned)
                break
            except ValueError:
                continue
        else:
            # straight-line start: wait for more geometry
            return False
        self.estimates = [compose(self.T_um, o.pose) for o in self.odometry]
        self.initialized = True
        return True

    def solve(self) -> SolverReport | None:
        self._since_solve = 0
        if len(self.odometry) < 2:
            return None
        pairs = self._pairs()
        if not self.initialized and not self._initialize(pairs):
            return None
        opt = self.options
        n = len(self.odometry)
        first_free = 0 if opt.max_window_poses is None else max(0, n - opt.max_window_poses)

        prob = Problem()
        vids = [prob.add_pose(self.estimates[k], k < first_free) for k in range(n)]
        um_mask = [True, True, False, False, False, False] if opt.gravity_aligned else None
        um = prob.add_pose(self.T_um, um_mask, name="T_um")
        huber = Loss.huber(opt.uwb_huber)
        # no factor into the frozen part: a stiff link to a stale pose would
        # drag the whole window with it
        ks = np.arange(first_free + 1, n)
        if len(ks):
            prob.add_residual_group(F.relative_pose_group(
                [vids[k] for k in ks], [vids[k - 1] for k in ks],
                [self.odometry[k].pose for k in ks], [self.odometry[k - 1].pose for k in ks],
                opt.weight_odometry,
            ))
        windowed = [(k, fix) for k, fix in pairs if k >= first_free]
        if windowed:
            prob.add_residual_group(F.uwb_position_group(
                [vids[k] for k, _ in windowed], [f for _, f in windowed], opt.weight_uwb, huber,
            ))
        if pairs:
            prob.add_residual_group(F.frame_transform_group(
                um, [f for _, f in pairs], [self.odometry[k].pose.translation for k, _ in pairs],
                opt.weight_transform, huber,
            ))
        report = solve(prob, opt.localization_solver)
        self.reports.append(report)
        self.estimates = [prob.value(v) for v in vids]
        self.T_um = prob.value(um)
        self.t_um_trace.append((self.odometry[-1].timestamp, self.T_um))
        return report

    def is_stable(self) -> bool:
        opt = self.options
        if len(self.t_um_trace) < opt.stable_solves:
            return False
        recent = [T for _, T in self.t_um_trace[-opt.stable_solves:]]
        for a, b in zip(recent, recent[1:]):
            rot, trans = pose_distance(a, b)
            if trans >= opt.stable_translation or math.degrees(rot) >= opt.stable_rotation_deg:
                return False
        return True

    def positions(self) -> tuple[np.ndarray, np.ndarray]:
        return self.timestamps, np.array([e.translation for e in self.estimates]).reshape(-1, 3)


@dataclass
class LocalizationResult:
    timestamps: np.ndarray
    trajectory: list  # final batch estimate per odometry pose
    online: list  # estimate each pose had when it was first emitted
    t_um: Pose
    t_um_trace: list
    reports: list
    initialized: bool
    diagnostics: F.Diagnostics

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.trajectory]).reshape(-1, 3)

    def online_positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.online]).reshape(-1, 3)


def _localization_result(g: LocalizationGraph) -> LocalizationResult:
    return LocalizationResult(
        g.timestamps, list(g.estimates), list(g.online), g.T_um, list(g.t_um_trace),
        list(g.reports), g.initialized, g.diagnostics,
    )


def run_localization(odometry, fixes, options: PipelineOptions | None = None) -> LocalizationResult:
    """Fusion graph alone over an odometry stream and a UWB fix stream."""
    options = options or PipelineOptions()
    odometry = list(odometry)
    if len(odometry) < 2:
        raise PipelineError("need at least 2 odometry poses")
    g = LocalizationGraph(options)
    events = heapq.merge(
        ((o.timestamp, 0, i) for i, o in enumerate(odometry)),
        ((f.timestamp, 1, i) for i, f in enumerate(fixes)),
    )
    fixes = list(fixes)
    for _, kind, i in events:
        if kind == 0:
            if g.add_odometry(odometry[i]):
                g.solve()
        else:
            g.add_fix(fixes[i])
    g.solve()
    result = _localization_result(g)
    if not g.initialized:
        raise InitializationStarved(
            f"only {len(g._pairs())} UWB/odometry correspondences, need {options.init_pairs}", result
        )
    return result


# --- anchor calibration graph ------------------------------------------------


class CalibrationGraph:
    def __init__(self, anchors: AnchorMap, options: PipelineOptions):
        if not any(anchors.fixed[i, :2].all() for i in range(len(anchors))):
            raise ValueError("gauge needs an anchor with fixed x and y as the origin")
        self.options = options
        self.initial = anchors.copy()
        self.anchors = anchors.copy()
        self.ranges: list[F.RangeMeasurement] = []
        self.trace: list[tuple[int, np.ndarray]] = [(0, self.anchors.free_values())]
        self.reports: list[SolverReport] = []
        self.unobserved: list[int] = []
        self.diagnostics = F.Diagnostics()
        self._since_solve = 0

    @property
    def names(self) -> list[str]:
        return [n for n, _, _ in self.anchors.free_scalars()]

    def add_range(self, m: F.RangeMeasurement) -> bool:
        self.ranges.append(m)
        self._since_solve += 1
        return self._since_solve >= self.options.recalib_every

    def solve(self, t_pos: np.ndarray, positions: np.ndarray) -> SolverReport | None:
        self._since_solve = 0
        opt = self.options
        prob = Problem()
        vids = {}
        for i, aid in enumerate(self.anchors.ids):
            vids[aid] = prob.add_point(self.anchors.positions[i], self.anchors.fixed[i], name=f"anchor{aid}")
        loss = opt.range_loss_fn()
        known = [m for m in self.ranges if m.anchor_id in vids]
        t_r = np.array([m.timestamp for m in known], dtype=float)
        k = F.associate_many(t_pos, t_r, opt.association_gap)
        keep = np.flatnonzero(k >= 0)
        dropped = len(self.ranges) - len(keep)
        aid = np.array([known[i].anchor_id for i in keep], dtype=np.int64)
        if len(keep):
            prob.add_residual_group(F.range_group(
                [vids[a] for a in aid], positions[k[keep]], [known[i].range for i in keep],
                opt.weight_range, loss, self.diagnostics,
            ))
        counts = {a: int(np.sum(aid == a)) for a in self.anchors.ids}
        self.diagnostics.dropped_ranges = dropped
        self.unobserved = [a for a, c in counts.items() if c == 0 and not self.anchors.fixed[self.anchors.index(a)].all()]
        for a in self.unobserved:
            prob.set_fixed(vids[a], True)
        if all(v.fixed_mask.all() for v in prob.variables):
            self.trace.append((len(self.ranges), self.anchors.free_values()))
            return None
        report = solve(prob, opt.calibration_solver)
        self.reports.append(report)
        self.anchors = self.anchors.with_positions(np.array([prob.value(vids[a]) for a in self.anchors.ids]))
        self.trace.append((len(self.ranges), self.anchors.free_values()))
        return report


@dataclass
class CalibrationResult:
    anchors: AnchorMap
    names: list[str]
    trace: list  # [(n_ranges, free scalar values)]
    reports: list
    unobserved: list[int]
    diagnostics: F.Diagnostics


def _calibration_result(c: CalibrationGraph) -> CalibrationResult:
    return CalibrationResult(c.anchors.copy(), c.names, list(c.trace), list(c.reports),
                             list(c.unobserved), c.diagnostics)


def run_calibration(positions, ranges, gauge: AnchorMap, options: PipelineOptions | None = None) -> CalibrationResult:
    """Calibration graph alone, with known robot positions ``[(t, xyz)]``."""
    options = options or PipelineOptions()
    positions = list(positions)
    t_pos = np.array([t for t, _ in positions], dtype=float)
    p_pos = np.array([p for _, p in positions], dtype=float).reshape(-1, 3)
    c = CalibrationGraph(gauge, options)
    ranges = sorted(ranges, key=lambda m: m.timestamp)
    for m in ranges:
        if c.add_range(m):
            c.solve(t_pos, p_pos)
    if c._since_solve or not c.reports:
        c.solve(t_pos, p_pos)
    return _calibration_result(c)


# --- both graphs together ----------------------------------------------------


@dataclass
class RunResult:
    localization: LocalizationResult
    calibration: CalibrationResult
    fixes: list  # UWB-only trajectory
    initial_anchors: AnchorMap
    calibration_started_at: float | None

    @property
    def trajectory(self):
        return self.localization.trajectory

    @property
    def anchors(self) -> AnchorMap:
        return self.calibration.anchors


def initial_anchor_map(gauge: AnchorMap, options: PipelineOptions, range_matrices=None) -> AnchorMap:
    mode = options.initial_anchors
    if mode == "auto":
        mode = "self_calibration" if range_matrices is not None and len(range_matrices) else "config"
    if mode == "self_calibration":
        if range_matrices is None or not len(range_matrices):
            raise PipelineError("self-calibration requested but no inter-anchor ranges available")
        return self_calibrate_anchors(range_matrices, gauge, gauge.positions[:, 2])
    return gauge.copy()


def run_simultaneous(dataset, gauge: AnchorMap, options: PipelineOptions | None = None) -> RunResult:
    """Localize the robot and calibrate the anchors from one time-ordered pass."""
    options = options or PipelineOptions()
    anchors0 = initial_anchor_map(gauge, options, getattr(dataset, "anchor_range_matrices", None))
    loc = LocalizationGraph(options)
    cal = CalibrationGraph(anchors0, options)
    fixer = FixStream(anchors0.copy(), options.fix_window, options.tag_height)
    fixes: list[F.UwbFix] = []
    epochs: list[list[F.RangeMeasurement]] = []
    epoch: list[F.RangeMeasurement] = []
    started_at = None

    def close_epoch():
        nonlocal epoch
        if epoch:
            epochs.append(epoch)
            fix = fixer.fix_epoch(epoch)
            if fix is not None:
                fixes.append(fix)
                loc.add_fix(fix)
        epoch = []

    def refix():
        # re-derive every buffered fix from the latest anchors so that the
        # whole trajectory, not only its tail, moves to the updated frame
        nonlocal fixer
        fixer = FixStream(cal.anchors.copy(), options.fix_window, options.tag_height)
        fixes[:] = [f for f in (fixer.fix_epoch(e) for e in epochs) if f is not None]
        loc.fixes = list(fixes)

    def maybe_calibrate(t: float, force: bool = False):
        nonlocal started_at
        if started_at is None:
            if not (loc.initialized and loc.is_stable()):
                return
            started_at = t
            log.info("calibration starts at t=%.2f s", t)
        t_pos, p_pos = loc.positions()
        cal.solve(t_pos, p_pos)
        if options.feedback_anchors:
            refix()

    odometry = dataset.odometry
    ranges = dataset.ranges
    events = heapq.merge(
        ((o.timestamp, 0, i) for i, o in enumerate(odometry)),
        ((m.timestamp, 1, i) for i, m in enumerate(ranges)),
    )
    try:
        for t, kind, i in events:
            if kind == 0:
                if loc.add_odometry(odometry[i]):
                    loc.solve()
                continue
            m = ranges[i]
            if epoch and m.timestamp >= epoch[0].timestamp + options.fix_window - 1e-9:
                close_epoch()
            epoch.append(m)
            if cal.add_range(m):
                maybe_calibrate(t)
        close_epoch()
        loc.solve()
        if started_at is None and loc.initialized:
            # short runs: calibrate on whatever was collected
            started_at = odometry[-1].timestamp if odometry else 0.0
        if started_at is not None and (cal._since_solve or not cal.reports):
            maybe_calibrate(odometry[-1].timestamp if odometry else 0.0)
    except Exception as exc:
        raise PipelineError(f"pipeline failed near t={t:.3f}s: {exc}") from exc

    return RunResult(_localization_result(loc), _calibration_result(cal), fixes, anchors0, started_at)
