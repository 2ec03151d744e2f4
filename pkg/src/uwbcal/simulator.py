"""Deterministic synthetic robot, LiDAR-odometry and UWB ranging data.

Randomness comes from numpy's PCG64 bit generator seeded through
``SeedSequence(seed).spawn``; every sensor channel gets its own stream, so
adding NLOS draws does not perturb the Gaussian range noise and vice versa.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .factors import OdometryPose, RangeMeasurement
from .geometry import Pose, Rotation3, between, compose, inverse, se3_exp
from .trilateration import AnchorMap

# channel order is part of the reproducibility contract
_CHANNELS = ("range", "nlos", "odometry", "self_calibration")

# anchor layout measured with a ranging finder (the reference column)
REFERENCE_ANCHORS = ((0.0, 0.0, 2.08), (0.0, 3.00, 0.98), (4.20, 0.0, 0.78), (4.20, 3.00, 0.30))
# anchor 1 at the origin, anchor 3 on the +x axis, heights known
REFERENCE_GAUGE = (
    (True, True, True),
    (False, False, True),
    (False, True, True),
    (False, False, True),
)


class ConfigError(ValueError):
    pass


def reference_anchor_map() -> AnchorMap:
    return AnchorMap([1, 2, 3, 4], np.array(REFERENCE_ANCHORS), np.array(REFERENCE_GAUGE))


@dataclass
class TrajectoryConfig:
    kind: str = "waypoints"  # "waypoints" | "lissajous"
    # rounded-rectangle sweep of a 4.2 m x 3.0 m room
    waypoints: list = field(
        default_factory=lambda: [[0.6, 0.6, 0.25], [3.6, 0.6, 0.25], [3.6, 2.4, 0.25], [0.6, 2.4, 0.25]]
    )
    speed: float = 0.5
    corner_radius: float = 0.4
    closed: bool = True
    # lissajous: center + amplitude * sin(2π f t + phase)
    center: list = field(default_factory=lambda: [2.1, 1.5, 0.25])
    amplitudes: list = field(default_factory=lambda: [1.5, 1.0, 0.0])
    frequencies: list = field(default_factory=lambda: [0.05, 0.1, 0.0])
    phases: list = field(default_factory=lambda: [0.0, 0.0, 0.0])


@dataclass
class NoiseConfig:
    sigma_range: float = 0.05
    odom_rot_noise: float = 0.001  # rad per step, per axis
    odom_trans_noise: float = 0.002  # m per step, per axis
    odom_drift_rate: float = 0.01  # translational scale bias, fraction per meter
    odom_yaw_drift: float = 0.001  # yaw bias, rad per meter


@dataclass
class NlosConfig:
    probability: float = 0.0
    bias_range: list = field(default_factory=lambda: [0.5, 2.0])


@dataclass
class Dropout:
    sensor: str  # "uwb" | "odom"
    start: float
    end: float

    def covers(self, t: float) -> bool:
        return self.start <= t <= self.end


@dataclass
class SelfCalibrationConfig:
    repeats: int = 5
    sigma: float = 0.1


@dataclass
class SimConfig:
    seed: int = 0
    duration: float = 30.0
    odom_rate: float = 10.0
    range_rate: float = 10.0
    anchors_truth: AnchorMap = field(default_factory=reference_anchor_map)
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    nlos: NlosConfig = field(default_factory=NlosConfig)
    dropouts: list = field(default_factory=list)
    # ground-truth T_um; None puts the map frame at the robot's first pose
    map_frame_offset: Pose | None = None
    self_calibration: SelfCalibrationConfig = field(default_factory=SelfCalibrationConfig)

    def validate(self):
        if not (self.odom_rate > 0 and self.range_rate > 0):
            raise ConfigError("rates must be positive")
        if not self.duration > 0:
            raise ConfigError("duration must be positive")
        n = self.noise
        for name in ("sigma_range", "odom_rot_noise", "odom_trans_noise", "odom_drift_rate"):
            if getattr(n, name) < 0:
                raise ConfigError(f"noise.{name} must be >= 0")
        if not 0.0 <= self.nlos.probability <= 1.0:
            raise ConfigError("nlos.probability must be in [0, 1]")
        if len(self.nlos.bias_range) != 2:
            raise ConfigError("nlos.bias_range must be [min, max]")
        lo, hi = self.nlos.bias_range
        if not 0 < lo <= hi:
            raise ConfigError("nlos.bias_range must satisfy 0 < min <= max")
        for d in self.dropouts:
            if d.sensor not in ("uwb", "odom"):
                raise ConfigError(f"unknown dropout sensor {d.sensor!r}")
            if not (0 <= d.start <= d.end <= self.duration):
                raise ConfigError(f"dropout [{d.start}, {d.end}] outside [0, {self.duration}]")
        t = self.trajectory
        for name in ("waypoints",):
            for w in getattr(t, name):
                if not (isinstance(w, (list, tuple)) and len(w) in (2, 3)
                        and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in w)):
                    raise ConfigError(f"trajectory.{name} entries must be [x, y] or [x, y, z] numbers")
        for name in ("center", "amplitudes", "frequencies", "phases"):
            v = getattr(t, name)
            if len(v) != 3 or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
                raise ConfigError(f"trajectory.{name} must be 3 numbers")
        if self.self_calibration.repeats < 1 or self.self_calibration.sigma < 0:
            raise ConfigError("self_calibration needs repeats >= 1 and sigma >= 0")
        if t.kind == "waypoints":
            if len(t.waypoints) < 2:
                raise ConfigError("trajectory needs at least 2 waypoints")
            if not t.speed > 0:
                raise ConfigError("trajectory speed must be positive")
        elif t.kind != "lissajous":
            raise ConfigError(f"unknown trajectory kind {t.kind!r}")


@dataclass
class SimDataset:
    ground_truth: list  # [(t, Pose)] in the UWB frame
    odometry: list  # [OdometryPose] in the map frame
    ranges: list  # [RangeMeasurement]
    truth_T_um: Pose
    truth_anchors: AnchorMap
    anchor_range_matrices: list = field(default_factory=list)
    duration: float = 0.0
    resampled_ranges: int = 0

    def ground_truth_at(self, t: float) -> Pose:
        ts = np.array([g[0] for g in self.ground_truth])
        i = int(np.argmin(np.abs(ts - t)))
        return self.ground_truth[i][1]


class WaypointPath:
    """Constant-speed path through waypoints with circular-arc corners (C¹)."""

    def __init__(self, waypoints, radius: float, closed: bool):
        P = np.asarray(waypoints, dtype=float)
        if P.shape[1] == 2:
            P = np.hstack([P, np.zeros((len(P), 1))])
        self.closed = closed
        n = len(P)
        corners = range(n) if closed else range(1, n - 1)
        # per corner: (entry point, exit point, arc) in the xy plane
        fillets = {}
        for i in corners:
            prev, cur, nxt = P[(i - 1) % n], P[i], P[(i + 1) % n]
            d1 = (cur - prev)[:2]
            d2 = (nxt - cur)[:2]
            l1, l2 = np.linalg.norm(d1), np.linalg.norm(d2)
            d1, d2 = d1 / l1, d2 / l2
            cross = d1[0] * d2[1] - d1[1] * d2[0]
            turn = math.atan2(cross, float(d1 @ d2))
            if abs(turn) < 1e-9 or radius <= 0:
                continue
            L = min(radius * math.tan(abs(turn) / 2), 0.5 * l1, 0.5 * l2)
            r = L / math.tan(abs(turn) / 2)
            entry = cur[:2] - L * d1
            left = np.array([-d1[1], d1[0]])
            center = entry + (r if turn > 0 else -r) * left
            a0 = math.atan2(entry[1] - center[1], entry[0] - center[0])
            fillets[i] = (entry, cur[:2] + L * d2, center, r, a0, turn)

        self.segments = []  # ("line", p0, p1, z0, z1) | ("arc", center, r, a0, turn, z)
        idx = list(range(n)) if closed else list(range(n - 1))
        for i in idx:
            j = (i + 1) % n
            start = fillets[i][1] if i in fillets else P[i, :2]
            end = fillets[j][0] if j in fillets else P[j, :2]
            self.segments.append(("line", start, end, P[i, 2], P[j, 2]))
            if j in fillets:
                _, _, c, r, a0, turn = fillets[j]
                self.segments.append(("arc", c, r, a0, turn, P[j, 2]))
        self.lengths = np.array([self._length(s) for s in self.segments])
        self.cum = np.concatenate(([0.0], np.cumsum(self.lengths)))
        self.total = float(self.cum[-1])

    @staticmethod
    def _length(seg) -> float:
        if seg[0] == "line":
            return float(np.linalg.norm(seg[2] - seg[1]))
        return abs(seg[2] * seg[4])

    def sample(self, s: float) -> tuple[np.ndarray, float]:
        """Position and heading at arc length ``s``."""
        if self.closed:
            s = s % self.total
        else:
            s = min(max(s, 0.0), self.total)
        k = int(np.searchsorted(self.cum, s, side="right") - 1)
        k = min(max(k, 0), len(self.segments) - 1)
        u = s - self.cum[k]
        seg = self.segments[k]
        if seg[0] == "line":
            _, p0, p1, z0, z1 = seg
            L = self.lengths[k]
            f = u / L if L > 0 else 0.0
            xy = p0 + f * (p1 - p0)
            d = p1 - p0
            return np.array([xy[0], xy[1], z0 + f * (z1 - z0)]), math.atan2(d[1], d[0])
        _, c, r, a0, turn, z = seg
        sgn = 1.0 if turn > 0 else -1.0
        a = a0 + sgn * u / r
        xy = c + r * np.array([math.cos(a), math.sin(a)])
        return np.array([xy[0], xy[1], z]), a + sgn * math.pi / 2


def trajectory_function(cfg: TrajectoryConfig):
    """Return ``t -> (position, yaw)``."""
    if cfg.kind == "waypoints":
        path = WaypointPath(cfg.waypoints, cfg.corner_radius, cfg.closed)
        return lambda t: path.sample(cfg.speed * t)
    c = np.asarray(cfg.center, dtype=float)
    A = np.asarray(cfg.amplitudes, dtype=float)
    w = 2 * math.pi * np.asarray(cfg.frequencies, dtype=float)
    ph = np.asarray(cfg.phases, dtype=float)

    def f(t):
        p = c + A * np.sin(w * t + ph)
        v = A * w * np.cos(w * t + ph)
        return p, math.atan2(v[1], v[0])

    return f


def _timestamps(rate: float, duration: float) -> np.ndarray:
    n = int(round(duration * rate))
    return np.arange(n) / rate


def simulate_anchor_range_matrices(anchors: AnchorMap, sigma: float, repeats: int,
                                   rng: np.random.Generator) -> list[np.ndarray]:
    P = anchors.positions
    D = np.linalg.norm(P[:, None] - P[None], axis=2)
    out = []
    iu = np.triu_indices(len(P), 1)
    for _ in range(repeats):
        M = np.zeros_like(D)
        M[iu] = np.abs(D[iu] + rng.normal(0.0, sigma, size=len(iu[0])))
        out.append(M + M.T)
    return out


def generate(config: SimConfig) -> SimDataset:
    config.validate()
    streams = np.random.SeedSequence(config.seed).spawn(len(_CHANNELS))
    rng = {name: np.random.Generator(np.random.PCG64(s)) for name, s in zip(_CHANNELS, streams)}
    traj = trajectory_function(config.trajectory)
    noise = config.noise

    t_odom = _timestamps(config.odom_rate, config.duration)
    gt = []
    for t in t_odom:
        p, yaw = traj(float(t))
        gt.append((float(t), Pose(Rotation3.about_z(yaw), p)))
    T_um = config.map_frame_offset if config.map_frame_offset is not None else gt[0][1]
    T_mu = inverse(T_um)

    odom = [OdometryPose(gt[0][0], compose(T_mu, gt[0][1]))]
    current = odom[0].pose
    g = rng["odometry"]
    exact = not any(
        (noise.odom_rot_noise, noise.odom_trans_noise, noise.odom_drift_rate, noise.odom_yaw_drift)
    )
    for k in range(1, len(gt)):
        if exact:
            odom.append(OdometryPose(gt[k][0], compose(T_mu, gt[k][1])))
            continue
        delta = between(gt[k - 1][1], gt[k][1])
        dist = float(np.linalg.norm(delta.translation))
        biased = Pose(delta.rotation, delta.translation * (1.0 + noise.odom_drift_rate))
        xi = np.concatenate(
            (g.normal(0.0, 1.0, 3) * noise.odom_rot_noise, g.normal(0.0, 1.0, 3) * noise.odom_trans_noise)
        )
        xi[2] += noise.odom_yaw_drift * dist
        if np.any(xi != 0.0):
            biased = compose(biased, se3_exp(xi))
        current = compose(current, biased)
        odom.append(OdometryPose(gt[k][0], current))

    t_range = _timestamps(config.range_rate, config.duration)
    anchors = config.anchors_truth
    ranges = []
    resampled = 0
    gr, gn = rng["range"], rng["nlos"]
    lo, hi = config.nlos.bias_range
    for t in t_range:
        p, _ = traj(float(t))
        for aid, a in zip(anchors.ids, anchors.positions):
            d = float(np.linalg.norm(a - p))
            while True:
                r = d + gr.normal(0.0, noise.sigma_range) if noise.sigma_range > 0 else d
                if r > 0:
                    break
                resampled += 1
            if config.nlos.probability > 0:
                if gn.random() < config.nlos.probability:
                    r += gn.uniform(lo, hi)
            ranges.append(RangeMeasurement(float(t), aid, r))

    sc = config.self_calibration
    mats = simulate_anchor_range_matrices(anchors, sc.sigma, sc.repeats, rng["self_calibration"])

    ds = SimDataset(gt, odom, ranges, T_um, anchors.copy(), mats, config.duration, resampled)
    return degrade(ds, config.dropouts)


def degrade(dataset: SimDataset, dropouts) -> SimDataset:
    """Remove odometry/range samples inside the given closed intervals."""
    dropouts = [d if isinstance(d, Dropout) else Dropout(*d) for d in dropouts]
    for d in dropouts:
        if d.sensor not in ("uwb", "odom"):
            raise ConfigError(f"unknown dropout sensor {d.sensor!r}")
        if not 0 <= d.start <= d.end <= dataset.duration:
            raise ConfigError(f"dropout [{d.start}, {d.end}] outside dataset duration")
    if not dropouts:
        return dataset
    uwb = [d for d in dropouts if d.sensor == "uwb"]
    odo = [d for d in dropouts if d.sensor == "odom"]
    ranges = [m for m in dataset.ranges if not any(d.covers(m.timestamp) for d in uwb)]
    odometry = [o for o in dataset.odometry if not any(d.covers(o.timestamp) for d in odo)]
    return replace(dataset, ranges=ranges, odometry=odometry)
