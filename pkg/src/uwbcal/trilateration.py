"""UWB-only positioning: tag trilateration and anchor self-calibration."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .factors import RangeMeasurement, UwbFix

log = logging.getLogger(__name__)

COORDS = "xyz"


class InsufficientRanges(ValueError):
    pass


class NoConvergence(RuntimeError):
    pass


class InconsistentRanges(ValueError):
    pass


@dataclass
class AnchorMap:
    """Anchor positions in the UWB frame plus per-coordinate gauge masks."""

    ids: list[int]
    positions: np.ndarray  # (N, 3)
    fixed: np.ndarray  # (N, 3) bool

    def __post_init__(self):
        self.ids = [int(i) for i in self.ids]
        self.positions = np.array(self.positions, dtype=float).reshape(-1, 3)
        if self.fixed is None:
            self.fixed = np.zeros_like(self.positions, dtype=bool)
        self.fixed = np.array(self.fixed, dtype=bool).reshape(-1, 3)
        if len(set(self.ids)) != len(self.ids):
            raise ValueError(f"duplicate anchor ids in {self.ids}")
        if not (len(self.ids) == len(self.positions) == len(self.fixed)):
            raise ValueError("anchor ids, positions and masks differ in length")

    def __len__(self):
        return len(self.ids)

    def index(self, anchor_id: int) -> int:
        return self.ids.index(int(anchor_id))

    def position(self, anchor_id: int) -> np.ndarray:
        return self.positions[self.index(anchor_id)]

    def copy(self) -> AnchorMap:
        return AnchorMap(list(self.ids), self.positions.copy(), self.fixed.copy())

    def with_positions(self, positions) -> AnchorMap:
        """Same ids and masks; fixed coordinates keep their current values."""
        new = np.array(positions, dtype=float).reshape(self.positions.shape)
        new[self.fixed] = self.positions[self.fixed]
        return AnchorMap(list(self.ids), new, self.fixed.copy())

    def free_scalars(self) -> list[tuple[str, int, int]]:
        """``(name, anchor index, coordinate)`` for every free coordinate, e.g. ``("x2", 1, 0)``."""
        out = []
        for i, aid in enumerate(self.ids):
            for c in range(3):
                if not self.fixed[i, c]:
                    out.append((f"{COORDS[c]}{aid}", i, c))
        return out

    def free_values(self) -> np.ndarray:
        return np.array([self.positions[i, c] for _, i, c in self.free_scalars()])


def _cost(anchor_pos: np.ndarray, ranges: np.ndarray, x: np.ndarray) -> float:
    r = np.linalg.norm(x - anchor_pos, axis=1) - ranges
    return float(r @ r)


def _gauss_newton(anchor_pos: np.ndarray, ranges: np.ndarray, x0: np.ndarray, free: np.ndarray,
                  max_iter: int = 50, tol: float = 1e-12) -> np.ndarray:
    """Gauss-Newton with step halving.

    A full step that raises the cost counts as an increase; five in a row
    raise ``NoConvergence``.
    """
    x = x0.copy()
    cost = _cost(anchor_pos, ranges, x)
    increases = 0
    for _ in range(max_iter):
        d = x - anchor_pos
        n = np.linalg.norm(d, axis=1)
        n = np.where(n < 1e-12, 1e-12, n)
        r = n - ranges
        J = (d / n[:, None])[:, free]
        step, *_ = np.linalg.lstsq(J, -r, rcond=None)
        if float(np.linalg.norm(step)) < tol * (1.0 + float(np.linalg.norm(x))):
            trial = x.copy()
            trial[free] += step
            return trial
        trial = x.copy()
        trial[free] += step
        c = _cost(anchor_pos, ranges, trial)
        # increases at rounding level are not divergence
        if not c <= cost * (1.0 + 1e-10):
            increases += 1
            if increases >= 5:
                raise NoConvergence("trilateration cost increased 5 consecutive steps")
            for _ in range(20):
                step = step * 0.5
                trial = x.copy()
                trial[free] += step
                c = _cost(anchor_pos, ranges, trial)
                if c <= cost:
                    break
            else:
                # no descent along the Gauss-Newton direction: at a minimum
                return x
        else:
            increases = 0
        if not c <= cost:
            # rounding-level bump: treat as converged
            return x
        x, cost = trial, c
    return x


def trilaterate_tag(ranges: Sequence[tuple[int, float]], anchors: AnchorMap, initial_guess=None,
                    fixed_z: float | None = None) -> tuple[np.ndarray, float]:
    """Least-squares tag position from ``(anchor_id, range)`` pairs.

    Returns the position and the RMS range residual. ``fixed_z`` pins the
    height and solves in the plane.
    """
    usable = [(a, r) for a, r in ranges if a in anchors.ids and r > 0 and math.isfinite(r)]
    if len({a for a, _ in usable}) < 3:
        raise InsufficientRanges(f"need ranges to >= 3 anchors, got {len(usable)}")
    P = np.array([anchors.position(a) for a, _ in usable])
    rr = np.array([r for _, r in usable], dtype=float)
    # collinear anchors cannot fix a position
    if np.linalg.matrix_rank(P[1:] - P[0], tol=1e-9) < 2:
        raise InsufficientRanges("anchors are collinear")
    free = np.ones(3, dtype=bool)
    if fixed_z is not None:
        free[2] = False
    if initial_guess is None:
        # the centroid sits on the anchors' best-fit plane, equidistant from a
        # solution and its mirror image; start on both sides and keep the better
        c = P.mean(axis=0)
        normal = np.linalg.svd(P - c)[2][-1]
        spread = float(np.linalg.norm(P - c, axis=1).max())
        starts = [c] if fixed_z is not None else [c + normal * 0.5 * spread, c - normal * 0.5 * spread]
    else:
        starts = [np.array(initial_guess, dtype=float).reshape(3)]
        if not np.all(np.isfinite(starts[0])):
            raise ValueError("initial guess must be finite")
    best = None
    for x0 in starts:
        x0 = x0.copy()
        if fixed_z is not None:
            x0[2] = fixed_z
        x = _gauss_newton(P, rr, x0, free)
        res = np.linalg.norm(x - P, axis=1) - rr
        rms = float(math.sqrt(float(res @ res) / len(res)))
        if best is None or rms < best[1]:
            best = (x, rms)
    return best


def _check_triangles(D: np.ndarray, slack: float):
    n = len(D)
    for i, j, k in itertools.permutations(range(n), 3):
        if D[i, j] > (D[i, k] + D[k, j]) * (1.0 + slack):
            raise InconsistentRanges(f"triangle inequality violated for anchors {i}, {j}, {k}")


def _planar(d: float, dz: float) -> float:
    s = d * d - dz * dz
    if s < 0.0:
        log.warning("range %.3f shorter than height difference %.3f; clipped", d, dz)
        s = 0.0
    return math.sqrt(s)


def _calibrate_once(D: np.ndarray, gauge: AnchorMap, heights: np.ndarray, slack: float) -> np.ndarray:
    n = len(gauge)
    if D.shape != (n, n):
        raise ValueError(f"range matrix must be {n}x{n}")
    if not np.allclose(D, D.T, rtol=0, atol=1e-9):
        raise InconsistentRanges("range matrix is not symmetric")
    off = ~np.eye(n, dtype=bool)
    if not np.all(D[off] > 0):
        raise InconsistentRanges("all inter-anchor ranges must be positive")
    _check_triangles(D, slack)

    fx = gauge.fixed
    origin = next((i for i in range(n) if fx[i, 0] and fx[i, 1]), None)
    if origin is None:
        raise ValueError("gauge needs an anchor with x and y fixed")
    axis = next((i for i in range(n) if i != origin and fx[i, 0] != fx[i, 1]), None)
    if axis is None:
        raise ValueError("gauge needs a second anchor with exactly one of x/y fixed")

    pos = np.zeros((n, 3))
    pos[:, 2] = heights
    o = gauge.positions[origin, :2]
    pos[origin, :2] = o
    dxy = np.array([[_planar(D[i, j], heights[i] - heights[j]) for j in range(n)] for i in range(n)])
    # axis anchor lies along +x (y fixed) or +y (x fixed) from the origin
    along = 0 if fx[axis, 1] else 1
    pos[axis, :2] = o
    pos[axis, along] = o[along] + dxy[origin, axis]

    placed = [origin, axis]
    for i in range(n):
        if i in placed:
            continue
        if len(placed) == 2:
            # two-circle intersection; the first free anchor takes the positive side
            a, b = pos[origin, :2], pos[axis, :2]
            base = float(np.linalg.norm(b - a))
            e = (b - a) / base
            perp = np.array([-e[1], e[0]])
            ra, rb = dxy[origin, i], dxy[axis, i]
            u = (ra * ra - rb * rb + base * base) / (2.0 * base)
            v = math.sqrt(max(0.0, ra * ra - u * u))
            pos[i, :2] = a + u * e + v * perp
        else:
            A = pos[placed, :2]
            r = dxy[placed, i]
            # linearize by subtracting the first circle, then refine
            M = 2.0 * (A[1:] - A[0])
            rhs = (r[0] ** 2 - r[1:] ** 2) + (A[1:] ** 2).sum(1) - (A[0] ** 2).sum()
            xy, *_ = np.linalg.lstsq(M, rhs, rcond=None)
            P3 = pos[placed]
            x0 = np.array([xy[0], xy[1], heights[i]])
            x = _gauss_newton(P3, D[placed, i], x0, np.array([True, True, False]))
            pos[i, :2] = x[:2]
        placed.append(i)

    # redundant ranges must agree with the solved layout
    for i, j in itertools.combinations(range(n), 2):
        d = float(np.linalg.norm(pos[i] - pos[j]))
        if abs(d - D[i, j]) > slack * D[i, j]:
            raise InconsistentRanges(
                f"range {gauge.ids[i]}-{gauge.ids[j]} = {D[i, j]:.3f} disagrees with layout ({d:.3f})"
            )
    return pos


def self_calibrate_anchors(inter_anchor_ranges, gauge: AnchorMap, known_heights,
                           slack: float = 0.05) -> AnchorMap:
    """Anchor layout from mutual anchor ranges and known heights.

    ``inter_anchor_ranges`` is one symmetric matrix or a list of them; the
    positions obtained from each are averaged. Row order follows
    ``gauge.ids``.
    """
    mats = np.asarray(inter_anchor_ranges, dtype=float)
    if mats.ndim == 2:
        mats = mats[None]
    heights = np.asarray(known_heights, dtype=float).reshape(len(gauge))
    sols = [_calibrate_once(D, gauge, heights, slack) for D in mats]
    pos = np.mean(sols, axis=0)
    return AnchorMap(list(gauge.ids), pos, gauge.fixed.copy())


@dataclass
class FixStream:
    """Groups ranges into epochs and trilaterates one fix per epoch.

    Epoch ``[t0, t0 + window)`` starts at the first range not yet consumed.
    Epochs with fewer than 3 distinct anchors are skipped and counted. A
    known ``tag_height`` pins the fix height.
    """

    anchors: AnchorMap
    window: float = 0.1
    tag_height: float | None = None
    previous: np.ndarray | None = None
    skipped_epochs: int = 0
    failed_epochs: int = 0
    rms: list[float] = field(default_factory=list)

    def fix_epoch(self, epoch: Sequence[RangeMeasurement]) -> UwbFix | None:
        by_anchor: dict[int, list[float]] = {}
        for m in epoch:
            by_anchor.setdefault(m.anchor_id, []).append(m.range)
        if len(by_anchor) < 3:
            self.skipped_epochs += 1
            return None
        pairs = [(a, float(np.mean(v))) for a, v in sorted(by_anchor.items())]
        try:
            pos, rms = trilaterate_tag(pairs, self.anchors, self.previous, self.tag_height)
        except (InsufficientRanges, NoConvergence):
            self.failed_epochs += 1
            return None
        self.previous = pos
        self.rms.append(rms)
        t = float(np.mean([m.timestamp for m in epoch]))
        return UwbFix(t, pos)

    def epochs(self, ranges: Iterable[RangeMeasurement]):
        current: list[RangeMeasurement] = []
        start = None
        for m in ranges:
            if start is not None and m.timestamp >= start + self.window - 1e-9:
                yield current
                current = []
                start = None
            if start is None:
                start = m.timestamp
            current.append(m)
        if current:
            yield current

    def process(self, ranges: Iterable[RangeMeasurement]) -> list[UwbFix]:
        out = []
        for epoch in self.epochs(ranges):
            fix = self.fix_epoch(epoch)
            if fix is not None:
                out.append(fix)
        return out


def uwb_fix_stream(ranges: Iterable[RangeMeasurement], anchors: AnchorMap, window: float = 0.1,
                   tag_height: float | None = None) -> list[UwbFix]:
    return FixStream(anchors, window, tag_height).process(ranges)


def load_range_matrix(path) -> np.ndarray:
    """Whitespace-separated square matrix, rows in anchor-id order."""
    D = np.loadtxt(path, dtype=float, ndmin=2)
    if D.shape[0] != D.shape[1]:
        raise ValueError(f"{path}: range matrix is {D.shape[0]}x{D.shape[1]}, expected square")
    if not np.all(np.isfinite(D)) or np.any(D < 0):
        raise ValueError(f"{path}: ranges must be finite and non-negative")
    return D
