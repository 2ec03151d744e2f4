"""Shared scenario builders and oracles for the test suite."""

from __future__ import annotations

import dataclasses

import numpy as np

from uwbcal import factors as F
from uwbcal.fgo import VariableKind, numeric_jacobian
from uwbcal.geometry import compose, random_pose, se3_exp
from uwbcal.metrics import trajectory_error
from uwbcal.pipeline import PipelineOptions, run_simultaneous
from uwbcal.simulator import REFERENCE_ANCHORS, REFERENCE_GAUGE, NoiseConfig, SimConfig, generate
from uwbcal.trilateration import AnchorMap, uwb_fix_stream

# initial anchor guess with placement errors of a few decimetres
INITIAL_ANCHORS = ((0.0, 0.0, 2.08), (0.12, 2.93, 0.98), (4.12, 0.0, 0.78), (4.32, 3.02, 0.30))
TAG_HEIGHT = 0.25

# profile used by the statistical runs: anchors fed back into the fixes, tag height known
RUN_OPTIONS = dict(feedback_anchors=True, tag_height=TAG_HEIGHT)


def initial_gauge() -> AnchorMap:
    return AnchorMap([1, 2, 3, 4], np.array(INITIAL_ANCHORS), np.array(REFERENCE_GAUGE))


def truth_map() -> AnchorMap:
    return AnchorMap([1, 2, 3, 4], np.array(REFERENCE_ANCHORS), np.array(REFERENCE_GAUGE))


def noise_free_config(seed: int = 0) -> SimConfig:
    cfg = SimConfig(seed=seed, noise=NoiseConfig(0.0, 0.0, 0.0, 0.0, 0.0))
    cfg.self_calibration.sigma = 0.0
    return cfg


def options(**kw) -> PipelineOptions:
    return PipelineOptions(**(RUN_OPTIONS | kw))


def gt_arrays(ds):
    return (np.array([t for t, _ in ds.ground_truth]),
            np.array([p.translation for _, p in ds.ground_truth]))


def fused_rmse(res, ds) -> float:
    t, p = gt_arrays(ds)
    L = res.localization
    return trajectory_error(L.timestamps, L.positions(), t, p).rmse


def uwb_only_rmse(res, ds, tag_height=TAG_HEIGHT) -> float:
    """Fixes from the run's starting anchors, never refined."""
    t, p = gt_arrays(ds)
    fixes = uwb_fix_stream(ds.ranges, res.initial_anchors, tag_height=tag_height)
    return trajectory_error([f.timestamp for f in fixes], [f.position for f in fixes], t, p).rmse


def trace_at(trace, n: int) -> np.ndarray:
    """Free anchor scalars after at most ``n`` ranges (first solve if none earlier)."""
    best = trace[0][1]
    for k, v in trace:
        if k <= n:
            best = v
    return best


def run_seed(seed: int, nlos: float = 0.0, dropouts=(), **kw):
    cfg = SimConfig(seed=seed)
    cfg.nlos.probability = nlos
    cfg.dropouts = list(dropouts)
    ds = generate(cfg)
    return ds, run_simultaneous(ds, initial_gauge(), options(**kw))


def window_rmse(res, ds, t0: float, t1: float) -> float:
    """Online estimates in ``[t0, t1]`` rigidly aligned to ground truth over that window."""
    L = res.localization
    t_gt, p_gt = gt_arrays(ds)
    sel = (L.timestamps >= t0) & (L.timestamps <= t1)
    return trajectory_error(L.timestamps[sel], L.online_positions()[sel], t_gt, p_gt).rmse


# --- Jacobian cases, one generator per factor type ---------------------------

FACTOR_TYPES = ("relative_pose", "uwb_position", "frame_transform", "range")


def jacobian_case(kind: str, rng: np.random.Generator):
    """``(residual_fn, values, kinds, analytic Jacobians)`` at a random point."""
    P, Q = VariableKind.POSE_SE3, VariableKind.POINT3
    if kind == "relative_pose":
        a, b = random_pose(rng, 2.5, 3.0), random_pose(rng, 2.5, 3.0)
        mk = random_pose(rng, 2.5, 3.0)
        mk1 = compose(mk, se3_exp(rng.normal(size=6) * 0.3))
        fn = lambda x, y: F.relative_pose_residual(x, y, mk, mk1)  # noqa: E731
        return fn, [a, b], [P, P], F.relative_pose_jacobians(a, b, mk, mk1)
    if kind == "uwb_position":
        T = random_pose(rng, 3.0, 5.0)
        fix = F.UwbFix(0.0, rng.uniform(-5, 5, 3))
        return (lambda x: F.uwb_position_residual(x, fix)), [T], [P], [F.uwb_position_jacobian(T)]
    if kind == "frame_transform":
        T = random_pose(rng, 3.0, 5.0)
        fix = F.UwbFix(0.0, rng.uniform(-5, 5, 3))
        q = rng.uniform(-5, 5, 3)
        return (lambda x: F.frame_transform_residual(x, fix, q)), [T], [P], [F.frame_transform_jacobian(T, q)]
    if kind == "range":
        X = rng.uniform(-5, 5, 3)
        q = rng.uniform(-5, 5, 3)
        m = F.RangeMeasurement(0.0, 1, float(rng.uniform(0.5, 8.0)))
        fn = lambda x: np.array([F.range_residual(x, q, m)])  # noqa: E731
        return fn, [X], [Q], [F.range_jacobian(X, q)]
    raise ValueError(kind)


def relative_error(A, B) -> float:
    A, B = np.asarray(A, dtype=float), np.asarray(B, dtype=float)
    return float(np.linalg.norm(A - B) / max(np.linalg.norm(B), 1e-12))


def jacobian_errors(kind: str, n: int = 100, seed: int = 0, step: float = 1e-6) -> tuple[float, float]:
    """Worst analytic-vs-numeric and step-vs-half-step relative errors over ``n`` points."""
    rng = np.random.default_rng(seed)
    worst_analytic = worst_half = 0.0
    for _ in range(n):
        fn, vals, kinds, analytic = jacobian_case(kind, rng)
        for j in range(len(vals)):
            full = numeric_jacobian(fn, vals, kinds, j, step)
            half = numeric_jacobian(fn, vals, kinds, j, step / 2)
            worst_analytic = max(worst_analytic, relative_error(analytic[j], half))
            worst_half = max(worst_half, relative_error(full, half))
    return worst_analytic, worst_half


def with_options(opts: PipelineOptions, **kw) -> PipelineOptions:
    return dataclasses.replace(opts, **kw)

