"""Trajectory alignment and error statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Pose, Rotation3
from .trilateration import AnchorMap

ASSOCIATION_GAP = 0.05


class DegenerateAlignment(ValueError):
    pass


class EmptyAssociation(ValueError):
    pass


class GaugeMismatch(ValueError):
    pass


def align_umeyama(estimated, reference, yaw_only: bool = False) -> Pose:
    """Rigid transform ``T`` (no scale) minimizing ``Σ‖ref_k − T est_k‖²``.

    With ``yaw_only`` the rotation is restricted to the z axis.
    """
    E = np.asarray(estimated, dtype=float).reshape(-1, 3)
    Rf = np.asarray(reference, dtype=float).reshape(-1, 3)
    if len(E) != len(Rf):
        raise ValueError("sequences differ in length")
    if len(E) < 3:
        raise ValueError("alignment needs at least 3 points")
    me, mr = E.mean(axis=0), Rf.mean(axis=0)
    Ec, Rc = E - me, Rf - mr
    if yaw_only:
        # a rotation about z only needs horizontal spread
        if float(np.abs(Rc[:, :2]).max()) <= 1e-9 or float(np.abs(Ec[:, :2]).max()) <= 1e-9:
            raise DegenerateAlignment("points have no horizontal spread")
    else:
        sv = np.linalg.svd(Rc, compute_uv=False)
        if sv[1] <= 1e-9 * max(1.0, sv[0]):
            raise DegenerateAlignment("reference points are collinear")
    if yaw_only:
        s = float(np.sum(Ec[:, 0] * Rc[:, 1] - Ec[:, 1] * Rc[:, 0]))
        c = float(np.sum(Ec[:, 0] * Rc[:, 0] + Ec[:, 1] * Rc[:, 1]))
        rot = Rotation3.about_z(math.atan2(s, c))
    else:
        C = Rc.T @ Ec / len(E)
        U, _, Vt = np.linalg.svd(C)
        S = np.eye(3)
        if np.linalg.det(U) * np.linalg.det(Vt) < 0:
            S[2, 2] = -1.0
        rot = Rotation3.from_matrix(U @ S @ Vt)
    return Pose(rot, mr - rot.matrix @ me)


@dataclass
class TrajectoryErrorReport:
    rmse: float
    max: float
    min: float
    errors: np.ndarray
    timestamps: np.ndarray
    alignment: Pose

    def as_dict(self) -> dict:
        return {"rmse": self.rmse, "max": self.max, "min": self.min, "pairs": len(self.errors)}


def associate_pairs(t_est, t_ref, max_gap: float = ASSOCIATION_GAP):
    """Nearest-timestamp pairs ``(i_est, i_ref)`` within ``max_gap``."""
    t_est = np.asarray(t_est, dtype=float)
    t_ref = np.asarray(t_ref, dtype=float)
    order = np.argsort(t_ref, kind="stable")
    ts = t_ref[order]
    pairs = []
    for i, t in enumerate(t_est):
        j = int(np.searchsorted(ts, t))
        cands = [k for k in (j - 1, j) if 0 <= k < len(ts)]
        if not cands:
            continue
        k = min(cands, key=lambda k: abs(ts[k] - t))
        if abs(ts[k] - t) <= max_gap + 1e-12:
            pairs.append((i, int(order[k])))
    return pairs


def trajectory_error(t_est, p_est, t_ref, p_ref, pre_align: bool = True,
                     max_gap: float = ASSOCIATION_GAP) -> TrajectoryErrorReport:
    """Absolute position error after optional rigid alignment of estimate onto reference."""
    p_est = np.asarray(p_est, dtype=float).reshape(-1, 3)
    p_ref = np.asarray(p_ref, dtype=float).reshape(-1, 3)
    pairs = associate_pairs(t_est, t_ref, max_gap)
    if not pairs:
        raise EmptyAssociation("no estimate/reference pairs within the association gap")
    ie = np.array([i for i, _ in pairs])
    ir = np.array([j for _, j in pairs])
    E, Rf = p_est[ie], p_ref[ir]
    T = align_umeyama(E, Rf) if pre_align else Pose.identity()
    aligned = E @ T.rotation.matrix.T + T.translation
    err = np.linalg.norm(aligned - Rf, axis=1)
    rmse = float(math.sqrt(float(np.mean(err**2))))
    return TrajectoryErrorReport(rmse, float(err.max()), float(err.min()), err,
                                 np.asarray(t_est, dtype=float)[ie], T)


@dataclass
class AnchorErrorReport:
    names: list[str]
    estimates: np.ndarray
    references: np.ndarray
    errors: np.ndarray
    rmse: float

    def as_dict(self) -> dict:
        return {n: float(e) for n, e in zip(self.names, self.errors)} | {"rmse": self.rmse}


def anchor_error(estimated: AnchorMap, reference: AnchorMap) -> AnchorErrorReport:
    """Per-free-coordinate absolute errors."""
    if list(estimated.ids) != list(reference.ids) or not np.array_equal(estimated.fixed, reference.fixed):
        raise GaugeMismatch("anchor maps differ in ids or gauge masks")
    free = estimated.free_scalars()
    names = [n for n, _, _ in free]
    est = np.array([estimated.positions[i, c] for _, i, c in free])
    ref = np.array([reference.positions[i, c] for _, i, c in free])
    err = np.abs(est - ref)
    rmse = float(math.sqrt(float(np.mean(err**2)))) if len(err) else 0.0
    return AnchorErrorReport(names, est, ref, err, rmse)
