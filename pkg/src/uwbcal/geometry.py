"""Rigid-body transforms on SO(3)/SE(3).

Rotations are stored as unit quaternions ``(w, x, y, z)``; rotation matrices
are built on demand and cached. Tangent vectors are ordered
``(omega, rho)``: rotation part first, translation part second.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

# Below this angle the exp/log/Jacobian series are used instead of the closed forms.
SMALL_ANGLE = 1e-6


class FrameId(enum.Enum):
    ROBOT = "R"
    LIDAR = "L"
    MAP = "M"
    UWB = "U"
    # the fixed UWB frame is the global frame
    GLOBAL = "U"


def skew(v) -> np.ndarray:
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]], dtype=float
    )


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _matrix_to_quat(R: np.ndarray) -> np.ndarray:
    # Shepperd's method: pick the largest diagonal term for stability
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return np.asarray(q, dtype=float)


@dataclass(frozen=True, eq=False)
class Rotation3:
    """Unit quaternion ``(w, x, y, z)``, renormalized on construction."""

    quat: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=float).reshape(4)
        n = math.sqrt(float(q @ q))
        if n == 0.0 or not math.isfinite(n):
            raise ValueError(f"invalid quaternion {q}")
        q = q / n
        q.setflags(write=False)
        object.__setattr__(self, "quat", q)

    @classmethod
    def identity(cls) -> Rotation3:
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_matrix(cls, R) -> Rotation3:
        return cls(_matrix_to_quat(np.asarray(R, dtype=float)))

    @classmethod
    def from_rotvec(cls, w) -> Rotation3:
        return cls(so3_exp_quat(np.asarray(w, dtype=float)))

    @classmethod
    def about_z(cls, angle: float) -> Rotation3:
        return cls(np.array([math.cos(angle / 2), 0.0, 0.0, math.sin(angle / 2)]))

    @cached_property
    def matrix(self) -> np.ndarray:
        R = _quat_to_matrix(self.quat)
        R.setflags(write=False)
        return R

    def __mul__(self, other: Rotation3) -> Rotation3:
        return Rotation3(_quat_mul(self.quat, other.quat))

    def inverse(self) -> Rotation3:
        w, x, y, z = self.quat
        return Rotation3(np.array([w, -x, -y, -z]))

    def apply(self, p) -> np.ndarray:
        return self.matrix @ np.asarray(p, dtype=float)

    def log(self) -> np.ndarray:
        return so3_log_quat(self.quat)

    def angle(self) -> float:
        return float(np.linalg.norm(self.log()))

    def yaw(self) -> float:
        R = self.matrix
        return math.atan2(R[1, 0], R[0, 0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Rotation3):
            return NotImplemented
        # q and -q are the same rotation
        return bool(abs(float(self.quat @ other.quat)) >= 1.0 - 1e-12)

    def __hash__(self):
        return hash(tuple(np.round(self.quat * np.sign(self.quat[np.argmax(np.abs(self.quat))]), 12)))

    def __repr__(self):
        return f"Rotation3(wxyz={np.array2string(self.quat, precision=6)})"


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``p -> R p + t``."""

    rotation: Rotation3 = field(default_factory=Rotation3.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = np.array(self.translation, dtype=float).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_matrix(cls, T) -> Pose:
        T = np.asarray(T, dtype=float)
        return cls(Rotation3.from_matrix(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_xyz_yaw(cls, x: float, y: float, z: float, yaw: float) -> Pose:
        return cls(Rotation3.about_z(yaw), np.array([x, y, z]))

    @classmethod
    def from_tum(cls, row) -> Pose:
        """From ``x y z qx qy qz qw``."""
        x, y, z, qx, qy, qz, qw = (float(v) for v in row)
        return cls(Rotation3(np.array([qw, qx, qy, qz])), np.array([x, y, z]))

    def to_tum(self) -> tuple[float, ...]:
        w, x, y, z = self.rotation.quat
        tx, ty, tz = self.translation
        return (float(tx), float(ty), float(tz), float(x), float(y), float(z), float(w))

    @property
    def R(self) -> np.ndarray:
        return self.rotation.matrix

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation.matrix
        T[:3, 3] = self.translation
        return T

    def __matmul__(self, other: Pose) -> Pose:
        return compose(self, other)

    def __repr__(self):
        return (
            f"Pose(t={np.array2string(self.translation, precision=6)}, "
            f"q={np.array2string(self.rotation.quat, precision=6)})"
        )


def compose(a: Pose, b: Pose) -> Pose:
    """Apply ``b`` first, then ``a``."""
    return Pose(a.rotation * b.rotation, a.rotation.matrix @ b.translation + a.translation)


def inverse(a: Pose) -> Pose:
    rinv = a.rotation.inverse()
    return Pose(rinv, -(rinv.matrix @ a.translation))


def between(a: Pose, b: Pose) -> Pose:
    """``inverse(a) ∘ b``, the motion from ``a`` to ``b`` expressed in ``a``."""
    Rt = a.rotation.matrix.T
    return Pose(a.rotation.inverse() * b.rotation, Rt @ (b.translation - a.translation))


def transform_point(a: Pose, p) -> np.ndarray:
    return a.rotation.matrix @ np.asarray(p, dtype=float) + a.translation


def pose_distance(a: Pose, b: Pose) -> tuple[float, float]:
    """(rotation angle, translation norm) of ``inverse(a) ∘ b``."""
    d = between(a, b)
    return d.rotation.angle(), float(np.linalg.norm(b.translation - a.translation))


def so3_exp_quat(w: np.ndarray) -> np.ndarray:
    theta = math.sqrt(float(w @ w))
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return np.concatenate(([1.0 - t2 / 8.0], w * (0.5 - t2 / 48.0)))
    half = 0.5 * theta
    return np.concatenate(([math.cos(half)], w * (math.sin(half) / theta)))


def so3_log_quat(q: np.ndarray) -> np.ndarray:
    w, v = q[0], q[1:]
    if w < 0.0:
        w, v = -w, -v
    n = math.sqrt(float(v @ v))
    if n < 1e-12:
        # theta ≈ 2n, first-order series of 2 atan2(n, w) / n
        return v * (2.0 / w)
    theta = 2.0 * math.atan2(n, w)
    return v * (theta / n)


def _so3_coeffs(theta: float) -> tuple[float, float]:
    """A = (1 - cos θ)/θ², B = (θ - sin θ)/θ³."""
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    t2 = theta * theta
    return (1.0 - math.cos(theta)) / t2, (theta - math.sin(theta)) / (t2 * theta)


def so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = math.sqrt(float(w @ w))
    A, B = _so3_coeffs(theta)
    W = skew(w)
    return np.eye(3) + A * W + B * (W @ W)


def so3_left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    theta = math.sqrt(float(w @ w))
    W = skew(w)
    if theta < SMALL_ANGLE:
        c = 1.0 / 12.0 + theta * theta / 720.0
    else:
        c = (1.0 - theta * math.sin(theta) / (2.0 * (1.0 - math.cos(theta)))) / (theta * theta)
    return np.eye(3) - 0.5 * W + c * (W @ W)


def se3_exp(v) -> Pose:
    v = np.asarray(v, dtype=float).reshape(6)
    w, rho = v[:3], v[3:]
    return Pose(Rotation3(so3_exp_quat(w)), so3_left_jacobian(w) @ rho)


def se3_log(a: Pose) -> np.ndarray:
    w = a.rotation.log()
    rho = so3_left_jacobian_inv(w) @ a.translation
    return np.concatenate((w, rho))


def adjoint(a: Pose) -> np.ndarray:
    """6x6 adjoint for ``(omega, rho)`` tangents: ``a exp(x) a⁻¹ = exp(Ad x)``."""
    R = a.rotation.matrix
    Ad = np.zeros((6, 6))
    Ad[:3, :3] = R
    Ad[3:, 3:] = R
    Ad[3:, :3] = skew(a.translation) @ R
    return Ad


def _se3_q_block(w: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Coupling block of the SE(3) left Jacobian."""
    theta = math.sqrt(float(w @ w))
    W = skew(w)
    P = skew(rho)
    WP = W @ P
    PW = P @ W
    WPW = WP @ W
    if theta < 1e-4:
        t2 = theta * theta
        c1 = 1.0 / 6.0 - t2 / 120.0
        c2 = 1.0 / 24.0 - t2 / 720.0
        c3 = 1.0 / 120.0 - t2 / 2520.0
    else:
        s, c = math.sin(theta), math.cos(theta)
        t2 = theta * theta
        c1 = (theta - s) / (t2 * theta)
        c2 = (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2)
        c3 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta)
    return (
        0.5 * P
        + c1 * (WP + PW + WPW)
        + c2 * (W @ WP + PW @ W - 3.0 * WPW)
        + c3 * (WPW @ W + W @ WPW)
    )


def se3_left_jacobian(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    w, rho = v[:3], v[3:]
    J = so3_left_jacobian(w)
    out = np.zeros((6, 6))
    out[:3, :3] = J
    out[3:, 3:] = J
    out[3:, :3] = _se3_q_block(w, rho)
    return out


def se3_left_jacobian_inv(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    w, rho = v[:3], v[3:]
    Ji = so3_left_jacobian_inv(w)
    out = np.zeros((6, 6))
    out[:3, :3] = Ji
    out[3:, 3:] = Ji
    out[3:, :3] = -Ji @ _se3_q_block(w, rho) @ Ji
    return out


def se3_right_jacobian_inv(v) -> np.ndarray:
    """``log(exp(v) exp(d)) ≈ v + Jr⁻¹(v) d``."""
    return se3_left_jacobian_inv(-np.asarray(v, dtype=float))


def random_pose(rng: np.random.Generator, max_angle: float = math.pi, scale: float = 1.0) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    return Pose(Rotation3.from_rotvec(axis * angle), rng.uniform(-scale, scale, size=3))


# --- batched helpers (leading axis = item) ------------------------------------
# Used by the vectorized factor groups; rotations travel as (m, 3, 3) matrices.


def skew_batch(v: np.ndarray) -> np.ndarray:
    m = v.shape[0]
    S = np.zeros((m, 3, 3))
    S[:, 0, 1] = -v[:, 2]
    S[:, 0, 2] = v[:, 1]
    S[:, 1, 0] = v[:, 2]
    S[:, 1, 2] = -v[:, 0]
    S[:, 2, 0] = -v[:, 1]
    S[:, 2, 1] = v[:, 0]
    return S


def matrix_to_quat_batch(R: np.ndarray) -> np.ndarray:
    """Shepperd's method, vectorized; returns (m, 4) ``(w, x, y, z)`` with ``w >= 0``."""
    m = R.shape[0]
    r00, r11, r22 = R[:, 0, 0], R[:, 1, 1], R[:, 2, 2]
    cand = np.stack([r00 + r11 + r22, r00, r11, r22], axis=1)
    k = np.argmax(cand, axis=1)
    q = np.empty((m, 4))
    for case in range(4):
        sel = k == case
        if not sel.any():
            continue
        Rs = R[sel]
        a00, a11, a22 = Rs[:, 0, 0], Rs[:, 1, 1], Rs[:, 2, 2]
        if case == 0:
            s = 2.0 * np.sqrt(np.maximum(1.0 + a00 + a11 + a22, 0.0))
            q[sel] = np.stack([0.25 * s, (Rs[:, 2, 1] - Rs[:, 1, 2]) / s,
                               (Rs[:, 0, 2] - Rs[:, 2, 0]) / s, (Rs[:, 1, 0] - Rs[:, 0, 1]) / s], 1)
        elif case == 1:
            s = 2.0 * np.sqrt(np.maximum(1.0 + a00 - a11 - a22, 0.0))
            q[sel] = np.stack([(Rs[:, 2, 1] - Rs[:, 1, 2]) / s, 0.25 * s,
                               (Rs[:, 0, 1] + Rs[:, 1, 0]) / s, (Rs[:, 0, 2] + Rs[:, 2, 0]) / s], 1)
        elif case == 2:
            s = 2.0 * np.sqrt(np.maximum(1.0 + a11 - a00 - a22, 0.0))
            q[sel] = np.stack([(Rs[:, 0, 2] - Rs[:, 2, 0]) / s, (Rs[:, 0, 1] + Rs[:, 1, 0]) / s,
                               0.25 * s, (Rs[:, 1, 2] + Rs[:, 2, 1]) / s], 1)
        else:
            s = 2.0 * np.sqrt(np.maximum(1.0 + a22 - a00 - a11, 0.0))
            q[sel] = np.stack([(Rs[:, 1, 0] - Rs[:, 0, 1]) / s, (Rs[:, 0, 2] + Rs[:, 2, 0]) / s,
                               (Rs[:, 1, 2] + Rs[:, 2, 1]) / s, 0.25 * s], 1)
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0] *= -1.0
    return q


def so3_log_batch(R: np.ndarray) -> np.ndarray:
    q = matrix_to_quat_batch(R)
    v = q[:, 1:]
    n = np.linalg.norm(v, axis=1)
    small = n < 1e-12
    safe = np.where(small, 1.0, n)
    theta = 2.0 * np.arctan2(n, q[:, 0])
    scale = np.where(small, 2.0 / q[:, 0], theta / safe)
    return v * scale[:, None]


def _so3_coeffs_batch(theta: np.ndarray):
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = t * t
    A = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(t)) / t2)
    B = np.where(small, 1.0 / 6.0 - theta**2 / 120.0, (t - np.sin(t)) / (t2 * t))
    return A, B


def so3_exp_batch(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w, axis=1)
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    s = np.where(small, 1.0 - theta**2 / 6.0, np.sin(t) / t)
    A, _ = _so3_coeffs_batch(theta)
    W = skew_batch(w)
    return np.eye(3) + s[:, None, None] * W + A[:, None, None] * (W @ W)


def so3_left_jacobian_batch(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w, axis=1)
    A, B = _so3_coeffs_batch(theta)
    W = skew_batch(w)
    return np.eye(3) + A[:, None, None] * W + B[:, None, None] * (W @ W)


def so3_left_jacobian_inv_batch(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w, axis=1)
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    c = np.where(small, 1.0 / 12.0 + theta**2 / 720.0,
                 (1.0 - t * np.sin(t) / (2.0 * (1.0 - np.cos(t)))) / (t * t))
    W = skew_batch(w)
    return np.eye(3) - 0.5 * W + c[:, None, None] * (W @ W)


def se3_log_batch(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    w = so3_log_batch(R)
    rho = np.einsum("mij,mj->mi", so3_left_jacobian_inv_batch(w), t)
    return np.concatenate([w, rho], axis=1)


def se3_exp_batch(v: np.ndarray):
    w, rho = v[:, :3], v[:, 3:]
    return so3_exp_batch(w), np.einsum("mij,mj->mi", so3_left_jacobian_batch(w), rho)


def _se3_q_block_batch(w: np.ndarray, rho: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w, axis=1)
    small = theta < 1e-4
    t = np.where(small, 1.0, theta)
    t2 = t * t
    s, c = np.sin(t), np.cos(t)
    th2 = theta**2
    c1 = np.where(small, 1.0 / 6.0 - th2 / 120.0, (t - s) / (t2 * t))
    c2 = np.where(small, 1.0 / 24.0 - th2 / 720.0, (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2))
    c3 = np.where(small, 1.0 / 120.0 - th2 / 2520.0, (2.0 * t - 3.0 * s + t * c) / (2.0 * t2 * t2 * t))
    W = skew_batch(w)
    P = skew_batch(rho)
    WP = W @ P
    PW = P @ W
    WPW = WP @ W
    return (
        0.5 * P
        + c1[:, None, None] * (WP + PW + WPW)
        + c2[:, None, None] * (W @ WP + PW @ W - 3.0 * WPW)
        + c3[:, None, None] * (WPW @ W + W @ WPW)
    )


def se3_right_jacobian_inv_batch(v: np.ndarray) -> np.ndarray:
    w, rho = -v[:, :3], -v[:, 3:]
    Ji = so3_left_jacobian_inv_batch(w)
    out = np.zeros((v.shape[0], 6, 6))
    out[:, :3, :3] = Ji
    out[:, 3:, 3:] = Ji
    out[:, 3:, :3] = -Ji @ _se3_q_block_batch(w, rho) @ Ji
    return out


def adjoint_batch(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    out = np.zeros((R.shape[0], 6, 6))
    out[:, :3, :3] = R
    out[:, 3:, 3:] = R
    out[:, 3:, :3] = skew_batch(t) @ R
    return out


def poses_to_arrays(poses) -> tuple[np.ndarray, np.ndarray]:
    poses = list(poses)
    R = np.array([p.rotation.matrix for p in poses]).reshape(-1, 3, 3)
    t = np.array([p.translation for p in poses]).reshape(-1, 3)
    return R, t
