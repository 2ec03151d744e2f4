"""Nonlinear least-squares problem container and Levenberg-Marquardt solver.

Variables live either on SE(3) (``Pose``, 6 tangent scalars, updated as
``x ∘ exp(δ)``) or in R³ (``np.ndarray``). Each variable carries a
per-tangent-scalar ``fixed_mask``; fixed scalars get no Jacobian column and
are never written to.

Cost terms come either one at a time (``ResidualBlock``, arbitrary Python
callables) or as a ``ResidualGroup`` of many same-shaped terms evaluated in one
vectorized call. The normal equations ``(JᵀJ + λ diag(JᵀJ)) δ = -Jᵀr`` are
factored with Cholesky: banded when the free scalars form a narrow band (pose
chains), dense otherwise.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, cho_solve_banded, cholesky_banded

from .geometry import Pose, Rotation3, compose, poses_to_arrays, se3_exp, se3_exp_batch

log = logging.getLogger(__name__)


class VariableKind(enum.Enum):
    POSE_SE3 = "pose_se3"
    POINT3 = "point3"

    @property
    def tangent_dim(self) -> int:
        return 6 if self is VariableKind.POSE_SE3 else 3


class ValidationError(ValueError):
    pass


class PreconditionError(ValueError):
    pass


class JacobianError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Loss:
    """``ρ(s)`` on the squared residual norm ``s``.

    Huber: ``ρ(s) = s`` for ``s ≤ δ²``, else ``2δ√s - δ²``; ``delta`` is in
    residual-norm units.
    """

    kind: str = "identity"
    delta: float = 1.0

    def __post_init__(self):
        if self.kind not in ("identity", "huber"):
            raise ValidationError(f"unknown loss kind {self.kind!r}")
        if self.kind == "huber" and not self.delta > 0:
            raise ValidationError("huber delta must be positive")

    @classmethod
    def identity(cls) -> Loss:
        return cls("identity")

    @classmethod
    def huber(cls, delta: float) -> Loss:
        return cls("huber", float(delta))

    def rho(self, s: float) -> float:
        if self.kind == "identity" or s <= self.delta * self.delta:
            return s
        return 2.0 * self.delta * math.sqrt(s) - self.delta * self.delta

    def drho(self, s: float) -> float:
        if self.kind == "identity" or s <= self.delta * self.delta:
            return 1.0
        return self.delta / math.sqrt(s)

    def rho_array(self, s: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return s
        d = self.delta
        return np.where(s <= d * d, s, 2.0 * d * np.sqrt(np.maximum(s, d * d)) - d * d)

    def drho_array(self, s: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return np.ones_like(s)
        d = self.delta
        return np.where(s <= d * d, 1.0, d / np.sqrt(np.maximum(s, d * d)))


IDENTITY = Loss.identity()


def apply_robust_loss(residual: np.ndarray, jacobian, loss: Loss):
    """IRLS scaling: residual and Jacobian(s) multiplied by ``sqrt(ρ'(‖r‖²))``.

    ``jacobian`` may be a single matrix or a list of per-variable blocks.
    """
    if loss.kind == "identity":
        return residual, jacobian
    s = float(residual @ residual)
    w = math.sqrt(loss.drho(s))
    if w == 1.0:
        return residual, jacobian
    if isinstance(jacobian, (list, tuple)):
        return residual * w, [J * w for J in jacobian]
    return residual * w, jacobian * w


@dataclass
class Variable:
    kind: VariableKind
    value: Pose | np.ndarray
    fixed_mask: np.ndarray
    name: str = ""

    @property
    def free_index(self) -> np.ndarray:
        return np.flatnonzero(~self.fixed_mask)


@dataclass
class ResidualBlock:
    """One cost term ``½ ρ(w ‖f(x₁, …)‖²)``.

    ``jacobian_fn``, when given, returns one ``dim × tangent`` matrix per
    variable, w.r.t. right-multiplicative perturbations for poses.
    """

    variable_ids: tuple[int, ...]
    dim: int
    residual_fn: Callable[..., np.ndarray]
    loss: Loss = IDENTITY
    weight: float = 1.0
    jacobian_fn: Callable[..., Sequence[np.ndarray]] | None = None
    name: str = ""


@dataclass
class ResidualGroup:
    """``m`` cost terms of identical shape, evaluated in one call.

    ``variable_ids`` is ``(m, k)``: row ``i`` couples variables
    ``variable_ids[i]``. ``fn(values, jacobians)`` receives one batch per
    slot (``(R, t)`` with shapes ``(m,3,3)``/``(m,3)`` for poses, ``(m,3)``
    for points) and returns residuals ``(m, dim)`` and, when ``jacobians`` is
    true, a list of ``(m, dim, tangent)`` arrays (or ``None`` to request
    central differences). Loss and weight apply per row.
    """

    variable_ids: np.ndarray
    dim: int
    fn: Callable
    loss: Loss = IDENTITY
    weight: float = 1.0
    name: str = ""

    def __post_init__(self):
        ids = np.asarray(self.variable_ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[:, None]
        self.variable_ids = ids

    def __len__(self):
        return len(self.variable_ids)


@dataclass
class SolverOptions:
    max_iterations: int = 50
    initial_lambda: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    function_tolerance: float = 1e-9
    parameter_tolerance: float = 1e-10
    # converged once the cost falls to this fraction of the initial cost
    cost_tolerance: float = 1e-15
    max_lambda: float = 1e16
    jacobian: str = "analytic"  # "numeric" | "analytic" (falls back to numeric)
    numeric_step: float = 1e-6

    def __post_init__(self):
        for name in (
            "initial_lambda",
            "lambda_up",
            "lambda_down",
            "function_tolerance",
            "parameter_tolerance",
            "cost_tolerance",
            "numeric_step",
        ):
            if not getattr(self, name) > 0:
                raise ValidationError(f"solver option {name} must be strictly positive")
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be >= 1")
        if self.jacobian not in ("numeric", "analytic"):
            raise ValidationError(f"unknown jacobian mode {self.jacobian!r}")


class SolverStatus(enum.Enum):
    CONVERGED = "converged"
    MAX_ITERATIONS = "max_iterations"
    FAILURE = "failure"


@dataclass
class SolverReport:
    status: SolverStatus
    initial_cost: float
    final_cost: float
    iterations: int
    cost_trace: list[float] = field(default_factory=list)
    message: str = ""

    @property
    def converged(self) -> bool:
        return self.status is SolverStatus.CONVERGED

    def summary(self) -> str:
        s = (
            f"status={self.status.value} iterations={self.iterations} "
            f"initial_cost={self.initial_cost:.17g} final_cost={self.final_cost:.17g}"
        )
        if self.message:
            s += f" message={self.message!r}"
        return s


def _perturb(kind: VariableKind, value, i: int, h: float):
    if kind is VariableKind.POSE_SE3:
        d = np.zeros(6)
        d[i] = h
        return compose(value, se3_exp(d))
    out = np.array(value, dtype=float)
    out[i] += h
    return out


def numeric_jacobian(
    residual_fn: Callable[..., np.ndarray],
    values: Sequence,
    kinds: Sequence[VariableKind],
    index: int,
    step: float = 1e-6,
    name: str = "",
) -> np.ndarray:
    """Central-difference Jacobian of ``residual_fn(*values)`` w.r.t. ``values[index]``.

    Poses are perturbed on the right through ``se3_exp``.
    """
    kind = kinds[index]
    vals = list(values)
    base = vals[index]
    cols = []
    for i in range(kind.tangent_dim):
        vals[index] = _perturb(kind, base, i, step)
        rp = np.atleast_1d(np.asarray(residual_fn(*vals), dtype=float))
        vals[index] = _perturb(kind, base, i, -step)
        rm = np.atleast_1d(np.asarray(residual_fn(*vals), dtype=float))
        cols.append((rp - rm) / (2.0 * step))
    J = np.stack(cols, axis=1)
    if not np.all(np.isfinite(J)):
        raise JacobianError(f"non-finite jacobian entries in block {name or '?'}")
    return J


class NonFiniteResidual(ArithmeticError):
    def __init__(self, block_index: int, name: str):
        super().__init__(f"non-finite residual in block {block_index} ({name or 'unnamed'})")
        self.block_index = block_index


class Problem:
    def __init__(self):
        self.variables: list[Variable] = []
        self.blocks: list[ResidualBlock] = []
        self.groups: list[ResidualGroup] = []

    def add_variable(self, kind: VariableKind, initial_value, fixed_mask=None, name: str = "") -> int:
        kind = VariableKind(kind)
        if kind is VariableKind.POSE_SE3:
            if isinstance(initial_value, Pose):
                value = initial_value
            else:
                # raw TUM-ordered (x, y, z, qx, qy, qz, qw)
                raw = np.asarray(initial_value, dtype=float).reshape(7)
                if abs(np.linalg.norm(raw[3:]) - 1.0) > 1e-6:
                    raise ValidationError(f"non-unit quaternion {raw[3:]}")
                value = Pose.from_tum(raw)
        else:
            value = np.array(initial_value, dtype=float).reshape(3)
            if not np.all(np.isfinite(value)):
                raise ValidationError(f"non-finite point {value}")
        if fixed_mask is None:
            mask = np.zeros(kind.tangent_dim, dtype=bool)
        elif isinstance(fixed_mask, (bool, np.bool_)):
            mask = np.full(kind.tangent_dim, bool(fixed_mask))
        else:
            mask = np.asarray(fixed_mask, dtype=bool).reshape(kind.tangent_dim)
        self.variables.append(Variable(kind, value, mask.copy(), name))
        return len(self.variables) - 1

    def add_pose(self, pose: Pose, fixed_mask=None, name: str = "") -> int:
        return self.add_variable(VariableKind.POSE_SE3, pose, fixed_mask, name)

    def add_point(self, point, fixed_mask=None, name: str = "") -> int:
        return self.add_variable(VariableKind.POINT3, point, fixed_mask, name)

    def add_residual_block(self, block: ResidualBlock) -> int:
        for vid in block.variable_ids:
            if not 0 <= vid < len(self.variables):
                raise PreconditionError(f"block {block.name!r} references unknown variable {vid}")
        if not block.weight > 0:
            raise ValidationError("block weight must be positive")
        self.blocks.append(block)
        return len(self.blocks) - 1

    def add_residual_group(self, group: ResidualGroup) -> int:
        ids = group.variable_ids
        if ids.size and (ids.min() < 0 or ids.max() >= len(self.variables)):
            raise PreconditionError(f"group {group.name!r} references unknown variables")
        if not group.weight > 0:
            raise ValidationError("group weight must be positive")
        if len(ids):
            for j in range(ids.shape[1]):
                kinds = {self.variables[v].kind for v in np.unique(ids[:, j])}
                if len(kinds) != 1:
                    raise ValidationError(f"group {group.name!r} mixes variable kinds in slot {j}")
        self.groups.append(group)
        return len(self.groups) - 1

    def value(self, vid: int):
        return self.variables[vid].value

    def set_fixed(self, vid: int, fixed_mask=True):
        var = self.variables[vid]
        if isinstance(fixed_mask, (bool, np.bool_)):
            var.fixed_mask = np.full(var.kind.tangent_dim, bool(fixed_mask))
        else:
            var.fixed_mask = np.asarray(fixed_mask, dtype=bool).reshape(var.kind.tangent_dim).copy()

    def evaluate_cost(self, overrides=None) -> tuple[float, int | None]:
        """Total cost and, if some residual is non-finite, the offending term index.

        Term indices count blocks first, then groups.
        """
        state = _State.from_problem(self)
        if overrides:
            for vid, v in overrides.items():
                state.set_value(vid, v)
        return state.cost(self)


class _State:
    """Array copy of all variable values, so trial steps avoid object churn."""

    def __init__(self, kinds, pose_slot, point_slot, R, t, P):
        self.kinds = kinds
        self.pose_slot = pose_slot  # vid -> row in R/t, -1 for points
        self.point_slot = point_slot  # vid -> row in P, -1 for poses
        self.R, self.t, self.P = R, t, P

    @classmethod
    def from_problem(cls, problem: Problem) -> _State:
        nv = len(problem.variables)
        pose_slot = np.full(nv, -1, dtype=np.int64)
        point_slot = np.full(nv, -1, dtype=np.int64)
        poses, points = [], []
        for vid, var in enumerate(problem.variables):
            if var.kind is VariableKind.POSE_SE3:
                pose_slot[vid] = len(poses)
                poses.append(var.value)
            else:
                point_slot[vid] = len(points)
                points.append(var.value)
        R, t = poses_to_arrays(poses) if poses else (np.zeros((0, 3, 3)), np.zeros((0, 3)))
        P = np.array(points, dtype=float).reshape(-1, 3)
        return cls([v.kind for v in problem.variables], pose_slot, point_slot, R, t, P)

    def set_value(self, vid: int, value):
        if self.kinds[vid] is VariableKind.POSE_SE3:
            i = self.pose_slot[vid]
            self.R[i] = value.rotation.matrix
            self.t[i] = value.translation
        else:
            self.P[self.point_slot[vid]] = value

    def gather(self, vids: np.ndarray):
        kind = self.kinds[int(vids[0])]
        if kind is VariableKind.POSE_SE3:
            idx = self.pose_slot[vids]
            return self.R[idx], self.t[idx]
        return self.P[self.point_slot[vids]]

    def value_of(self, vid: int):
        if self.kinds[vid] is VariableKind.POSE_SE3:
            i = self.pose_slot[vid]
            return Pose(Rotation3.from_matrix(self.R[i]), self.t[i])
        return self.P[self.point_slot[vid]].copy()

    def retract(self, step: np.ndarray, pose_cols: np.ndarray, point_cols: np.ndarray) -> _State:
        """New state moved by ``step``; ``*_cols`` map tangent scalars to step indices (-1 = fixed)."""
        R, t, P = self.R, self.t, self.P.copy()
        if len(pose_cols):
            moving = np.flatnonzero((pose_cols >= 0).any(axis=1))
            if len(moving):
                cols = pose_cols[moving]
                d = np.where(cols >= 0, step[np.maximum(cols, 0)], 0.0)
                dR, dt = se3_exp_batch(d)
                R = R.copy()
                t = t.copy()
                Rm = R[moving]
                t[moving] = t[moving] + np.einsum("mij,mj->mi", Rm, dt)
                R[moving] = Rm @ dR
        if len(point_cols):
            free = point_cols >= 0
            P[free] += step[point_cols[free]]
        return _State(self.kinds, self.pose_slot, self.point_slot, R, t, P)

    def chunks(self, problem: Problem, jacobians: bool, options: SolverOptions | None = None,
               active_vars: np.ndarray | None = None):
        """Yield ``(term index, name, vids (m,k), r (m,d), Js or None, loss, weight)``."""
        for bi, block in enumerate(problem.blocks):
            ids = np.asarray(block.variable_ids, dtype=np.int64)
            if active_vars is not None and not active_vars[ids].any():
                continue
            vals = [self.value_of(int(v)) for v in ids]
            r = np.atleast_1d(np.asarray(block.residual_fn(*vals), dtype=float)).reshape(1, block.dim)
            Js = None
            if jacobians and np.all(np.isfinite(r)):
                if options.jacobian == "analytic" and block.jacobian_fn is not None:
                    Js = [np.asarray(J, dtype=float).reshape(1, block.dim, -1) for J in block.jacobian_fn(*vals)]
                else:
                    kinds = [self.kinds[int(v)] for v in ids]
                    Js = [
                        numeric_jacobian(block.residual_fn, vals, kinds, j, options.numeric_step, block.name)[None]
                        for j in range(len(ids))
                    ]
            yield bi, block.name, ids[None, :], r, Js, block.loss, block.weight
        nb = len(problem.blocks)
        for gi, group in enumerate(problem.groups):
            ids = group.variable_ids
            if len(ids) == 0:
                continue
            if active_vars is not None and not active_vars[ids].any():
                continue
            vals = [self.gather(ids[:, j]) for j in range(ids.shape[1])]
            out = group.fn(vals, jacobians and options.jacobian == "analytic")
            r, Js = (out if isinstance(out, tuple) else (out, None))
            r = np.asarray(r, dtype=float).reshape(len(ids), group.dim)
            if jacobians and np.all(np.isfinite(r)) and (Js is None or options.jacobian == "numeric"):
                Js = _numeric_group_jacobians(group, vals, [self.kinds[int(ids[0, j])] for j in range(ids.shape[1])],
                                              options.numeric_step)
            if not jacobians:
                Js = None
            yield nb + gi, group.name, ids, r, Js, group.loss, group.weight

    def cost(self, problem: Problem) -> tuple[float, int | None]:
        total = 0.0
        for ti, _, _, r, _, loss, weight in self.chunks(problem, False):
            s = weight * np.einsum("md,md->m", r, r)
            if not np.all(np.isfinite(s)):
                return math.nan, ti
            total += 0.5 * float(np.sum(loss.rho_array(s)))
        return total, None


def _numeric_group_jacobians(group: ResidualGroup, vals, kinds, h: float):
    Js = []
    for j, kind in enumerate(kinds):
        cols = []
        for i in range(kind.tangent_dim):
            pair = []
            for sgn in (1.0, -1.0):
                trial = list(vals)
                if kind is VariableKind.POSE_SE3:
                    d = np.zeros(6)
                    d[i] = sgn * h
                    dR, dt = se3_exp_batch(d[None])
                    R, t = vals[j]
                    trial[j] = (R @ dR[0], t + R @ dt[0])
                else:
                    p = vals[j].copy()
                    p[:, i] += sgn * h
                    trial[j] = p
                out = group.fn(trial, False)
                r = out[0] if isinstance(out, tuple) else out
                pair.append(np.asarray(r, dtype=float).reshape(len(group), group.dim))
            cols.append((pair[0] - pair[1]) / (2.0 * h))
        J = np.stack(cols, axis=2)
        if not np.all(np.isfinite(J)):
            raise JacobianError(f"non-finite jacobian entries in group {group.name or '?'}")
        Js.append(J)
    return Js


@dataclass
class _Layout:
    n: int
    colmap: np.ndarray  # (num variables, 6) step index per tangent scalar, -1 if fixed
    pose_cols: np.ndarray
    point_cols: np.ndarray
    active: np.ndarray  # variables with at least one free scalar
    bandwidth: int


def _layout(problem: Problem, state: _State) -> _Layout:
    nv = len(problem.variables)
    colmap = np.full((nv, 6), -1, dtype=np.int64)
    n = 0
    for vid, var in enumerate(problem.variables):
        free = var.free_index
        colmap[vid, free] = np.arange(n, n + len(free))
        n += len(free)
    active = (colmap >= 0).any(axis=1)
    pose_vids = np.flatnonzero(state.pose_slot >= 0)
    point_vids = np.flatnonzero(state.point_slot >= 0)
    pose_cols = np.empty((len(pose_vids), 6), dtype=np.int64)
    pose_cols[state.pose_slot[pose_vids]] = colmap[pose_vids]
    point_cols = np.empty((len(point_vids), 3), dtype=np.int64)
    point_cols[state.point_slot[point_vids]] = colmap[point_vids, :3]

    bw = 0
    terms = [np.asarray(b.variable_ids, dtype=np.int64)[None, :] for b in problem.blocks]
    terms += [g.variable_ids for g in problem.groups if len(g)]
    for ids in terms:
        cols = colmap[ids].reshape(len(ids), -1)
        lo = np.where(cols >= 0, cols, np.iinfo(np.int64).max).min(axis=1)
        hi = cols.max(axis=1)
        ok = hi >= 0
        if ok.any():
            bw = max(bw, int((hi[ok] - lo[ok]).max()))
    return _Layout(n, colmap, pose_cols, point_cols, active, bw)


def _use_banded(layout: _Layout) -> bool:
    return layout.n >= 64 and 4 * (layout.bandwidth + 1) <= layout.n


def _linearize(problem: Problem, state: _State, layout: _Layout, options: SolverOptions, banded: bool):
    """Gauss-Newton system: ``H`` (lower band storage or dense) and gradient ``g``."""
    n = layout.n
    size = (layout.bandwidth + 1) * n if banded else n * n
    H = np.zeros(size)
    g = np.zeros(n)
    # fixed term order keeps accumulation bitwise reproducible
    for ti, name, ids, r, Js, loss, weight in state.chunks(problem, True, options, layout.active):
        if not np.all(np.isfinite(r)):
            raise NonFiniteResidual(ti, name)
        s = weight * np.einsum("md,md->m", r, r)
        scale = np.sqrt(weight * loss.drho_array(s))
        r = r * scale[:, None]
        Js = [J * scale[:, None, None] for J in Js]
        cols = [layout.colmap[ids[:, j], : J.shape[2]] for j, J in enumerate(Js)]
        for a, (Ja, ca) in enumerate(zip(Js, cols)):
            if not (ca >= 0).any():
                continue
            ga = np.einsum("mdi,md->mi", Ja, r)
            ok = ca >= 0
            g += np.bincount(ca[ok], weights=ga[ok], minlength=n)
            for b, (Jb, cb) in enumerate(zip(Js, cols)):
                if not (cb >= 0).any():
                    continue
                blk = np.einsum("mdi,mdj->mij", Ja, Jb)
                rows = np.broadcast_to(ca[:, :, None], blk.shape)
                cc = np.broadcast_to(cb[:, None, :], blk.shape)
                ok = (rows >= 0) & (cc >= 0)
                if banded:
                    ok &= rows >= cc
                    flat = (rows - cc) * n + cc
                else:
                    flat = rows * n + cc
                H += np.bincount(flat[ok], weights=blk[ok], minlength=size)
    if banded:
        return H.reshape(layout.bandwidth + 1, n), g
    return H.reshape(n, n), g


def _x_norm(state: _State, layout: _Layout) -> float:
    total = 0.0
    if len(layout.pose_cols):
        m = (layout.pose_cols >= 0).any(axis=1)
        total += float(np.sum(state.t[m] ** 2))
    if len(layout.point_cols):
        m = (layout.point_cols >= 0).any(axis=1)
        total += float(np.sum(state.P[m] ** 2))
    return math.sqrt(total)


def _write_back(problem: Problem, state: _State, layout: _Layout):
    for vid, var in enumerate(problem.variables):
        if not layout.active[vid]:
            continue
        if var.kind is VariableKind.POSE_SE3:
            i = state.pose_slot[vid]
            var.value = Pose(Rotation3.from_matrix(state.R[i]), state.t[i])
        else:
            var.value = state.P[state.point_slot[vid]].copy()


def solve(problem: Problem, options: SolverOptions | None = None) -> SolverReport:
    """Levenberg-Marquardt with multiplicative diagonal damping.

    Variables are updated in place. Raises ``PreconditionError`` if no scalar
    is free.
    """
    options = options or SolverOptions()
    state = _State.from_problem(problem)
    layout = _layout(problem, state)
    if layout.n == 0:
        raise PreconditionError("problem has no free variables")
    banded = _use_banded(layout)

    cost, bad = state.cost(problem)
    if bad is not None:
        return SolverReport(SolverStatus.FAILURE, math.nan, math.nan, 0, [], _term_message(problem, bad))
    initial = cost
    trace = [cost]
    lam = options.initial_lambda
    status = SolverStatus.MAX_ITERATIONS
    message = ""
    iterations = 0

    if cost == 0.0:
        return SolverReport(SolverStatus.CONVERGED, cost, cost, 0, trace, "zero initial cost")

    while iterations < options.max_iterations:
        try:
            H, g = _linearize(problem, state, layout, options, banded)
        except (NonFiniteResidual, JacobianError) as exc:
            status, message = SolverStatus.FAILURE, str(exc)
            break
        iterations += 1
        diag = (H[0] if banded else np.diag(H)).copy()
        # columns nobody constrains would make the system singular regardless of λ
        floor = 1e-12 * max(1.0, float(diag.max(initial=0.0)))
        diag = np.maximum(diag, floor)

        accepted = False
        while lam <= options.max_lambda:
            try:
                if banded:
                    A = H.copy()
                    A[0] += lam * diag
                    step = -cho_solve_banded((cholesky_banded(A, lower=True, check_finite=False), True), g,
                                             check_finite=False)
                else:
                    A = H + np.diag(lam * diag)
                    step = -cho_solve(cho_factor(A, lower=True, check_finite=False), g, check_finite=False)
            except LinAlgError:
                lam *= options.lambda_up
                continue
            if not np.all(np.isfinite(step)):
                lam *= options.lambda_up
                continue
            trial = state.retract(step, layout.pose_cols, layout.point_cols)
            new_cost, bad = trial.cost(problem)
            if bad is None and new_cost < cost:
                state = trial
                accepted = True
                break
            lam *= options.lambda_up

        if not accepted:
            status, message = SolverStatus.FAILURE, "indefinite system"
            # a step that cannot decrease the cost at any damping means we sit at the minimum
            if float(np.abs(g).max()) <= 1e-10 * max(1.0, cost):
                status, message = SolverStatus.CONVERGED, "gradient vanished"
            break

        decrease = cost - new_cost
        prev = cost
        cost = new_cost
        trace.append(cost)
        lam = max(lam / options.lambda_down, 1e-15)

        step_norm = float(np.linalg.norm(step))
        x_norm = _x_norm(state, layout)
        if decrease <= options.function_tolerance * prev:
            status = SolverStatus.CONVERGED
            break
        if step_norm <= options.parameter_tolerance * (x_norm + options.parameter_tolerance):
            status = SolverStatus.CONVERGED
            break
        if cost <= options.cost_tolerance * initial:
            status = SolverStatus.CONVERGED
            break

    _write_back(problem, state, layout)
    if status is SolverStatus.MAX_ITERATIONS:
        log.debug("LM hit max iterations (%d)", options.max_iterations)
    return SolverReport(status, initial, cost, iterations, trace, message)


def _term_message(problem: Problem, index: int) -> str:
    nb = len(problem.blocks)
    name = problem.blocks[index].name if index < nb else problem.groups[index - nb].name
    return f"non-finite residual in term {index} ({name or 'unnamed'})"
