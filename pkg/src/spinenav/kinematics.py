"""Generic 7-DoF arm: forward kinematics, Jacobian, jogging IK, link shapes.

The kinematic table is Denavit-Hartenberg style data (one row per
joint): all link offsets ``a`` are zero and twists alternate, giving the
usual roll-pitch-...-roll chain.  With every joint at zero the flange
sits at (0, 0, 1310) mm with identity orientation; tests pin that home
pose against the shipped table.

Jogging moves the end-effector target along or about one base-frame
axis, then tracks it with damped-least-squares IK.  A jog is rejected
in-band (state unchanged, flag set) when the per-tick cap is exceeded,
the IK residual stays above tolerance, or joint limits are hit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import JointLimitError
from .guidance import TriangleMesh, make_box, make_cylinder, merge_meshes
from .transforms import Frame, RigidTransform

__all__ = [
    "DH_TABLE",
    "JOINT_LIMITS_DEG",
    "HOME_EE_POSITION",
    "ArmModel",
    "RobotState",
    "JogResult",
    "JOG_AXES",
    "jog",
]

# (a_mm, alpha_deg, d_mm) per joint; theta offsets are all zero
DH_TABLE = (
    (0.0, -90.0, 360.0),
    (0.0, 90.0, 0.0),
    (0.0, 90.0, 420.0),
    (0.0, -90.0, 0.0),
    (0.0, -90.0, 400.0),
    (0.0, 90.0, 0.0),
    (0.0, 0.0, 130.0),
)

JOINT_LIMITS_DEG = (170.0, 120.0, 170.0, 120.0, 170.0, 120.0, 170.0)

# flange pose with all joints at zero, from the table above
HOME_EE_POSITION = (0.0, 0.0, 1310.0)

JOG_AXES = ("tx", "ty", "tz", "rx", "ry", "rz")

_AXIS_VECTORS = {
    "tx": np.array([1.0, 0.0, 0.0]),
    "ty": np.array([0.0, 1.0, 0.0]),
    "tz": np.array([0.0, 0.0, 1.0]),
    "rx": np.array([1.0, 0.0, 0.0]),
    "ry": np.array([0.0, 1.0, 0.0]),
    "rz": np.array([0.0, 0.0, 1.0]),
}


@dataclass(frozen=True)
class RobotState:
    joint_angles: np.ndarray
    end_effector: RigidTransform  # flange pose expressed in the robot base frame
    timestamp: int = 0

    def __post_init__(self):
        q = np.asarray(self.joint_angles, dtype=float).reshape(7).copy()
        q.setflags(write=False)
        object.__setattr__(self, "joint_angles", q)


@dataclass(frozen=True)
class JogResult:
    state: RobotState
    rejected: bool = False
    reason: str | None = None


def _rotation_error_vec(target: RigidTransform, current: RigidTransform) -> np.ndarray:
    """World-frame rotation vector taking current orientation to target's."""
    q = np.array(target.q)
    # relative rotation target * current^-1 in quaternion form
    cw, cx, cy, cz = current.q
    conj = np.array([cw, -cx, -cy, -cz])
    w = q[0] * conj[0] - q[1] * conj[1] - q[2] * conj[2] - q[3] * conj[3]
    x = q[0] * conj[1] + q[1] * conj[0] + q[2] * conj[3] - q[3] * conj[2]
    y = q[0] * conj[2] - q[1] * conj[3] + q[2] * conj[0] + q[3] * conj[1]
    z = q[0] * conj[3] + q[1] * conj[2] - q[2] * conj[1] + q[3] * conj[0]
    vec = np.array([x, y, z])
    norm = float(np.linalg.norm(vec))
    if norm < 1e-15:
        return np.zeros(3)
    angle = 2.0 * math.atan2(norm, abs(float(w)))
    sign = 1.0 if w >= 0 else -1.0
    return sign * angle * vec / norm


class ArmModel:
    """Forward/inverse kinematics plus simple link geometry."""

    def __init__(self, dh: Sequence[tuple[float, float, float]] = DH_TABLE, limits_deg: Sequence[float] = JOINT_LIMITS_DEG):
        self.dh = tuple(dh)
        self.limits_rad = np.radians(np.asarray(limits_deg, dtype=float))
        if len(self.dh) != len(self.limits_rad):
            raise ValueError("one joint limit per table row required")

    @property
    def dof(self) -> int:
        return len(self.dh)

    def check_limits(self, joint_angles) -> np.ndarray:
        q = np.asarray(joint_angles, dtype=float).reshape(self.dof)
        over = np.abs(q) > self.limits_rad + 1e-12
        if over.any():
            bad = int(np.nonzero(over)[0][0])
            raise JointLimitError(f"joint {bad + 1} at {math.degrees(q[bad]):.1f} deg exceeds its limit")
        return q

    def _joint_transform(self, i: int, theta: float) -> RigidTransform:
        a, alpha_deg, d = self.dh[i]
        alpha = math.radians(alpha_deg)
        out = RigidTransform.from_axis_angle((0, 0, 1), theta, (0.0, 0.0, 0.0))
        out = out @ RigidTransform((1, 0, 0, 0), (0.0, 0.0, d))
        if a != 0.0:
            out = out @ RigidTransform((1, 0, 0, 0), (a, 0.0, 0.0))
        return out @ RigidTransform.from_axis_angle((1, 0, 0), alpha)

    def joint_frames(self, joint_angles) -> list[RigidTransform]:
        """Poses of frames 0..dof in the base frame (frame 0 is the base)."""
        q = self.check_limits(joint_angles)
        frames = [RigidTransform.identity()]
        for i in range(self.dof):
            frames.append(frames[-1] @ self._joint_transform(i, float(q[i])))
        return frames

    def fk(self, joint_angles) -> RigidTransform:
        """Flange pose in the base frame: the product of the joint transforms."""
        return self.joint_frames(joint_angles)[-1]

    def state(self, joint_angles, timestamp: int = 0) -> RobotState:
        return RobotState(np.asarray(joint_angles, dtype=float), self.fk(joint_angles), timestamp)

    def jacobian(self, joint_angles) -> np.ndarray:
        """Geometric Jacobian (6 x dof): linear rows mm, angular rows rad."""
        frames = self.joint_frames(joint_angles)
        p_ee = frames[-1].t
        jac = np.zeros((6, self.dof))
        for i in range(self.dof):
            origin = frames[i].t
            axis = frames[i].rotation_matrix()[:, 2]
            jac[:3, i] = np.cross(axis, p_ee - origin)
            jac[3:, i] = axis
        return jac

    def solve_ik(
        self,
        target: RigidTransform,
        q0,
        max_iters: int = 100,
        damping: float = 5.0,
        rot_weight_mm: float = 100.0,
        pos_tol_mm: float = 1e-4,
        rot_tol_rad: float = 1e-6,
    ) -> tuple[np.ndarray, float, float]:
        """Damped least squares toward the target pose.

        Joint angles are clamped to their limits every step.  Returns
        (angles, position error mm, rotation error rad); callers decide
        whether the residual is acceptable.
        """
        q = np.asarray(q0, dtype=float).reshape(self.dof).copy()
        pos_err = rot_err = math.inf
        for _ in range(max_iters):
            current = self.fk(q)
            e_pos = target.t - current.t
            e_rot = _rotation_error_vec(target, current)
            pos_err = float(np.linalg.norm(e_pos))
            rot_err = float(np.linalg.norm(e_rot))
            if pos_err <= pos_tol_mm and rot_err <= rot_tol_rad:
                break
            jac = self.jacobian(q)
            jw = np.vstack([jac[:3], rot_weight_mm * jac[3:]])
            err = np.concatenate([e_pos, rot_weight_mm * e_rot])
            jjt = jw @ jw.T + (damping ** 2) * np.eye(6)
            dq = jw.T @ np.linalg.solve(jjt, err)
            step = float(np.linalg.norm(dq))
            if step > 0.5:  # rad; keeps the linearisation honest
                dq *= 0.5 / step
            q = np.clip(q + dq, -self.limits_rad, self.limits_rad)
        return q, pos_err, rot_err

    # -- geometry ----------------------------------------------------------

    def link_meshes(self) -> list[tuple[int, TriangleMesh]]:
        """(frame index, local mesh) pairs; side fins break the symmetry
        that would otherwise stall surface registration."""
        segs = 12
        parts: list[tuple[int, TriangleMesh]] = [
            (0, merge_meshes([
                make_box((0, 0, 12.5), (220.0, 220.0, 25.0)),
                make_cylinder(62.0, 335.0, segs, center=(0, 0, 25 + 167.5)),
                make_box((75.0, 30.0, 120.0), (50.0, 40.0, 120.0)),
            ])),
            (1, make_box((0, 0, 0), (120.0, 150.0, 120.0))),
            (2, merge_meshes([
                make_cylinder(46.0, 420.0, segs, center=(0, 0, 210.0)),
                make_box((52.0, -20.0, 140.0), (36.0, 60.0, 150.0)),
            ])),
            (3, make_box((0, 0, 0), (105.0, 130.0, 105.0))),
            (4, merge_meshes([
                make_cylinder(38.0, 400.0, segs, center=(0, 0, 200.0)),
                make_box((-46.0, 14.0, 260.0), (28.0, 46.0, 120.0)),
            ])),
            (5, make_box((0, 0, 0), (88.0, 108.0, 88.0))),
            (6, make_cylinder(30.0, 130.0, segs, center=(0, 0, 65.0))),
            (7, merge_meshes([
                make_box((0, 0, 22.0), (95.0, 60.0, 44.0)),   # probe holder
                make_box((38.0, 0, 72.0), (22.0, 30.0, 60.0)),  # guide block
            ])),
        ]
        return parts

    def surface_mesh(self, joint_angles) -> TriangleMesh:
        """All link meshes posed by the joint state, in the base frame."""
        frames = self.joint_frames(joint_angles)
        posed = [mesh.transformed(frames[i]) for i, mesh in self.link_meshes()]
        return merge_meshes(posed, frame=Frame.BASE)


def jog(
    model: ArmModel,
    state: RobotState,
    axis: str,
    delta: float,
    *,
    cap_translation_mm: float = 5.0,
    cap_rotation_deg: float = 2.0,
    max_pos_residual_mm: float = 0.1,
    max_rot_residual_deg: float = 0.1,
    timestamp: int | None = None,
) -> JogResult:
    """Move the end-effector by delta along/about a base-frame axis.

    Translations keep the orientation; rotations pivot about the current
    flange position.  Rejections never raise: the original state comes
    back with ``rejected=True`` and a reason code.
    """
    if axis not in JOG_AXES:
        raise ValueError(f"axis must be one of {JOG_AXES}")
    stamp = state.timestamp if timestamp is None else timestamp
    if delta == 0.0:
        if stamp == state.timestamp:
            return JogResult(state)
        return JogResult(RobotState(state.joint_angles, state.end_effector, stamp))

    translating = axis.startswith("t")
    cap = cap_translation_mm if translating else cap_rotation_deg
    if abs(delta) > cap + 1e-12:
        return JogResult(state, rejected=True, reason="delta_cap")

    current = state.end_effector
    if translating:
        target = RigidTransform(current.q, current.t + delta * _AXIS_VECTORS[axis])
    else:
        spin = RigidTransform.from_axis_angle(_AXIS_VECTORS[axis], math.radians(delta))
        target = RigidTransform((spin @ current).q, current.t)

    q_new, pos_err, rot_err = model.solve_ik(target, state.joint_angles)
    if pos_err > max_pos_residual_mm or rot_err > math.radians(max_rot_residual_deg):
        return JogResult(state, rejected=True, reason="ik_residual")
    return JogResult(model.state(q_new, stamp))
