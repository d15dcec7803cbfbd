"""Hand-eye calibration (AX = XB) and the derived transform chain.

The unknown X is the pose of the optical tracking camera in the robot
base frame.  Motions are formed between consecutive samples:

    A_i = robot_pose[i+1]^-1 . robot_pose[i]
    B_i = marker_pose[i+1] . marker_pose[i]^-1

where ``robot_pose`` expresses robot-base coordinates in the
end-effector frame and ``marker_pose`` expresses marker coordinates in
the camera frame.  Rotation is solved first by a linear least-squares
problem over quaternions, then translation by linear least squares
given the rotation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateMotionError, InsufficientDataError
from .pointcloud import PointCloud
from .transforms import Frame, RigidTransform, TransformGraph, rotation_angle_rad

__all__ = [
    "PosePair",
    "HandEyeSolution",
    "solve_handeye",
    "derive_ct_robot",
    "derive_ct_ultrasound",
    "evaluate_tre",
]


@dataclass(frozen=True)
class PosePair:
    """One calibration sample: simultaneous robot and tracker readings."""

    robot_pose: RigidTransform   # robot-base coordinates seen from the end-effector
    marker_pose: RigidTransform  # marker coordinates seen from the tracking camera
    index: int = 0


@dataclass(frozen=True)
class HandEyeSolution:
    base_from_camera: RigidTransform  # the recovered X
    rotation_residual_rad: float      # RMS over motion pairs
    translation_residual_mm: float    # RMS over motion pairs
    motion_count: int

    def to_dict(self) -> dict:
        return {
            "base_from_camera": self.base_from_camera,
            "rotation_residual_rad": self.rotation_residual_rad,
            "translation_residual_mm": self.translation_residual_mm,
            "motion_count": self.motion_count,
        }


def _quat_left(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ])


def _quat_right(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [w, -x, -y, -z],
        [x, w, z, -y],
        [y, -z, w, x],
        [z, y, -x, w],
    ])


def relative_motions(pairs: Sequence[PosePair]) -> list[tuple[RigidTransform, RigidTransform]]:
    """Consecutive-sample motion pairs (A_i, B_i)."""
    out = []
    for cur, nxt in zip(pairs, pairs[1:]):
        a = nxt.robot_pose.inverse() @ cur.robot_pose
        b = nxt.marker_pose @ cur.marker_pose.inverse()
        out.append((a, b))
    return out


def solve_handeye(pairs: Sequence[PosePair], min_motion_deg: float = 1.0) -> HandEyeSolution:
    """Recover the camera pose in the robot base frame from pose pairs.

    Raises InsufficientDataError with fewer than 3 pairs and
    DegenerateMotionError when the usable motions share one rotation
    axis (the unknown is then unrecoverable about that axis).  Motions
    whose rotation angle falls below ``min_motion_deg`` are discarded as
    noise-dominated.
    """
    pairs = list(pairs)
    if len(pairs) < 3:
        raise InsufficientDataError(f"need at least 3 pose pairs, got {len(pairs)}")

    min_angle = math.radians(min_motion_deg)
    motions = [(a, b) for a, b in relative_motions(pairs) if a.rotation_angle_rad() >= min_angle]
    if len(motions) < 2:
        raise DegenerateMotionError(
            f"only {len(motions)} motions exceed {min_motion_deg} deg of rotation"
        )

    axes = []
    for a, _ in motions:
        v = np.asarray(a.q[1:], dtype=float)
        n = np.linalg.norm(v)
        axes.append(v / n)
    best_subtended = 0.0
    for i in range(len(axes)):
        for j in range(i + 1, len(axes)):
            # axes are lines (sign-free): use |dot|
            c = min(1.0, abs(float(np.dot(axes[i], axes[j]))))
            best_subtended = max(best_subtended, math.acos(c))
    if best_subtended < min_angle:
        raise DegenerateMotionError("all relative rotations share one axis")

    # rotation: stack (L(qA) - R(qB)) and take the least-squares null vector
    rows = []
    for a, b in motions:
        qa = np.asarray(a.q, dtype=float)
        qb = np.asarray(b.q, dtype=float)
        if qa[0] < 0.0:
            qa = -qa
        if qb[0] < 0.0:
            qb = -qb
        rows.append(_quat_left(qa) - _quat_right(qb))
    m = np.vstack(rows)
    _, _, vh = np.linalg.svd(m)
    q_x = vh[-1]
    rot = RigidTransform(q_x, (0.0, 0.0, 0.0))

    # translation: (R_A - I) t_X = R_X t_B - t_A, stacked over motions
    r_x = rot.rotation_matrix()
    lhs = np.vstack([a.rotation_matrix() - np.eye(3) for a, _ in motions])
    rhs = np.concatenate([r_x @ b.t - a.t for a, b in motions])
    t_x, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    x = RigidTransform(rot.q, t_x)

    rot_sq = 0.0
    trans_sq = 0.0
    for a, b in motions:
        left = a @ x
        right = x @ b
        rot_sq += rotation_angle_rad(left, right) ** 2
        trans_sq += float(np.sum((left.t - right.t) ** 2))
    n = len(motions)
    return HandEyeSolution(
        base_from_camera=x,
        rotation_residual_rad=math.sqrt(rot_sq / n),
        translation_residual_mm=math.sqrt(trans_sq / n),
        motion_count=n,
    )


def derive_ct_robot(x: HandEyeSolution | RigidTransform, ct_from_camera: RigidTransform) -> RigidTransform:
    """CT pose chain: ct_from_base = ct_from_camera . base_from_camera^-1."""
    base_from_camera = x.base_from_camera if isinstance(x, HandEyeSolution) else x
    return ct_from_camera @ base_from_camera.inverse()


def derive_ct_ultrasound(ct_from_base: RigidTransform, us_from_base: RigidTransform) -> RigidTransform:
    """Ultrasound-in-CT chain: ct_from_us = ct_from_base . us_from_base^-1."""
    return ct_from_base @ us_from_base.inverse()


def evaluate_tre(graph: TransformGraph, fiducials_ct: PointCloud, fiducials_measured: PointCloud) -> float:
    """RMS distance between CT fiducials and measured ones mapped into CT.

    The measured cloud must carry a frame reachable from the CT frame;
    a missing chain propagates NoPathError from the graph query.
    """
    if len(fiducials_ct) != len(fiducials_measured):
        raise ValueError("fiducial sets must have equal, index-corresponding counts")
    if len(fiducials_ct) == 0:
        raise ValueError("fiducial sets are empty")
    measured_frame = fiducials_measured.frame if fiducials_measured.frame is not None else Frame.CT
    in_ct = graph.query(Frame.CT, measured_frame).apply(fiducials_measured.points)
    d2 = np.sum((in_ct - fiducials_ct.points) ** 2, axis=1)
    return float(np.sqrt(np.mean(d2)))
