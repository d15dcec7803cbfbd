"""Shared test oracles and generators, independent of library internals."""

from __future__ import annotations

import math

import numpy as np

from spinenav.calibration import PosePair
from spinenav.transforms import RigidTransform


def small_random_transform(rng, max_deg: float, max_mm: float) -> RigidTransform:
    axis = rng.normal(size=3)
    angle = math.radians(rng.uniform(-max_deg, max_deg))
    t = rng.uniform(-max_mm, max_mm, size=3)
    return RigidTransform.from_axis_angle(axis, angle, t)


def gaussian_pose_noise(rng, sigma_t_mm: float, sigma_r_rad: float) -> RigidTransform:
    axis = rng.normal(size=3)
    angle = rng.normal(0.0, sigma_r_rad) if sigma_r_rad > 0 else 0.0
    t = rng.normal(0.0, sigma_t_mm, size=3) if sigma_t_mm > 0 else np.zeros(3)
    if angle == 0.0:
        return RigidTransform((1, 0, 0, 0), t)
    return RigidTransform.from_axis_angle(axis, angle, t)


def gen_handeye_pairs(
    x_true: RigidTransform,
    n: int,
    rng,
    sigma_t_mm: float = 0.0,
    sigma_r_deg: float = 0.0,
    marker_in_ee: RigidTransform | None = None,
    pose_scale_mm: float = 400.0,
) -> list[PosePair]:
    """Forward-composition oracle for AX = XB data.

    With robot_pose = E_i and a fixed marker mount K in the end-effector
    frame, the tracker necessarily reads  M_i = X^-1 E_i^-1 K,  so the
    generated set satisfies the consecutive-motion relation exactly.
    """
    k = marker_in_ee if marker_in_ee is not None else RigidTransform.random(rng, 60.0)
    sigma_r = math.radians(sigma_r_deg)
    pairs = []
    for i in range(n):
        robot_pose = RigidTransform.random(rng, pose_scale_mm)
        marker_pose = x_true.inverse() @ robot_pose.inverse() @ k
        if sigma_t_mm > 0 or sigma_r > 0:
            marker_pose = gaussian_pose_noise(rng, sigma_t_mm, sigma_r) @ marker_pose
        pairs.append(PosePair(robot_pose, marker_pose, i))
    return pairs
