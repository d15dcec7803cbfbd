"""Simulated phantom and hardware stand-ins.

Everything the physical study supplies is fabricated here with known
ground truth: a procedural lumbar spine mesh with labelled facet-joint
and interspinous targets, a placed robot with a tracked marker and a
needle guide, a noisy optical tracker, and an orbiting depth camera.
Estimation errors made by calibration or registration then surface as
needle placement error, measured in the spine frame exactly like the
study's CBCT-based evaluation.

All randomness is drawn from per-stream generators keyed by
(scenario seed, stream name, call index); equal seeds reproduce every
observation bit-exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import BadParamsError, NoPathError
from .guidance import TriangleMesh, load_mesh, make_box, make_cylinder, merge_meshes, raycast_batch
from .kinematics import ArmModel
from .pointcloud import PointCloud
from .registration import Aabb
from .transforms import Frame, RigidTransform, TransformGraph, parse_frame

__all__ = [
    "TargetKind",
    "Target",
    "NoiseModel",
    "NeedleGuide",
    "ScenarioTruth",
    "Scenario",
    "make_lumbar_spine",
    "default_targets",
    "build_scenario",
    "load_scenario",
    "save_scenario",
    "validate_scenario",
    "observe_tracker",
    "observe_depth",
    "depth_viewpoints",
    "simulate_insertion",
    "placement_error",
    "PlacedRobot",
]


class TargetKind(str, Enum):
    FACET_JOINT = "facet_joint"
    LUMBAR_PUNCTURE = "lumbar_puncture"


@dataclass(frozen=True)
class Target:
    id: str
    kind: TargetKind
    position: np.ndarray  # spine frame, mm
    level: str

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float).reshape(3).copy()
        pos.setflags(write=False)
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "kind", TargetKind(self.kind))

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "position": [float(v) for v in self.position],
            "level": self.level,
        }


@dataclass(frozen=True)
class NoiseModel:
    tracker_sigma_t_mm: float = 0.0
    tracker_sigma_r_deg: float = 0.0
    depth_sigma_mm: float = 0.0
    outlier_fraction: float = 0.0

    def validate(self) -> None:
        for name, value in self.__dict__.items():
            if value < 0:
                raise BadParamsError(f"noise field {name} must be non-negative")
        if self.outlier_fraction >= 1.0:
            raise BadParamsError("outlier_fraction must be below 1")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class NeedleGuide:
    """Guide ray fixed in the end-effector frame."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=float).reshape(3).copy()
        direction = np.asarray(self.direction, dtype=float).reshape(3).copy()
        direction /= np.linalg.norm(direction)
        origin.setflags(write=False)
        direction.setflags(write=False)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)


# ---------------------------------------------------------------------------
# Procedural lumbar spine
# ---------------------------------------------------------------------------

VERTEBRA_PITCH_MM = 33.0
SPINOUS_HEIGHT_MM = 25.0  # leaves the paper-scale 8 mm interspinous gap

# flange at (620, 30, 560) pointing straight down at the phantom,
# solved once against DH_TABLE and frozen
START_JOINTS = (0.04567, 0.55586, 0.00471, -1.08191, -0.00249, 1.50383, 0.04984)


def make_lumbar_spine() -> TriangleMesh:
    """Five simplified vertebrae along -z with posterior (+y) processes."""
    parts = []
    for i in range(5):
        z = -i * VERTEBRA_PITCH_MM
        parts.append(make_cylinder(19.0, 26.0, segments=10, center=(0.0, -15.0, z)))
        parts.append(make_box((0.0, 8.0, z), (44.0, 24.0, 18.0)))            # arch
        parts.append(make_box((0.0, 32.0, z), (8.0, 28.0, SPINOUS_HEIGHT_MM)))  # spinous process
        parts.append(make_box((32.0, 8.0, z), (28.0, 10.0, 12.0)))           # right transverse
        parts.append(make_box((-32.0, 8.0, z), (28.0, 10.0, 12.0)))          # left transverse
        if i < 4:
            gap_z = z - VERTEBRA_PITCH_MM / 2.0
            parts.append(make_box((16.0, 18.0, gap_z), (10.0, 12.0, 12.0)))   # right facet column
            parts.append(make_box((-16.0, 18.0, gap_z), (10.0, 12.0, 12.0)))  # left facet column
    return merge_meshes(parts, frame=Frame.SPINE)


def default_targets() -> list[Target]:
    def gap_z(upper: int) -> float:
        return -upper * VERTEBRA_PITCH_MM - VERTEBRA_PITCH_MM / 2.0

    return [
        Target("fj_l2_l3_left", TargetKind.FACET_JOINT, (-21.0, 18.0, gap_z(1)), "L2-L3"),
        Target("fj_l3_l4_right", TargetKind.FACET_JOINT, (21.0, 18.0, gap_z(2)), "L3-L4"),
        Target("lp_l2_l3", TargetKind.LUMBAR_PUNCTURE, (0.0, 32.0, gap_z(1)), "L2-L3"),
        Target("lp_l3_l4", TargetKind.LUMBAR_PUNCTURE, (0.0, 32.0, gap_z(2)), "L3-L4"),
    ]


# ---------------------------------------------------------------------------
# Scenario
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioTruth:
    """Every transform the pipeline estimates, as fabricated truth."""

    base_from_camera: RigidTransform    # hand-eye unknown
    ct_from_camera: RigidTransform      # CT machine intrinsic
    us_from_base: RigidTransform        # probe calibration, given input
    spine_from_ct: RigidTransform       # volume metadata
    base_from_spine: RigidTransform     # physical phantom placement
    virtual_from_base: RigidTransform   # viewer-world anchor vs robot
    virtual_from_viewer: RigidTransform # viewer head pose in its world
    marker_in_ee: RigidTransform        # tracked marker mount
    guide: NeedleGuide                  # needle guide in the flange frame
    start_joints: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.start_joints, dtype=float).reshape(-1).copy()
        q.setflags(write=False)
        object.__setattr__(self, "start_joints", q)

    def graph(self, model: ArmModel | None = None) -> TransformGraph:
        """Fully populated ground-truth graph over all nine frames."""
        model = model or ArmModel()
        g = TransformGraph()
        g.set_edge(Frame.BASE, Frame.CAMERA, self.base_from_camera)
        g.set_edge(Frame.CT, Frame.CAMERA, self.ct_from_camera)
        g.set_edge(Frame.US, Frame.BASE, self.us_from_base)
        g.set_edge(Frame.SPINE, Frame.CT, self.spine_from_ct)
        g.set_edge(Frame.VIRTUAL, Frame.BASE, self.virtual_from_base)
        g.set_edge(Frame.VIRTUAL, Frame.VIEWER, self.virtual_from_viewer)
        g.set_edge(Frame.BASE, Frame.EE, model.fk(self.start_joints))
        g.set_edge(Frame.EE, Frame.MARKER, self.marker_in_ee)
        return g


@dataclass(frozen=True)
class Scenario:
    spine_mesh: TriangleMesh
    truth: ScenarioTruth
    noise: NoiseModel
    targets: tuple[Target, ...]
    seed: int
    scene_box: Aabb
    model: ArmModel = field(default_factory=ArmModel, compare=False)

    def rng(self, stream: str, call_index: int = 0) -> np.random.Generator:
        token = int.from_bytes(stream.encode("utf-8")[:8].ljust(8, b"\0"), "big")
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(token, call_index)))

    def target_by_id(self, target_id: str) -> Target:
        for t in self.targets:
            if t.id == target_id:
                return t
        raise KeyError(target_id)

    def spine_in_base(self) -> TriangleMesh:
        return self.spine_mesh.transformed(self.truth.base_from_spine, Frame.SPINE)

    def virtual_robot(self) -> "PlacedRobot":
        return PlacedRobot(self.model, self.truth.virtual_from_base)


class PlacedRobot:
    """Virtual robot positioned in the viewer world with synchronised joints."""

    def __init__(self, model: ArmModel, world_from_base: RigidTransform):
        self.model = model
        self.world_from_base = world_from_base

    def surface_mesh(self, joint_angles) -> TriangleMesh:
        posed = self.model.surface_mesh(joint_angles)
        return posed.transformed(self.world_from_base, Frame.VIRTUAL)


def _look_at(position, point_at, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """Camera pose whose +z looks from position toward point_at."""
    position = np.asarray(position, dtype=float)
    z = np.asarray(point_at, dtype=float) - position
    z = z / np.linalg.norm(z)
    up = np.asarray(up, dtype=float)
    x = np.cross(up, z)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross((0.0, 1.0, 0.0), z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    rot = np.column_stack([x, y, z])
    return RigidTransform.from_rotation_translation(rot, position)


def build_scenario(seed: int = 0, noise: NoiseModel | None = None, spine_mesh: TriangleMesh | None = None, targets: list[Target] | None = None) -> Scenario:
    """Default desk-scale scene; placements get small seed-keyed jitter."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))

    def jitter(scale_mm: float, scale_deg: float) -> RigidTransform:
        axis = rng.normal(size=3)
        angle = math.radians(rng.uniform(-scale_deg, scale_deg))
        return RigidTransform.from_axis_angle(axis, angle, rng.uniform(-scale_mm, scale_mm, 3))

    # phantom on the table in front of the robot, posterior side up;
    # the mesh spans z in [-144, 12] in its own frame, so the placement
    # centres it under the start pose's guide ray
    spine_up = RigidTransform.from_rotation_translation(
        np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
        (700.0, 30.0, 240.0),
    )
    base_from_spine = jitter(15.0, 2.0) @ spine_up

    base_from_ct = jitter(20.0, 3.0) @ RigidTransform.from_axis_angle((0, 0, 1), math.radians(15.0), (850.0, -150.0, 420.0))
    base_from_camera = jitter(20.0, 3.0) @ _look_at((350.0, -620.0, 980.0), (620.0, 0.0, 400.0))
    base_from_virtual = jitter(25.0, 4.0) @ RigidTransform.from_axis_angle((0, 0, 1), math.radians(-35.0), (150.0, 420.0, 30.0))
    base_from_viewer = jitter(30.0, 4.0) @ _look_at((-250.0, -700.0, 1750.0), (620.0, 0.0, 300.0))

    model = ArmModel()
    start_joints = np.array(START_JOINTS)

    truth = ScenarioTruth(
        base_from_camera=base_from_camera,
        ct_from_camera=base_from_ct.inverse() @ base_from_camera,
        us_from_base=(model.fk(start_joints) @ RigidTransform.from_axis_angle((1, 0, 0), math.radians(180.0), (0.0, 18.0, 46.0))).inverse(),
        spine_from_ct=base_from_spine.inverse() @ base_from_ct,
        base_from_spine=base_from_spine,
        virtual_from_base=base_from_virtual.inverse(),
        virtual_from_viewer=base_from_virtual.inverse() @ base_from_viewer,
        marker_in_ee=RigidTransform.from_axis_angle((0, 1, 0), math.radians(25.0), (0.0, 58.0, 35.0)),
        guide=NeedleGuide((38.0, 0.0, 102.0), (-0.342, 0.0, 0.9397)),
        start_joints=start_joints,
    )
    return Scenario(
        spine_mesh=spine_mesh if spine_mesh is not None else make_lumbar_spine(),
        truth=truth,
        noise=noise or NoiseModel(),
        targets=tuple(targets) if targets is not None else tuple(default_targets()),
        seed=seed,
        scene_box=Aabb((-900.0, -900.0, -20.0), (1100.0, 900.0, 1600.0)),
        model=model,
    )


# ---------------------------------------------------------------------------
# Observations
# ---------------------------------------------------------------------------

def perturb_pose(pose: RigidTransform, rng: np.random.Generator, sigma_t_mm: float, sigma_r_deg: float) -> RigidTransform:
    """Gaussian pose noise: translation offset plus a small rotation about
    the pose's own origin (no lever-arm coupling into translation)."""
    t = pose.t + (rng.normal(0.0, sigma_t_mm, size=3) if sigma_t_mm > 0 else 0.0)
    q = pose.q
    if sigma_r_deg > 0:
        axis = rng.normal(size=3)
        angle = rng.normal(0.0, math.radians(sigma_r_deg))
        q = (RigidTransform.from_axis_angle(axis, angle) @ RigidTransform(pose.q, (0, 0, 0))).q
    return RigidTransform(q, t)


def observe_tracker(scenario: Scenario, state, call_index: int = 0) -> RigidTransform:
    """Marker pose in the camera frame: truth composed from the current
    robot state, perturbed per the scenario's tracker noise."""
    truth = (
        scenario.truth.base_from_camera.inverse()
        @ state.end_effector
        @ scenario.truth.marker_in_ee
    )
    rng = scenario.rng("tracker", call_index)
    return perturb_pose(truth, rng, scenario.noise.tracker_sigma_t_mm, scenario.noise.tracker_sigma_r_deg)


def depth_viewpoints(scenario: Scenario, n_views: int, radius_mm: float = 700.0, height_mm: float = 850.0) -> list[RigidTransform]:
    """Camera poses orbiting the robot, all looking at its mid-column."""
    centre = np.array([0.0, 0.0, 650.0])
    out = []
    for k in range(n_views):
        ang = 2.0 * math.pi * k / max(n_views, 1)
        pos = centre + np.array([radius_mm * math.cos(ang), radius_mm * math.sin(ang), height_mm - centre[2]])
        out.append(_look_at(pos, centre))
    return out


def observe_depth(
    scenario: Scenario,
    state,
    viewpoint: RigidTransform,
    call_index: int = 0,
    grid: tuple[int, int] = (160, 120),
    fov_deg: float = 70.0,
    min_incidence_cos: float = 0.25,
) -> PointCloud:
    """One simulated depth frame of the robot, in the base frame.

    Visibility is ray-sampled (first hit per pixel ray); returns at
    grazing incidence are dropped, as a physical depth camera would;
    depth noise is applied along each view ray; clutter points are
    placed uniformly in the scene box but at least 20 mm away from the
    robot surface.
    """
    robot = scenario.model.surface_mesh(state.joint_angles)
    w, h = grid
    tan = math.tan(math.radians(fov_deg) / 2.0)
    us = np.linspace(-tan, tan, w)
    vs = np.linspace(-tan * h / w, tan * h / w, h)
    uu, vv = np.meshgrid(us, vs)
    dirs_cam = np.stack([uu.ravel(), vv.ravel(), np.ones(w * h)], axis=1)
    dirs_cam /= np.linalg.norm(dirs_cam, axis=1, keepdims=True)
    dirs = viewpoint.rotate(dirs_cam)
    origins = np.tile(viewpoint.t, (w * h, 1))

    ts, tri_idx = raycast_batch(robot, origins, dirs)
    hit = np.isfinite(ts)
    if min_incidence_cos > 0 and hit.any():
        normals = robot.face_normals()[tri_idx[hit]]
        cosines = np.abs(np.einsum("ij,ij->i", normals, dirs[hit]))
        solid = np.zeros_like(hit)
        solid[np.nonzero(hit)[0][cosines > min_incidence_cos]] = True
        hit = solid
    rng = scenario.rng("depth", call_index)
    ts_noisy = ts[hit]
    if scenario.noise.depth_sigma_mm > 0:
        ts_noisy = ts_noisy + rng.normal(0.0, scenario.noise.depth_sigma_mm, size=ts_noisy.shape)
    pts = origins[hit] + ts_noisy[:, None] * dirs[hit]

    frac = scenario.noise.outlier_fraction
    if frac > 0:
        if len(pts):
            n_clutter = int(round(frac / (1.0 - frac) * len(pts)))
        else:
            # nothing of the robot in the frustum: spurious returns only,
            # budgeted against the ray count
            n_clutter = int(round(frac * w * h * 0.05))
        clutter = _clutter_points(scenario, robot, rng, n_clutter)
        pts = np.vstack([pts, clutter]) if len(pts) else clutter
    return PointCloud(pts, None, Frame.BASE)


def _clutter_points(scenario: Scenario, robot: TriangleMesh, rng: np.random.Generator, count: int, clearance_mm: float = 20.0) -> np.ndarray:
    from .registration import sample_virtual

    surface = sample_virtual(robot, None, 4000, seed=scenario.seed).points
    tree = cKDTree(surface)
    box = scenario.scene_box
    out = np.empty((0, 3))
    while len(out) < count:
        batch = rng.uniform(box.min, box.max, size=(max(64, count * 2), 3))
        d, _ = tree.query(batch)
        keep = batch[d > clearance_mm]
        out = np.vstack([out, keep])
    return out[:count]


def simulate_insertion(scenario: Scenario, state, depth_mm: float) -> np.ndarray:
    """Needle tip in the base frame after advancing ``depth_mm`` through
    the guide; uses the true guide offset so chain-estimation errors show
    up as placement error."""
    origin = state.end_effector.apply(scenario.truth.guide.origin)
    direction = state.end_effector.rotate(scenario.truth.guide.direction)
    return origin + depth_mm * direction


def placement_error(tip_position, tip_frame: Frame | str, target: Target, graph: TransformGraph) -> float:
    """Euclidean distance from needle tip to target, in the spine frame."""
    tip_frame = parse_frame(tip_frame)
    tip_spine = graph.query(Frame.SPINE, tip_frame).apply(np.asarray(tip_position, dtype=float))
    return float(np.linalg.norm(tip_spine - target.position))


# ---------------------------------------------------------------------------
# End-to-end helpers: calibration collection, chain estimate, direct trials
# ---------------------------------------------------------------------------

def calibration_joint_state(scenario: Scenario, i: int) -> np.ndarray:
    """Joint state for the i-th calibration sample: a seeded excursion
    around the start pose, clipped to the limits."""
    rng = scenario.rng("calib_pose", i)
    q = np.asarray(scenario.truth.start_joints) + rng.uniform(-0.35, 0.35, size=scenario.model.dof)
    return np.clip(q, -scenario.model.limits_rad, scenario.model.limits_rad)


def collect_pose_pairs(scenario: Scenario, n_pairs: int, tick_offset: int = 0):
    """Simultaneous robot/tracker readings over the calibration excursion."""
    from .calibration import PosePair

    pairs = []
    for i in range(n_pairs):
        state = scenario.model.state(calibration_joint_state(scenario, i), tick_offset + i)
        marker = observe_tracker(scenario, state, tick_offset + i)
        pairs.append(PosePair(state.end_effector.inverse(), marker, i))
    return pairs


def estimate_calibration(scenario: Scenario, n_pairs: int = 30, tick_offset: int = 0):
    """Solve the hand-eye problem on simulated data and derive the chain.

    Returns (graph, solution): the graph holds the estimated camera and
    CT edges plus the given probe-calibration and volume-metadata edges,
    which is everything needle guidance needs.
    """
    from .calibration import derive_ct_robot, derive_ct_ultrasound, solve_handeye

    solution = solve_handeye(collect_pose_pairs(scenario, n_pairs, tick_offset))
    ct_from_base = derive_ct_robot(solution, scenario.truth.ct_from_camera)
    graph = TransformGraph()
    graph.set_edge(Frame.BASE, Frame.CAMERA, solution.base_from_camera)
    graph.set_edge(Frame.CT, Frame.BASE, ct_from_base)
    graph.set_edge(Frame.CT, Frame.US, derive_ct_ultrasound(ct_from_base, scenario.truth.us_from_base))
    graph.set_edge(Frame.SPINE, Frame.CT, scenario.truth.spine_from_ct)
    return graph, solution


def aim_state(scenario: Scenario, est_graph: TransformGraph, target: Target, standoff_mm: float = 180.0):
    """Translate the start pose so the guide ray passes through the
    target as located by the estimated chain.

    Returns (state, insertion depth mm).  Orientation is kept from the
    start pose, which keeps the IK problem benign; the insertion depth
    is the estimated ray distance to the target.
    """
    target_base = est_graph.query(Frame.BASE, Frame.SPINE).apply(target.position)
    start = scenario.model.state(scenario.truth.start_joints)
    rot = start.end_effector
    guide_dir = rot.rotate(scenario.truth.guide.direction)
    flange_t = target_base - standoff_mm * guide_dir - rot.rotate(scenario.truth.guide.origin)
    desired = RigidTransform(rot.q, flange_t)
    q, pos_err, rot_err = scenario.model.solve_ik(desired, start.joint_angles, max_iters=300)
    if pos_err > 0.05 or rot_err > 1e-4:
        raise BadParamsError(f"aiming IK did not converge (pos {pos_err:.3f} mm)")
    state = scenario.model.state(q)
    origin = state.end_effector.apply(scenario.truth.guide.origin)
    direction = state.end_effector.rotate(scenario.truth.guide.direction)
    depth = float(np.dot(target_base - origin, direction))
    return state, depth


def run_direct_trial(scenario: Scenario, target_id: str, n_pairs: int = 30) -> float:
    """Calibrate, aim by the estimated chain, insert, measure in truth."""
    est_graph, _ = estimate_calibration(scenario, n_pairs)
    target = scenario.target_by_id(target_id)
    state, depth = aim_state(scenario, est_graph, target)
    tip = simulate_insertion(scenario, state, depth)
    return placement_error(tip, Frame.BASE, target, scenario.truth.graph(scenario.model))


def fiducial_positions_spine(scenario: Scenario, count: int = 8) -> np.ndarray:
    """Fiducial markers embedded around the phantom, in the spine frame."""
    lo, hi = scenario.spine_mesh.bounds()
    rng = scenario.rng("fiducials")
    return rng.uniform(lo - 15.0, hi + 15.0, size=(count, 3))


def scenario_registration_params(seed: int = 0, threads: int = 1) -> "RegistrationParams":
    """Registration settings tuned for the simulated robot scene and
    frozen: keypoint density equalised at 10 mm, tolerances sized to the
    keypoint spacing, dense virtual sampling for a low ICP bias floor."""
    from .registration import GlobalParams, IcpParams, RegistrationParams

    return RegistrationParams(
        voxel=4.0,
        sample_count=80_000,
        seed=seed,
        threads=threads,
        global_params=GlobalParams(
            descriptor_radius=60.0,
            max_correspondences=600,
            rigidity_tol=20.0,
            inlier_tol=20.0,
            descriptor_voxel=10.0,
        ),
        icp=IcpParams(max_iterations=300, rel_tol=1e-9, trim_fraction=0.1),
    )


def registration_geometry(scenario: Scenario, state):
    """User box around the posed robot plus the sensed-surface virtual mesh.

    The virtual robot is culled to faces a surface sensor could return
    (outward-exposed, not underside-facing) before sampling; the box is
    drawn around the posed robot with a margin, like the operator would.
    """
    from .guidance import cull_hidden_faces

    lo, hi = scenario.model.surface_mesh(state.joint_angles).bounds()
    box = Aabb(lo - 40.0, hi + 40.0)
    virtual_mesh = cull_hidden_faces(
        scenario.virtual_robot().surface_mesh(state.joint_angles), min_upward=-0.45
    )
    return box, virtual_mesh


def registration_inputs(scenario: Scenario, state, n_views: int = 6, grid: tuple[int, int] = (160, 120)):
    """Depth frames plus the geometry from :func:`registration_geometry`."""
    frames = [
        observe_depth(scenario, state, vp, i, grid=grid)
        for i, vp in enumerate(depth_viewpoints(scenario, n_views))
    ]
    box, virtual_mesh = registration_geometry(scenario, state)
    return frames, box, virtual_mesh


def register_scenario(scenario: Scenario, state=None, params=None, graph: TransformGraph | None = None, n_views: int = 6):
    """Full registration pipeline on simulated acquisitions."""
    from .registration import register_robot

    if state is None:
        state = scenario.model.state(scenario.truth.start_joints)
    if params is None:
        params = scenario_registration_params(seed=scenario.seed)
    frames, box, virtual_mesh = registration_inputs(scenario, state, n_views)
    return register_robot(frames, box, virtual_mesh, None, params, graph)


def fiducial_tre(scenario: Scenario, n_pairs: int = 30, count: int = 8) -> float:
    """Target registration error on fiducials through the estimated chain.

    Fiducials are known exactly in the CT frame; their physical positions
    are measured in the base frame through the noisy tracker path.
    """
    from .calibration import evaluate_tre

    est_graph, _ = estimate_calibration(scenario, n_pairs)
    f_spine = fiducial_positions_spine(scenario, count)
    f_ct = scenario.truth.spine_from_ct.inverse().apply(f_spine)
    f_base = scenario.truth.base_from_spine.apply(f_spine)
    noise_rng = scenario.rng("fiducial_meas")
    if scenario.noise.tracker_sigma_t_mm > 0:
        f_base = f_base + noise_rng.normal(0.0, scenario.noise.tracker_sigma_t_mm, size=f_base.shape)
    return evaluate_tre(est_graph, PointCloud(f_ct, frame=Frame.CT), PointCloud(f_base, frame=Frame.BASE))


# ---------------------------------------------------------------------------
# Scenario files
# ---------------------------------------------------------------------------

def save_scenario(path, scenario: Scenario, mesh_ref: str = "procedural:lumbar") -> None:
    doc = {
        "mesh": mesh_ref,
        "seed": scenario.seed,
        "noise": scenario.noise.to_dict(),
        "targets": [t.to_dict() for t in scenario.targets],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_scenario(path) -> Scenario:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise BadParamsError("scenario file must hold a JSON object")
    try:
        noise = NoiseModel(**doc.get("noise", {}))
        seed = int(doc.get("seed", 0))
    except TypeError as exc:
        raise BadParamsError(f"bad noise block: {exc}") from exc
    noise.validate()

    mesh_ref = doc.get("mesh", "procedural:lumbar")
    if isinstance(mesh_ref, str) and mesh_ref.startswith("procedural:"):
        mesh = make_lumbar_spine()
    else:
        mesh_path = Path(mesh_ref)
        if not mesh_path.is_absolute():
            mesh_path = Path(path).parent / mesh_path
        mesh = load_mesh(mesh_path, Frame.SPINE)

    targets = None
    if "targets" in doc:
        targets = [
            Target(t["id"], TargetKind(t["kind"]), t["position"], t.get("level", ""))
            for t in doc["targets"]
        ]
    return build_scenario(seed=seed, noise=noise, spine_mesh=mesh, targets=targets)


def validate_scenario(scenario: Scenario) -> list[str]:
    """Invariant check; returns human-readable problems (empty = valid)."""
    problems: list[str] = []
    try:
        scenario.noise.validate()
    except BadParamsError as exc:
        problems.append(str(exc))
    if len(scenario.spine_mesh) == 0:
        problems.append("spine mesh has no triangles")
    else:
        lo, hi = scenario.spine_mesh.bounds()
        for t in scenario.targets:
            if (t.position < lo - 1e-9).any() or (t.position > hi + 1e-9).any():
                problems.append(f"target {t.id} lies outside the spine mesh bounds")
    try:
        scenario.model.check_limits(scenario.truth.start_joints)
    except Exception as exc:
        problems.append(f"start joints invalid: {exc}")

    graph = scenario.truth.graph(scenario.model)
    for frame in Frame:
        try:
            graph.query(Frame.BASE, frame)
        except NoPathError:
            problems.append(f"ground-truth graph does not reach frame '{frame}'")
    return problems
