"""Virtual-to-real registration: box filter, accumulation, surface
sampling, maximal-clique global alignment, and point-to-point ICP.

The estimated transform always maps real points into the virtual frame;
publishing it as the virtual->base graph edge closes the chain the
viewer needs.  The global stage builds candidate correspondences from
local shape descriptors, keeps the mutually-nearest ones, links pairs
whose point spacing is preserved (rigidity), enumerates maximal cliques
of that compatibility graph in degeneracy order, fits one rigid
hypothesis per clique by cross-covariance decomposition, and keeps the
hypothesis with the most inliers (ties: lower rmse).  ICP then refines
with nearest-neighbour correspondences, optional trimming, and a
closed-form update; its objective is non-increasing by construction and
checked on every run.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    BadParamsError,
    EmptyCloudError,
    EmptyMeshError,
    MixedFramesError,
    NoCliquesError,
    SpineNavError,
    StageError,
)
from .pointcloud import PointCloud, estimate_normals
from .transforms import Frame, RigidTransform, TransformGraph

__all__ = [
    "Aabb",
    "Correspondence",
    "GlobalParams",
    "IcpParams",
    "RegistrationParams",
    "RegistrationResult",
    "filter_by_box",
    "accumulate",
    "sample_virtual",
    "global_register",
    "icp_refine",
    "register_robot",
]


@dataclass(frozen=True)
class Aabb:
    """Closed axis-aligned box in millimetres."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64).reshape(3).copy()
        hi = np.asarray(self.max, dtype=np.float64).reshape(3).copy()
        if (lo > hi).any():
            raise ValueError("box min must not exceed max component-wise")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return ((pts >= self.min) & (pts <= self.max)).all(axis=1)

    @classmethod
    def around(cls, points: np.ndarray, margin: float = 0.0) -> "Aabb":
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return cls(pts.min(axis=0) - margin, pts.max(axis=0) + margin)


@dataclass(frozen=True)
class Correspondence:
    real_index: int
    virtual_index: int
    descriptor_distance: float


@dataclass(frozen=True)
class GlobalParams:
    descriptor_radius: float = 100.0     # neighbourhood for shape histograms, mm
    normal_k: int = 12                   # plane-fit size when normals are missing
    max_correspondences: int = 300       # mutual matches kept, best first
    rigidity_tol: float = 5.0            # pairwise spacing agreement, mm
    inlier_tol: float = 10.0             # hypothesis scoring threshold, mm
    max_cliques: int = 10_000
    min_pair_separation: float = 1.0     # reject near-coincident pairs, mm
    max_descriptor_points: int = 2500    # cap on descriptor-stage keypoints
    descriptor_voxel: float = 0.0        # equalise keypoint density; 0 = off
    angle_bins: int = 8
    radial_bins: int = 4
    alignment_bins: int = 4


@dataclass(frozen=True)
class IcpParams:
    max_iterations: int = 100
    rel_tol: float = 1e-6
    trim_fraction: float = 0.1           # worst matches dropped each iteration


@dataclass(frozen=True)
class RegistrationParams:
    voxel: float = 8.0
    sample_count: int = 4000
    seed: int = 0
    threads: int = 1
    global_params: GlobalParams = field(default_factory=GlobalParams)
    icp: IcpParams = field(default_factory=IcpParams)

    @classmethod
    def from_json(cls, doc: dict | str) -> "RegistrationParams":
        if isinstance(doc, str):
            doc = json.loads(doc)
        if not isinstance(doc, dict):
            raise BadParamsError("registration params must be a JSON object")
        known = dict(doc)
        try:
            gp = GlobalParams(**known.pop("global", {}))
            icp = IcpParams(**known.pop("icp", {}))
            return cls(global_params=gp, icp=icp, **known)
        except TypeError as exc:
            raise BadParamsError(str(exc)) from exc

    def to_json(self) -> dict:
        doc = {
            "voxel": self.voxel,
            "sample_count": self.sample_count,
            "seed": self.seed,
            "threads": self.threads,
            "global": self.global_params.__dict__.copy(),
            "icp": self.icp.__dict__.copy(),
        }
        return doc

    def with_seed(self, seed: int) -> "RegistrationParams":
        return replace(self, seed=seed)


@dataclass(frozen=True)
class RegistrationResult:
    transform: RigidTransform   # maps real points into the virtual frame
    rmse: float                 # over final inlier/retained correspondences, mm
    inlier_count: int
    iterations: int
    converged: bool

    def to_dict(self) -> dict:
        return {
            "transform": self.transform,
            "rmse": self.rmse,
            "inlier_count": self.inlier_count,
            "iterations": self.iterations,
            "converged": self.converged,
        }


# ---------------------------------------------------------------------------
# Cloud preparation
# ---------------------------------------------------------------------------

def filter_by_box(cloud: PointCloud, box: Aabb) -> PointCloud:
    """Keep exactly the points inside the closed box, order preserved."""
    return cloud.select(box.contains(cloud.points))


def accumulate(frames: Sequence[PointCloud], voxel: float) -> PointCloud:
    """Union of frames followed by voxel-grid downsampling.

    One output point per occupied voxel, at the centroid of its members;
    voxels are emitted in order of first appearance so the result is
    deterministic for a given frame order.
    """
    if voxel <= 0:
        raise BadParamsError("voxel size must be positive")
    frames = list(frames)
    if not frames:
        raise EmptyCloudError("no depth frames to accumulate")
    labels = {f.frame for f in frames}
    if len(labels) > 1:
        raise MixedFramesError(f"frames carry different labels: {sorted(str(l) for l in labels)}")
    frame = frames[0].frame

    pts = np.vstack([f.points for f in frames])
    if len(pts) == 0:
        return PointCloud(pts, None, frame)
    with_normals = all(f.normals is not None for f in frames)
    nrm = np.vstack([f.normals for f in frames]) if with_normals else None

    keys = np.floor(pts / voxel).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    counts = np.bincount(inverse, minlength=len(uniq)).astype(np.float64)
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inverse, pts)
    centroids = sums / counts[:, None]

    first_seen = np.full(len(uniq), len(pts), dtype=np.int64)
    np.minimum.at(first_seen, inverse, np.arange(len(pts)))
    order = np.argsort(first_seen, kind="stable")

    out_normals = None
    if with_normals:
        nsums = np.zeros((len(uniq), 3))
        np.add.at(nsums, inverse, nrm)
        lengths = np.linalg.norm(nsums, axis=1, keepdims=True)
        lengths[lengths == 0.0] = 1.0
        out_normals = (nsums / lengths)[order]
    return PointCloud(centroids[order], out_normals, frame)


def sample_virtual(mesh, joint_state=None, count: int = 1000, seed: int = 0) -> PointCloud:
    """Area-weighted surface samples of the virtual robot.

    ``mesh`` may be a TriangleMesh or any object exposing
    ``surface_mesh(joint_state)`` (a posed kinematic model); in the
    latter case the joint state is validated against the model's limits.
    Normals come from the sampled faces; a fixed seed fixes the points.
    """
    if count <= 0:
        raise BadParamsError("sample count must be positive")
    if hasattr(mesh, "surface_mesh"):
        mesh = mesh.surface_mesh(joint_state)
    if len(mesh.triangles) == 0:
        raise EmptyMeshError("virtual mesh has no triangles")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    total = float(areas.sum())
    if total <= 0.0:
        raise EmptyMeshError("virtual mesh has zero surface area")
    faces = rng.choice(len(areas), size=count, p=areas / total)
    u = rng.random(count)
    v = rng.random(count)
    over = u + v > 1.0
    u[over] = 1.0 - u[over]
    v[over] = 1.0 - v[over]
    a, b, c = mesh.corners()
    pts = a[faces] + u[:, None] * (b - a)[faces] + v[:, None] * (c - a)[faces]
    normals = mesh.face_normals()[faces]
    return PointCloud(pts, normals, mesh.frame)


# ---------------------------------------------------------------------------
# Descriptors and correspondences
# ---------------------------------------------------------------------------

def _soft_histogram(values: np.ndarray, bins: int) -> np.ndarray:
    """Linear-interpolation histogram of values in [0, 1]; robust to
    bin-edge jitter, which plain counting is not."""
    x = np.clip(values, 0.0, 1.0) * bins - 0.5
    lo = np.floor(x).astype(np.int64)
    frac = x - lo
    hist = np.zeros(bins)
    np.add.at(hist, np.clip(lo, 0, bins - 1), 1.0 - frac)
    np.add.at(hist, np.clip(lo + 1, 0, bins - 1), frac)
    return hist


def _descriptor_chunk(pts, nrm, neighbours, rows, radius, params: GlobalParams):
    dim = params.angle_bins + params.radial_bins + params.alignment_bins
    out = np.zeros((len(rows), dim))
    two_over_pi = 2.0 / math.pi
    for k, i in enumerate(rows):
        idx = [j for j in neighbours[i] if j != i]
        if not idx:
            continue
        rel = pts[idx] - pts[i]
        dist = np.linalg.norm(rel, axis=1)
        good = dist > 1e-12
        if not good.any():
            continue
        rel = rel[good]
        dist = dist[good]
        unit = rel / dist[:, None]
        nn = nrm[idx][good]

        # normals are unoriented: fold angles into [0, pi/2]
        ang_nn = np.arccos(np.clip(np.abs(nn @ nrm[i]), 0.0, 1.0)) * two_over_pi
        ang_al = np.arccos(np.clip(np.abs(unit @ nrm[i]), 0.0, 1.0)) * two_over_pi

        h1 = _soft_histogram(ang_nn, params.angle_bins)
        h2 = _soft_histogram(dist / radius, params.radial_bins)
        h3 = _soft_histogram(ang_al, params.alignment_bins)
        for block, lo in ((h1, 0), (h2, params.angle_bins), (h3, params.angle_bins + params.radial_bins)):
            s = block.sum()
            if s:
                out[k, lo:lo + len(block)] = block / s
    return out


def compute_descriptors(cloud: PointCloud, params: GlobalParams, threads: int = 1) -> np.ndarray:
    """Histogram descriptor per point: neighbour-normal angles, radial
    distances, and normal-to-offset alignment inside a fixed radius."""
    if cloud.normals is None:
        cloud = estimate_normals(cloud, params.normal_k)
    pts = cloud.points
    nrm = cloud.normals
    tree = cKDTree(pts)
    neighbours = tree.query_ball_point(pts, r=params.descriptor_radius)
    rows = list(range(len(pts)))
    if threads <= 1 or len(pts) < 256:
        return _descriptor_chunk(pts, nrm, neighbours, rows, params.descriptor_radius, params)
    chunks = np.array_split(np.array(rows), threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(
            pool.map(
                lambda ch: _descriptor_chunk(pts, nrm, neighbours, list(ch), params.descriptor_radius, params),
                chunks,
            )
        )
    return np.vstack(parts)


def match_descriptors(desc_real: np.ndarray, desc_virtual: np.ndarray, max_pairs: int) -> list[Correspondence]:
    """Mutual nearest-neighbour matches in descriptor space, best first."""
    d_rv, idx_rv = cKDTree(desc_virtual).query(desc_real)
    _, idx_vr = cKDTree(desc_real).query(desc_virtual)
    out = [
        Correspondence(i, int(idx_rv[i]), float(d_rv[i]))
        for i in range(len(desc_real))
        if idx_vr[idx_rv[i]] == i
    ]
    out.sort(key=lambda c: (c.descriptor_distance, c.real_index))
    return out[:max_pairs]


# ---------------------------------------------------------------------------
# Maximal cliques over the rigidity-compatibility graph
# ---------------------------------------------------------------------------

def compatibility_masks(real_pts, virt_pts, corrs: Sequence[Correspondence], params: GlobalParams) -> list[int]:
    """Adjacency as bitmasks: edge when pair spacing matches within tolerance."""
    p = real_pts[[c.real_index for c in corrs]]
    q = virt_pts[[c.virtual_index for c in corrs]]
    dp = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=2)
    dq = np.linalg.norm(q[:, None, :] - q[None, :, :], axis=2)
    compat = (np.abs(dp - dq) < params.rigidity_tol) & (dp > params.min_pair_separation) & (dq > params.min_pair_separation)
    np.fill_diagonal(compat, False)
    masks = []
    for row in compat:
        bits = 0
        for j in np.nonzero(row)[0]:
            bits |= 1 << int(j)
        masks.append(bits)
    return masks


def _degeneracy_order(masks: list[int]) -> list[int]:
    n = len(masks)
    degree = [m.bit_count() for m in masks]
    alive = set(range(n))
    order = []
    live_mask = (1 << n) - 1
    while alive:
        v = min(alive, key=lambda i: (degree[i], i))
        order.append(v)
        alive.remove(v)
        live_mask &= ~(1 << v)
        for u in alive:
            if masks[u] >> v & 1:
                degree[u] -= 1
    return order


def enumerate_max_cliques(masks: list[int], max_cliques: int, min_size: int = 3, step_cap: int | None = None):
    """Maximal cliques of size >= min_size, degeneracy-ordered, capped.

    Bron-Kerbosch with pivoting runs once per vertex of the degeneracy
    order; enumeration stops after ``max_cliques`` cliques or after the
    step budget is exhausted, keeping worst-case cost bounded.
    """
    n = len(masks)
    if n == 0:
        return []
    order = _degeneracy_order(masks)
    position = {v: k for k, v in enumerate(order)}
    cliques: list[list[int]] = []
    budget = step_cap if step_cap is not None else max(50_000, 20 * max_cliques)
    steps = 0

    def bits(x: int):
        while x:
            low = x & -x
            yield low.bit_length() - 1
            x ^= low

    def expand(r: list[int], p: int, x: int) -> bool:
        nonlocal steps
        steps += 1
        if len(cliques) >= max_cliques or steps > budget:
            return False
        if p == 0 and x == 0:
            if len(r) >= min_size:
                cliques.append(sorted(r))
            return True
        pivot_pool = p | x
        pivot = max(bits(pivot_pool), key=lambda u: (p & masks[u]).bit_count())
        for v in bits(p & ~masks[pivot]):
            if not expand(r + [v], p & masks[v], x & masks[v]):
                return False
            p &= ~(1 << v)
            x |= 1 << v
        return True

    for v in order:
        later = 0
        earlier = 0
        for u in bits(masks[v]):
            if position[u] > position[v]:
                later |= 1 << u
            else:
                earlier |= 1 << u
        if not expand([v], later, earlier):
            break
    return cliques


def rigid_fit(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform src -> dst by SVD of the
    cross-covariance, with the usual reflection fix."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    r = vt.T @ u.T
    if np.linalg.det(r) < 0:
        vt = vt.copy()
        vt[-1, :] *= -1
        r = vt.T @ u.T
    t = cd - r @ cs
    return RigidTransform.from_rotation_translation(r, t)


def _score_cliques(cliques: list[list[int]], cand_p: np.ndarray, cand_q: np.ndarray, inlier_tol: float, chunk: int = 1024):
    """Fit one rigid hypothesis per clique and score all of them against
    the candidate set; vectorised by grouping cliques of equal size.

    Returns (count, rmse, rotation (3,3), translation (3,)) of the best
    hypothesis: most inliers, ties by lower rmse, then enumeration order.
    """
    best = None  # (count, rmse, order_index, R, t)
    by_size: dict[int, list[int]] = {}
    for pos, clique in enumerate(cliques):
        by_size.setdefault(len(clique), []).append(pos)

    for size in sorted(by_size):
        positions = by_size[size]
        for s in range(0, len(positions), chunk):
            pos_block = positions[s:s + chunk]
            idx = np.array([cliques[p] for p in pos_block])          # (H, k)
            src = cand_p[idx]                                        # (H, k, 3)
            dst = cand_q[idx]
            cs = src.mean(axis=1, keepdims=True)
            cd = dst.mean(axis=1, keepdims=True)
            h = np.einsum("hki,hkj->hij", src - cs, dst - cd)
            u, _, vt = np.linalg.svd(h)
            r = np.einsum("hij,hki->hjk", vt, u)                     # vt^T @ u^T for each h
            bad = np.linalg.det(r) < 0
            if bad.any():
                vt = vt.copy()
                vt[bad, -1, :] *= -1
                r[bad] = np.einsum("hij,hki->hjk", vt[bad], u[bad])
            t = cd[:, 0, :] - np.einsum("hij,hj->hi", r, cs[:, 0, :])

            moved = np.einsum("hij,nj->hni", r, cand_p) + t[:, None, :]
            d2 = np.sum((moved - cand_q[None, :, :]) ** 2, axis=2)
            inl = d2 < inlier_tol * inlier_tol
            counts = inl.sum(axis=1)
            sums = np.where(inl, d2, 0.0).sum(axis=1)
            with np.errstate(invalid="ignore", divide="ignore"):
                rmses = np.sqrt(sums / counts)
            for k, pos in enumerate(pos_block):
                c = int(counts[k])
                if c == 0:
                    continue
                key = (-c, float(rmses[k]), pos)
                if best is None or key < (-best[0], best[1], best[2]):
                    best = (c, float(rmses[k]), pos, r[k], t[k])
    if best is None:
        return None
    return best[0], best[1], best[3], best[4]


def _evaluate(transform: RigidTransform, real_pts: np.ndarray, virt_tree: cKDTree, inlier_tol: float):
    moved = transform.apply(real_pts)
    d, _ = virt_tree.query(moved)
    inliers = d < inlier_tol
    count = int(np.count_nonzero(inliers))
    rmse = float(np.sqrt(np.mean(d[inliers] ** 2))) if count else math.inf
    return rmse, count


def _keypoint_indices(cloud: PointCloud, params: GlobalParams) -> np.ndarray:
    """Indices of descriptor keypoints: optionally snapped to a voxel
    grid so both clouds present the same sampling density, then capped
    by even striding."""
    n = len(cloud)
    idx = np.arange(n)
    if params.descriptor_voxel > 0 and n:
        centroids = accumulate([PointCloud(cloud.points)], params.descriptor_voxel).points
        _, nearest = cKDTree(cloud.points).query(centroids)
        idx = np.unique(nearest)
    if len(idx) > params.max_descriptor_points:
        keep = np.unique(np.linspace(0, len(idx) - 1, params.max_descriptor_points).round().astype(np.int64))
        idx = idx[keep]
    return idx


def global_register(real: PointCloud, virtual: PointCloud, params: GlobalParams | None = None, threads: int = 1) -> RegistrationResult:
    """Coarse alignment from descriptor matches and clique hypotheses.

    Descriptors and matching run on a keypoint subset (density-equalised
    when ``descriptor_voxel`` is set, capped at
    ``max_descriptor_points``); hypothesis scoring and the reported
    inlier statistics always use the full clouds.
    """
    params = params or GlobalParams()
    if len(real) == 0 or len(virtual) == 0:
        raise EmptyCloudError("both clouds must be non-empty")
    r_idx = _keypoint_indices(real, params)
    v_idx = _keypoint_indices(virtual, params)
    # descriptors need identically produced normals on both sides; face
    # normals are sharper than plane fits, so re-estimate on the keypoints
    real_kp = estimate_normals(real.select(r_idx), params.normal_k)
    virt_kp = estimate_normals(virtual.select(v_idx), params.normal_k)

    desc_r = compute_descriptors(real_kp, params, threads)
    desc_v = compute_descriptors(virt_kp, params, threads)
    corrs = [
        Correspondence(int(r_idx[c.real_index]), int(v_idx[c.virtual_index]), c.descriptor_distance)
        for c in match_descriptors(desc_r, desc_v, params.max_correspondences)
    ]
    if len(corrs) < 3:
        raise NoCliquesError(f"only {len(corrs)} candidate correspondences")

    masks = compatibility_masks(real.points, virtual.points, corrs, params)
    cliques = enumerate_max_cliques(masks, params.max_cliques)
    if not cliques:
        raise NoCliquesError("no clique of size >= 3 in the compatibility graph")

    cand_p = real.points[[c.real_index for c in corrs]]
    cand_q = virtual.points[[c.virtual_index for c in corrs]]
    best = _score_cliques(cliques, cand_p, cand_q, params.inlier_tol)
    if best is None:
        raise NoCliquesError("no clique hypothesis produced inliers")

    # polish the winner: refit on its candidate inliers while tightening
    # the tolerance, so exact matches dominate offset-but-compatible ones
    transform = RigidTransform.from_rotation_translation(best[2], best[3])
    tol = params.inlier_tol
    for _ in range(4):
        d = np.linalg.norm(transform.apply(cand_p) - cand_q, axis=1)
        inl = d < tol
        if int(np.count_nonzero(inl)) < 6:
            break
        transform = rigid_fit(cand_p[inl], cand_q[inl])
        tol = tol / 2.0

    virt_tree = cKDTree(virtual.points)
    rmse, count = _evaluate(transform, real.points, virt_tree, params.inlier_tol)
    return RegistrationResult(transform, rmse, count, iterations=len(cliques), converged=True)


# ---------------------------------------------------------------------------
# ICP refinement
# ---------------------------------------------------------------------------

def icp_refine(real: PointCloud, virtual: PointCloud, init: RigidTransform | None = None, params: IcpParams | None = None) -> RegistrationResult:
    """Point-to-point ICP minimising summed squared match distances.

    Each pass matches every real point to its nearest virtual point,
    drops the worst ``trim_fraction``, and refits the full transform in
    closed form.  The objective over the retained set never increases;
    non-convergence is reported through ``converged=False``, never as an
    exception.
    """
    params = params or IcpParams()
    if len(real) == 0 or len(virtual) == 0:
        raise EmptyCloudError("both clouds must be non-empty")
    if not (0.0 <= params.trim_fraction < 1.0):
        raise BadParamsError("trim_fraction must lie in [0, 1)")
    src = real.points
    tree = cKDTree(virtual.points)
    keep_n = max(3, len(src) - int(math.floor(params.trim_fraction * len(src))))

    transform = init if init is not None else RigidTransform.identity()
    prev = None
    rmse = math.inf
    converged = False
    fits = 0
    while True:
        moved = transform.apply(src)
        d, idx = tree.query(moved)
        keep = np.argsort(d, kind="stable")[:keep_n]
        rmse = float(np.sqrt(np.mean(d[keep] ** 2)))
        assert prev is None or rmse <= prev + 1e-9 * max(1.0, prev), "ICP objective increased"
        if prev is not None and (prev - rmse) <= params.rel_tol * max(prev, 1e-12):
            converged = True
            break
        if fits >= params.max_iterations:
            break
        transform = rigid_fit(src[keep], virtual.points[idx[keep]])
        prev = rmse
        fits += 1
    return RegistrationResult(transform, rmse, int(keep_n), iterations=fits, converged=converged)


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------

@contextmanager
def _stage(name: str):
    try:
        yield
    except SpineNavError as exc:
        raise StageError(name, exc) from exc


def register_robot(
    real_frames: Sequence[PointCloud],
    box: Aabb,
    virtual_mesh,
    joint_state=None,
    params: RegistrationParams | None = None,
    graph: TransformGraph | None = None,
) -> RegistrationResult:
    """filter -> accumulate -> sample -> global -> icp, then publish.

    On success the estimated transform is written to the graph as the
    edge virtual->base (real-cloud frame), closing the viewer chain.
    Stage failures surface as StageError wrapping the stage name.
    """
    params = params or RegistrationParams()
    with _stage("filter"):
        filtered = [filter_by_box(f, box) for f in real_frames]
        if sum(len(f) for f in filtered) == 0:
            raise EmptyCloudError("bounding box removed every point")
    with _stage("accumulate"):
        real = accumulate(filtered, params.voxel)
    with _stage("sample"):
        virtual = sample_virtual(virtual_mesh, joint_state, params.sample_count, params.seed)
    with _stage("global"):
        coarse = global_register(real, virtual, params.global_params, params.threads)
    with _stage("icp"):
        result = icp_refine(real, virtual, coarse.transform, params.icp)
    if graph is not None:
        src = virtual.frame if virtual.frame is not None else Frame.VIRTUAL
        dst = real.frame if real.frame is not None else Frame.BASE
        graph.set_edge(src, dst, result.transform)
    return result
