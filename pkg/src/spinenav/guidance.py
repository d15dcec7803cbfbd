"""Needle-guide rays, triangle meshes, and ray-mesh intersection.

The guide axis is a ray fixed in the end-effector frame; expressed in
the robot base frame it reads r(t) = o + t*d with t >= 0.  Casting that
ray against the spine mesh and keeping the smallest positive parameter
gives the predicted contact point; when nothing is hit the result says
so explicitly and callers must render nothing.

Meshes are indexed triangle sets in millimetres with a lazily built
bounding-volume hierarchy (binary, axis-aligned boxes, binned
surface-area-heuristic splits).  STL (binary and ASCII) and OBJ
(vertices + faces) loading is provided; triangles with area below
1e-9 mm^2 are dropped at load time and the dropped count is reported on
the mesh.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyMeshError
from .transforms import Frame, RigidTransform, TransformGraph, parse_frame

__all__ = [
    "Ray",
    "HitResult",
    "TriangleMesh",
    "Bvh",
    "intersect_triangle",
    "raycast",
    "raycast_brute",
    "raycast_batch",
    "predict_hit",
    "load_stl",
    "save_stl",
    "stl_bytes",
    "load_obj",
    "load_mesh",
    "make_box",
    "make_cylinder",
    "merge_meshes",
    "cull_hidden_faces",
]

PARALLEL_EPS = 1e-9   # Moller-Trumbore determinant cutoff
T_FLOOR_MM = 1e-6     # reject hits closer than this along the ray
TIE_EPS = 1e-9        # hits within this t-band tie-break by triangle index
MIN_TRIANGLE_AREA = 1e-9  # mm^2, degenerate-cleaning threshold


@dataclass(frozen=True)
class Ray:
    """A unit-direction ray with millimetre origin in a named frame."""

    origin: np.ndarray
    direction: np.ndarray
    frame: Frame | None = None

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3).copy()
        direction = np.asarray(self.direction, dtype=np.float64).reshape(3).copy()
        n = float(np.linalg.norm(direction))
        if n == 0.0 or not math.isfinite(n):
            raise ValueError("ray direction must be a non-zero finite vector")
        direction = direction / n
        origin.setflags(write=False)
        direction.setflags(write=False)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)
        if self.frame is not None:
            object.__setattr__(self, "frame", parse_frame(self.frame))

    def point_at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class HitResult:
    """Raycast outcome: either a hit at parameter t or an explicit miss."""

    hit: bool
    t: float | None = None
    point: np.ndarray | None = None
    triangle: int | None = None

    @classmethod
    def miss(cls) -> "HitResult":
        return cls(False)

    def to_dict(self) -> dict:
        if not self.hit:
            return {"hit": False}
        return {
            "hit": True,
            "t": float(self.t),
            "point": [float(v) for v in self.point],
            "triangle": int(self.triangle),
        }


# ---------------------------------------------------------------------------
# Triangle mesh
# ---------------------------------------------------------------------------

@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    frame: Frame | None = None
    degenerate_dropped: int = 0
    _bvh: "Bvh | None" = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise ValueError("triangle indices out of range")
        if self.frame is not None:
            self.frame = parse_frame(self.frame)

    @classmethod
    def from_arrays(cls, vertices, triangles, frame=None, clean: bool = True) -> "TriangleMesh":
        mesh = cls(vertices, triangles, frame)
        if clean and len(mesh.triangles):
            areas = mesh.face_areas()
            keep = areas >= MIN_TRIANGLE_AREA
            dropped = int(np.count_nonzero(~keep))
            if dropped:
                mesh = cls(mesh.vertices, mesh.triangles[keep], frame)
                mesh.degenerate_dropped = dropped
        return mesh

    def __len__(self) -> int:
        return len(self.triangles)

    def corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        v = self.vertices
        t = self.triangles
        return v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]

    def face_normals(self, normalized: bool = True) -> np.ndarray:
        a, b, c = self.corners()
        n = np.cross(b - a, c - a)
        if normalized:
            lengths = np.linalg.norm(n, axis=1, keepdims=True)
            lengths[lengths == 0.0] = 1.0
            n = n / lengths
        return n

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(normalized=False), axis=1)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self.vertices) == 0:
            raise EmptyMeshError("mesh has no vertices")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def transformed(self, tf: RigidTransform, frame: Frame | None = None) -> "TriangleMesh":
        out = TriangleMesh(tf.apply(self.vertices), self.triangles.copy(), frame or self.frame)
        out.degenerate_dropped = self.degenerate_dropped
        return out

    @property
    def bvh(self) -> "Bvh":
        if self._bvh is None:
            self._bvh = Bvh.build(self)
        return self._bvh


def merge_meshes(meshes: list[TriangleMesh], frame: Frame | None = None) -> TriangleMesh:
    """Concatenate meshes into one triangle soup."""
    verts = []
    tris = []
    offset = 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        offset += len(m.vertices)
    return TriangleMesh(np.vstack(verts), np.vstack(tris), frame)


def cull_hidden_faces(mesh: TriangleMesh, min_upward: float | None = None) -> TriangleMesh:
    """Drop faces a surface sensor can never return.

    A face survives when a ray leaving its centroid along the outward
    normal escapes the mesh (buried union faces fail this) and, when
    ``min_upward`` is given, when its normal's vertical component stays
    above that bound (undersides are invisible to cameras that orbit
    above the scene).
    """
    if len(mesh.triangles) == 0:
        return mesh
    a, b, c = mesh.corners()
    centroids = (a + b + c) / 3.0
    normals = mesh.face_normals()
    ts, _ = raycast_batch(mesh, centroids + 0.05 * normals, normals)
    keep = ~np.isfinite(ts)
    if min_upward is not None:
        keep &= normals[:, 2] > min_upward
    out = TriangleMesh(mesh.vertices, mesh.triangles[keep], mesh.frame)
    out.degenerate_dropped = mesh.degenerate_dropped
    return out


def make_box(center, size, frame: Frame | None = None) -> TriangleMesh:
    """Axis-aligned box as 12 triangles with outward winding."""
    cx, cy, cz = (float(v) for v in center)
    hx, hy, hz = (float(v) / 2.0 for v in size)
    v = np.array(
        [
            [cx - hx, cy - hy, cz - hz],
            [cx + hx, cy - hy, cz - hz],
            [cx + hx, cy + hy, cz - hz],
            [cx - hx, cy + hy, cz - hz],
            [cx - hx, cy - hy, cz + hz],
            [cx + hx, cy - hy, cz + hz],
            [cx + hx, cy + hy, cz + hz],
            [cx - hx, cy + hy, cz + hz],
        ]
    )
    t = np.array(
        [
            [0, 2, 1], [0, 3, 2],  # bottom (-z)
            [4, 5, 6], [4, 6, 7],  # top (+z)
            [0, 1, 5], [0, 5, 4],  # -y
            [2, 3, 7], [2, 7, 6],  # +y
            [1, 2, 6], [1, 6, 5],  # +x
            [3, 0, 4], [3, 4, 7],  # -x
        ]
    )
    return TriangleMesh(v, t, frame)


def make_cylinder(radius: float, height: float, segments: int = 12, center=(0.0, 0.0, 0.0), frame: Frame | None = None) -> TriangleMesh:
    """Closed cylinder along z, centred at ``center``."""
    cx, cy, cz = (float(v) for v in center)
    zs = (cz - height / 2.0, cz + height / 2.0)
    ring = [
        (cx + radius * math.cos(2 * math.pi * k / segments), cy + radius * math.sin(2 * math.pi * k / segments))
        for k in range(segments)
    ]
    verts = [(x, y, z) for z in zs for x, y in ring]
    verts.append((cx, cy, zs[0]))
    verts.append((cx, cy, zs[1]))
    bottom_centre = len(verts) - 2
    top_centre = len(verts) - 1
    tris = []
    for k in range(segments):
        k2 = (k + 1) % segments
        lo, lo2 = k, k2
        hi, hi2 = segments + k, segments + k2
        tris.append([lo, lo2, hi2])
        tris.append([lo, hi2, hi])
        tris.append([bottom_centre, lo2, lo])
        tris.append([top_centre, hi, hi2])
    return TriangleMesh(np.array(verts), np.array(tris), frame)


# ---------------------------------------------------------------------------
# STL / OBJ loading
# ---------------------------------------------------------------------------

def _weld(points: np.ndarray, frame: Frame | None) -> TriangleMesh:
    """Index a triangle soup (N*3, 3) by merging coincident vertices."""
    rounded = np.round(points, 6)
    verts: dict[tuple, int] = {}
    index = np.empty(len(points), dtype=np.int64)
    coords = []
    for i, key in enumerate(map(tuple, rounded)):
        slot = verts.get(key)
        if slot is None:
            slot = len(coords)
            verts[key] = slot
            coords.append(points[i])
        index[i] = slot
    tris = index.reshape(-1, 3)
    return TriangleMesh.from_arrays(np.array(coords), tris, frame)


def load_stl(path, frame: Frame | None = None) -> TriangleMesh:
    data = Path(path).read_bytes()
    if len(data) >= 84:
        (count,) = struct.unpack_from("<I", data, 80)
        if 84 + 50 * count == len(data):
            raw = np.frombuffer(data, dtype=np.uint8, count=50 * count, offset=84)
            facets = raw.reshape(count, 50)[:, :48].copy().view("<f4").reshape(count, 4, 3)
            soup = facets[:, 1:, :].reshape(-1, 3).astype(np.float64)
            return _weld(soup, frame)
    text = data.decode("ascii", "replace")
    if not text.lstrip().startswith("solid"):
        raise ValueError(f"{path}: neither binary nor ASCII STL")
    soup = []
    for line in text.splitlines():
        tokens = line.split()
        if len(tokens) == 4 and tokens[0] == "vertex":
            soup.append([float(tokens[1]), float(tokens[2]), float(tokens[3])])
    if len(soup) % 3 != 0:
        raise ValueError(f"{path}: ASCII STL vertex count not divisible by 3")
    if not soup:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), frame)
    return _weld(np.array(soup), frame)


def stl_bytes(mesh: TriangleMesh) -> bytes:
    a, b, c = mesh.corners()
    normals = mesh.face_normals()
    count = len(mesh.triangles)
    body = np.zeros((count, 50), dtype=np.uint8)
    block = np.empty((count, 12), dtype="<f4")
    block[:, 0:3] = normals
    block[:, 3:6] = a
    block[:, 6:9] = b
    block[:, 9:12] = c
    body[:, :48] = block.view(np.uint8).reshape(count, 48)
    return b"\x00" * 80 + struct.pack("<I", count) + body.tobytes()


def save_stl(path, mesh: TriangleMesh) -> None:
    Path(path).write_bytes(stl_bytes(mesh))


def load_obj(path, frame: Frame | None = None) -> TriangleMesh:
    verts = []
    tris = []
    for line in Path(path).read_text().splitlines():
        tokens = line.split()
        if not tokens:
            continue
        if tokens[0] == "v":
            verts.append([float(tokens[1]), float(tokens[2]), float(tokens[3])])
        elif tokens[0] == "f":
            ids = [int(tok.split("/")[0]) for tok in tokens[1:]]
            ids = [i - 1 if i > 0 else len(verts) + i for i in ids]
            for k in range(1, len(ids) - 1):  # fan triangulation
                tris.append([ids[0], ids[k], ids[k + 1]])
    return TriangleMesh.from_arrays(np.array(verts, dtype=np.float64).reshape(-1, 3),
                                    np.array(tris, dtype=np.int64).reshape(-1, 3), frame)


def load_mesh(path, frame: Frame | None = None) -> TriangleMesh:
    suffix = Path(path).suffix.lower()
    if suffix == ".stl":
        return load_stl(path, frame)
    if suffix == ".obj":
        return load_obj(path, frame)
    raise ValueError(f"unsupported mesh format: {suffix!r}")


# ---------------------------------------------------------------------------
# Moller-Trumbore
# ---------------------------------------------------------------------------

def intersect_triangle(ray: Ray, v0, v1, v2, eps: float = PARALLEL_EPS):
    """Ray/triangle test returning (t, u, v) or None.

    Hits on the closed interior count (u, v >= -eps, u+v <= 1+eps);
    rays parallel to the triangle plane (|det| < eps) miss, as do
    intersections at or behind the origin (t <= eps).
    """
    v0 = np.asarray(v0, dtype=float)
    e1 = np.asarray(v1, dtype=float) - v0
    e2 = np.asarray(v2, dtype=float) - v0
    d = ray.direction
    pvec = np.cross(d, e2)
    det = float(np.dot(e1, pvec))
    if abs(det) < eps:
        return None
    inv = 1.0 / det
    tvec = ray.origin - v0
    u = float(np.dot(tvec, pvec)) * inv
    if u < -eps or u > 1.0 + eps:
        return None
    qvec = np.cross(tvec, e1)
    v = float(np.dot(d, qvec)) * inv
    if v < -eps or u + v > 1.0 + eps:
        return None
    t = float(np.dot(e2, qvec)) * inv
    if t <= eps:
        return None
    return t, u, v


def _mt_batch(origin, direction, v0, e1, e2, t_floor, eps=PARALLEL_EPS):
    """Vectorised Moller-Trumbore over a triangle batch; returns t array with inf misses."""
    pvec = np.cross(direction, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) >= eps
    safe_det = np.where(ok, det, 1.0)
    inv = 1.0 / safe_det
    tvec = origin - v0
    u = np.einsum("ij,ij->i", tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    v = qvec @ direction * inv
    t = np.einsum("ij,ij->i", e2, qvec) * inv
    ok &= (u >= -eps) & (v >= -eps) & (u + v <= 1.0 + eps) & (t > t_floor)
    return np.where(ok, t, np.inf)


class _Candidates:
    """Tracks the smallest-t hit with index tie-breaking inside a t band."""

    __slots__ = ("t_min", "items", "tie")

    def __init__(self, tie: float = TIE_EPS):
        self.t_min = math.inf
        self.items: list[tuple[float, int]] = []
        self.tie = tie

    def offer(self, t: float, idx: int) -> None:
        if t < self.t_min:
            self.t_min = t
            self.items = [(ti, ii) for ti, ii in self.items if ti <= t + self.tie]
        if t <= self.t_min + self.tie:
            self.items.append((t, idx))

    def best(self):
        if not self.items:
            return None
        return min(self.items, key=lambda pair: pair[1])


# ---------------------------------------------------------------------------
# BVH
# ---------------------------------------------------------------------------

_SAH_BINS = 8
_LEAF_SIZE = 4


class Bvh:
    """Binary AABB hierarchy with binned surface-area-heuristic splits."""

    def __init__(self, nodes_min, nodes_max, left, right, start, count, tri_ids, v0, e1, e2):
        self.nodes_min = nodes_min
        self.nodes_max = nodes_max
        self.left = left
        self.right = right
        self.start = start
        self.count = count
        self.tri_ids = tri_ids
        self._v0 = v0
        self._e1 = e1
        self._e2 = e2

    @classmethod
    def build(cls, mesh: TriangleMesh, leaf_size: int = _LEAF_SIZE) -> "Bvh":
        if len(mesh.triangles) == 0:
            raise EmptyMeshError("cannot build a BVH over an empty mesh")
        a, b, c = mesh.corners()
        tri_min = np.minimum(np.minimum(a, b), c)
        tri_max = np.maximum(np.maximum(a, b), c)
        centroids = (tri_min + tri_max) * 0.5

        order = np.arange(len(mesh.triangles))
        nodes_min: list[np.ndarray] = []
        nodes_max: list[np.ndarray] = []
        left: list[int] = []
        right: list[int] = []
        start: list[int] = []
        count: list[int] = []

        def surface(lo: np.ndarray, hi: np.ndarray) -> float:
            d = np.maximum(hi - lo, 0.0)
            return float(2.0 * (d[0] * d[1] + d[1] * d[2] + d[2] * d[0]))

        def build_node(s: int, e: int, depth: int = 0) -> int:
            idx = order[s:e]
            lo = tri_min[idx].min(axis=0)
            hi = tri_max[idx].max(axis=0)
            me = len(nodes_min)
            nodes_min.append(lo)
            nodes_max.append(hi)
            left.append(-1)
            right.append(-1)
            start.append(s)
            count.append(e - s)
            n = e - s
            if n <= leaf_size or depth >= 48:
                return me

            cent = centroids[idx]
            best = None  # (cost, axis, threshold)
            for axis in range(3):
                cmin = cent[:, axis].min()
                cmax = cent[:, axis].max()
                if cmax - cmin < 1e-12:
                    continue
                edges = np.linspace(cmin, cmax, _SAH_BINS + 1)
                bins = np.clip(np.searchsorted(edges, cent[:, axis], side="right") - 1, 0, _SAH_BINS - 1)
                for cut in range(1, _SAH_BINS):
                    mask = bins < cut
                    nl = int(np.count_nonzero(mask))
                    if nl == 0 or nl == n:
                        continue
                    li = idx[mask]
                    ri = idx[~mask]
                    cost = surface(tri_min[li].min(0), tri_max[li].max(0)) * nl + \
                        surface(tri_min[ri].min(0), tri_max[ri].max(0)) * (n - nl)
                    if best is None or cost < best[0]:
                        best = (cost, axis, edges[cut])
            if best is None:
                return me  # all centroids coincide: keep as leaf

            _, axis, threshold = best
            mask = cent[:, axis] < threshold
            order[s:e] = np.concatenate([idx[mask], idx[~mask]])  # stable partition
            mid = s + int(np.count_nonzero(mask))
            left[me] = build_node(s, mid, depth + 1)
            right[me] = build_node(mid, e, depth + 1)
            return me

        build_node(0, len(order))
        v0 = np.ascontiguousarray(a[order])
        e1 = np.ascontiguousarray(b[order] - a[order])
        e2 = np.ascontiguousarray(c[order] - a[order])
        return cls(
            [tuple(v) for v in nodes_min],
            [tuple(v) for v in nodes_max],
            left,
            right,
            start,
            count,
            order,
            v0,
            e1,
            e2,
        )

    def __len__(self) -> int:
        return len(self.left)

    def validate_boxes(self) -> bool:
        """Every node box contains the boxes of all its descendant triangles."""
        v0, e1, e2 = self._v0, self._e1, self._e2
        pts = np.stack([v0, v0 + e1, v0 + e2], axis=1)
        ok = True
        for i in range(len(self.left)):
            stack_ids = [i]
            lo = np.array(self.nodes_min[i])
            hi = np.array(self.nodes_max[i])
            while stack_ids:
                n = stack_ids.pop()
                if self.left[n] < 0:
                    s, c = self.start[n], self.count[n]
                    seg = pts[s:s + c].reshape(-1, 3)
                    if (seg < lo - 1e-9).any() or (seg > hi + 1e-9).any():
                        ok = False
                else:
                    stack_ids.append(self.left[n])
                    stack_ids.append(self.right[n])
        return ok

    def _box_entry(self, node: int, o, inv_d, d, t_max: float):
        """Slab test; returns entry parameter or None when the box is missed."""
        lo = self.nodes_min[node]
        hi = self.nodes_max[node]
        t0 = 0.0
        t1 = t_max
        for axis in range(3):
            da = d[axis]
            oa = o[axis]
            if da == 0.0:
                if oa < lo[axis] or oa > hi[axis]:
                    return None
                continue
            inv = inv_d[axis]
            ta = (lo[axis] - oa) * inv
            tb = (hi[axis] - oa) * inv
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
            if t0 > t1:
                return None
        return t0

    def raycast(self, origin, direction, t_floor: float = T_FLOOR_MM):
        """Smallest-positive-t hit as (t, triangle_id) or None."""
        o = (float(origin[0]), float(origin[1]), float(origin[2]))
        d = (float(direction[0]), float(direction[1]), float(direction[2]))
        inv_d = tuple((1.0 / v if v != 0.0 else math.inf) for v in d)
        o_arr = np.asarray(origin, dtype=float)
        d_arr = np.asarray(direction, dtype=float)

        cands = _Candidates()
        stack = [0]
        while stack:
            node = stack.pop()
            entry = self._box_entry(node, o, inv_d, d, cands.t_min + TIE_EPS)
            if entry is None:
                continue
            lchild = self.left[node]
            if lchild < 0:
                s = self.start[node]
                c = self.count[node]
                ts = _mt_batch(o_arr, d_arr, self._v0[s:s + c], self._e1[s:s + c], self._e2[s:s + c], t_floor)
                for k in np.nonzero(np.isfinite(ts))[0]:
                    cands.offer(float(ts[k]), int(self.tri_ids[s + k]))
                continue
            rchild = self.right[node]
            # near child first so far hits prune early
            el = self._box_entry(lchild, o, inv_d, d, cands.t_min + TIE_EPS)
            er = self._box_entry(rchild, o, inv_d, d, cands.t_min + TIE_EPS)
            if el is None and er is None:
                continue
            if el is None:
                stack.append(rchild)
            elif er is None:
                stack.append(lchild)
            elif el <= er:
                stack.append(rchild)
                stack.append(lchild)
            else:
                stack.append(lchild)
                stack.append(rchild)
        best = cands.best()
        if best is None:
            return None
        t, idx = best
        return t, idx


def raycast_brute(mesh: TriangleMesh, origin, direction, t_floor: float = T_FLOOR_MM):
    """Exhaustive scan over all triangles; oracle twin of the BVH path."""
    if len(mesh.triangles) == 0:
        return None
    a, b, c = mesh.corners()
    o = np.asarray(origin, dtype=float)
    d = np.asarray(direction, dtype=float)
    ts = _mt_batch(o, d, a, b - a, c - a, t_floor)
    finite = np.nonzero(np.isfinite(ts))[0]
    if len(finite) == 0:
        return None
    cands = _Candidates()
    for k in finite:
        cands.offer(float(ts[k]), int(k))
    t, idx = cands.best()
    return t, idx


def raycast_batch(mesh: TriangleMesh, origins: np.ndarray, directions: np.ndarray, t_floor: float = T_FLOOR_MM, chunk: int = 256):
    """Vectorised first-hit query for many rays; returns (t, triangle) arrays.

    Misses carry t = inf and triangle = -1.  Used by the depth-camera
    simulation where thousands of rays share one mesh.
    """
    a, b, c = mesh.corners()
    e1 = b - a
    e2 = c - a
    n_rays = len(origins)
    out_t = np.full(n_rays, np.inf)
    out_idx = np.full(n_rays, -1, dtype=np.int64)
    for s in range(0, n_rays, chunk):
        o = origins[s:s + chunk][:, None, :]
        d = directions[s:s + chunk][:, None, :]
        pvec = np.cross(d, e2[None, :, :])
        det = np.einsum("rtj,tj->rt", pvec, e1)
        ok = np.abs(det) >= PARALLEL_EPS
        inv = 1.0 / np.where(ok, det, 1.0)
        tvec = o - a[None, :, :]
        u = np.einsum("rtj,rtj->rt", tvec, pvec) * inv
        qvec = np.cross(tvec, e1[None, :, :])
        v = np.einsum("rtj,rj->rt", qvec, directions[s:s + chunk]) * inv
        t = np.einsum("rtj,tj->rt", qvec, e2) * inv
        ok &= (u >= -PARALLEL_EPS) & (v >= -PARALLEL_EPS) & (u + v <= 1.0 + PARALLEL_EPS) & (t > t_floor)
        t = np.where(ok, t, np.inf)
        tmin = t.min(axis=1)
        hit_rows = np.isfinite(tmin)
        # lowest triangle index within the tie band of the minimum
        band = t <= (tmin[:, None] + TIE_EPS)
        first = band.argmax(axis=1)
        rows = np.nonzero(hit_rows)[0]
        out_t[s + rows] = t[rows, first[rows]]
        out_idx[s + rows] = first[rows]
    return out_t, out_idx


# ---------------------------------------------------------------------------
# Frame-aware raycasting
# ---------------------------------------------------------------------------

def raycast(ray: Ray, mesh: TriangleMesh, graph: TransformGraph | None = None, use_bvh: bool = True) -> HitResult:
    """Cast a ray against a mesh, transforming between frames if needed.

    The returned point lies in the mesh frame.  When no triangle
    qualifies the result has hit=False and callers must display
    nothing.
    """
    if ray.frame is not None and mesh.frame is not None and ray.frame != mesh.frame:
        if graph is None:
            raise ValueError("ray and mesh frames differ but no graph was given")
        to_mesh = graph.query(mesh.frame, ray.frame)
        origin = to_mesh.apply(ray.origin)
        direction = to_mesh.rotate(ray.direction)
    else:
        origin = ray.origin
        direction = ray.direction

    if len(mesh.triangles) == 0:
        return HitResult.miss()
    found = mesh.bvh.raycast(origin, direction) if use_bvh else raycast_brute(mesh, origin, direction)
    if found is None:
        return HitResult.miss()
    t, idx = found
    point = np.asarray(origin) + t * np.asarray(direction)
    return HitResult(True, float(t), point, int(idx))


def predict_hit(needle_origin_ee, needle_dir_ee, graph: TransformGraph, spine: TriangleMesh) -> HitResult:
    """Express the guide ray in the robot base frame and cast it at the spine.

    This is the one query the operator view polls on every state
    update; a miss means the trajectory leaves the anatomy untouched
    and nothing is rendered.
    """
    base_from_ee = graph.query(Frame.BASE, Frame.EE)
    origin = base_from_ee.apply(np.asarray(needle_origin_ee, dtype=float))
    direction = base_from_ee.rotate(np.asarray(needle_dir_ee, dtype=float))
    ray = Ray(origin, direction, Frame.BASE)
    return raycast(ray, spine, graph)
