"""SE(3) rigid transforms and the named coordinate-frame graph.

Conventions used across the package:

* Rotations are unit quaternions ``(w, x, y, z)``; translations are in
  millimetres.
* A transform attached to a graph edge ``(a, b)`` takes coordinates
  expressed in frame ``b`` into frame ``a`` (it is "the pose of b seen
  from a").  ``TransformGraph.query(a, b)`` composes edges along the
  shortest path and therefore returns the transform mapping
  b-coordinates into a-coordinates.
"""

from __future__ import annotations

import json
import math
import threading
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import NoPathError

__all__ = [
    "Frame",
    "parse_frame",
    "RigidTransform",
    "GraphEdge",
    "TransformGraph",
    "rotation_angle_rad",
    "pose_delta",
    "transform_to_json",
    "transform_from_dict",
    "dumps_with_transforms",
]


class Frame(str, Enum):
    """Named coordinate frames of the navigation chain."""

    CAMERA = "camera"      # optical tracking camera on the CT gantry
    MARKER = "marker"      # tracked marker on the probe holder
    EE = "ee"              # robot end-effector (tool flange)
    BASE = "base"          # robot base
    CT = "ct"              # CT volume frame
    US = "us"              # ultrasound image frame
    SPINE = "spine"        # spine mesh frame (patient anatomy)
    VIRTUAL = "virtual"    # virtual-world anchor of the viewer device
    VIEWER = "viewer"      # operator's viewer (head) frame

    def __str__(self) -> str:  # keeps JSON payloads and error text terse
        return self.value


_FRAME_ALIASES = {"patient": Frame.SPINE}


def parse_frame(name: str | Frame) -> Frame:
    """Parse a frame name; 'patient' is accepted as an alias of 'spine'."""
    if isinstance(name, Frame):
        return name
    key = str(name).strip().lower()
    if key in _FRAME_ALIASES:
        return _FRAME_ALIASES[key]
    try:
        return Frame(key)
    except ValueError:
        raise ValueError(f"unknown frame name: {name!r}") from None


# ---------------------------------------------------------------------------
# Quaternion helpers (w, x, y, z), Hamilton convention.
# ---------------------------------------------------------------------------

def _quat_normalize(q: np.ndarray) -> np.ndarray:
    n = math.sqrt(float(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]))
    if n == 0.0 or not math.isfinite(n):
        raise ValueError("quaternion has zero or non-finite norm")
    if abs(n - 1.0) <= 1e-12:
        return q  # already unit; avoid bit churn so serialization round-trips exactly
    return q / n


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


def _quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def _quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors v (..., 3) by unit quaternion q."""
    qv = q[1:]
    t = 2.0 * np.cross(qv, v)
    return v + q[0] * t + np.cross(qv, t)


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _quat_from_matrix(m: np.ndarray) -> np.ndarray:
    # Shepperd's method: pick the numerically dominant diagonal branch.
    m = np.asarray(m, dtype=float)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0.0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] >= m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return _quat_normalize(np.array(q))


class RigidTransform:
    """An element of SE(3): unit quaternion rotation plus mm translation.

    Instances are immutable; compose with ``@`` and invert with
    :meth:`inverse`.  The quaternion is renormalized on every
    construction so drift never accumulates across long chains.
    """

    __slots__ = ("q", "t")

    def __init__(self, q: Sequence[float], t: Sequence[float]):
        q = _quat_normalize(np.asarray(q, dtype=float).reshape(4).copy())
        t = np.asarray(t, dtype=float).reshape(3).copy()
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    def __setattr__(self, *_):
        raise AttributeError("RigidTransform is immutable")

    # -- constructors ------------------------------------------------------

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls((1.0, 0.0, 0.0, 0.0), (0.0, 0.0, 0.0))

    @classmethod
    def from_rotation_translation(cls, rotation: np.ndarray, translation) -> "RigidTransform":
        return cls(_quat_from_matrix(rotation), translation)

    @classmethod
    def from_axis_angle(cls, axis, angle_rad: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        axis = np.asarray(axis, dtype=float).reshape(3)
        n = np.linalg.norm(axis)
        if n == 0.0:
            raise ValueError("rotation axis must be non-zero")
        axis = axis / n
        half = 0.5 * angle_rad
        q = np.concatenate(([math.cos(half)], math.sin(half) * axis))
        return cls(q, translation)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "RigidTransform":
        matrix = np.asarray(matrix, dtype=float)
        if matrix.shape != (4, 4):
            raise ValueError("expected a 4x4 homogeneous matrix")
        return cls(_quat_from_matrix(matrix[:3, :3]), matrix[:3, 3])

    @classmethod
    def random(cls, rng: np.random.Generator, translation_scale: float = 100.0) -> "RigidTransform":
        """Uniform random rotation with translation in a centred cube."""
        q = rng.normal(size=4)
        t = rng.uniform(-translation_scale, translation_scale, size=3)
        return cls(q, t)

    # -- algebra -----------------------------------------------------------

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return self ∘ other (apply ``other`` first, then ``self``)."""
        q = _quat_mul(self.q, other.q)
        t = _quat_rotate(self.q, other.t) + self.t
        return RigidTransform(q, t)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def inverse(self) -> "RigidTransform":
        qc = _quat_conj(self.q)
        return RigidTransform(qc, -_quat_rotate(qc, self.t))

    def apply(self, points) -> np.ndarray:
        """Transform one point (3,) or a batch (N, 3)."""
        pts = np.asarray(points, dtype=float)
        return _quat_rotate(self.q, pts) + self.t

    def rotate(self, vectors) -> np.ndarray:
        """Rotate direction vectors (no translation)."""
        return _quat_rotate(self.q, np.asarray(vectors, dtype=float))

    def rotation_matrix(self) -> np.ndarray:
        return _quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.t
        return m

    # -- comparison and io --------------------------------------------------

    def rotation_angle_rad(self) -> float:
        """Angle of the rotation part, in [0, pi]."""
        w = min(1.0, abs(float(self.q[0])))
        return 2.0 * math.acos(w)

    def almost_equal(self, other: "RigidTransform", rot_tol_rad: float = 1e-9, trans_tol_mm: float = 1e-9) -> bool:
        rot, trans = pose_delta(self, other)
        return rot <= rot_tol_rad and trans <= trans_tol_mm

    def to_dict(self) -> dict:
        return {"q": [float(v) for v in self.q], "t": [float(v) for v in self.t]}

    def __repr__(self) -> str:
        q = ", ".join(f"{v:.6g}" for v in self.q)
        t = ", ".join(f"{v:.6g}" for v in self.t)
        return f"RigidTransform(q=({q}), t=({t}))"


def rotation_angle_rad(a: RigidTransform, b: RigidTransform | None = None) -> float:
    """Rotation angle of ``a`` or of the relative rotation a vs b."""
    if b is None:
        return a.rotation_angle_rad()
    d = _quat_mul(_quat_conj(a.q), b.q)
    return 2.0 * math.atan2(float(np.linalg.norm(d[1:])), abs(float(d[0])))


def pose_delta(a: RigidTransform, b: RigidTransform) -> tuple[float, float]:
    """(rotation angle rad, translation distance mm) between two poses."""
    return rotation_angle_rad(a, b), float(np.linalg.norm(a.t - b.t))


# ---------------------------------------------------------------------------
# Serialization: {"q":[w,x,y,z],"t":[x,y,z]} with 17 significant digits.
# ---------------------------------------------------------------------------

def _f17(v: float) -> str:
    # 17 significant digits uniquely identify a double and round-trip exactly.
    return f"{float(v):.16e}"


def transform_to_json(tf: RigidTransform) -> str:
    q = ",".join(_f17(v) for v in tf.q)
    t = ",".join(_f17(v) for v in tf.t)
    return f'{{"q":[{q}],"t":[{t}]}}'


def transform_from_dict(doc: dict) -> RigidTransform:
    if not isinstance(doc, dict) or "q" not in doc or "t" not in doc:
        raise ValueError("expected an object with 'q' and 't' fields")
    q = doc["q"]
    t = doc["t"]
    if len(q) != 4 or len(t) != 3:
        raise ValueError("'q' must have 4 entries and 't' 3")
    return RigidTransform(q, t)


def dumps_with_transforms(obj, indent: int | None = None) -> str:
    """json.dumps where RigidTransform leaves keep 17-digit formatting."""
    fragments: list[str] = []

    def substitute(node):
        if isinstance(node, RigidTransform):
            fragments.append(transform_to_json(node))
            return f"@@tf{len(fragments) - 1}@@"
        if isinstance(node, dict):
            return {k: substitute(v) for k, v in node.items()}
        if isinstance(node, (list, tuple)):
            return [substitute(v) for v in node]
        return node

    text = json.dumps(substitute(obj), indent=indent)
    for i, frag in enumerate(fragments):
        text = text.replace(f'"@@tf{i}@@"', frag)
    return text


# ---------------------------------------------------------------------------
# Frame graph
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GraphEdge:
    src: Frame
    dst: Frame
    transform: RigidTransform  # maps dst-coordinates into src-coordinates
    stamp: int


class TransformGraph:
    """Directed multigraph of frames with one latest edge per (src, dst).

    Single writer, many readers: edge updates swap an internal immutable
    mapping, so a query always sees one consistent snapshot.  Queries
    walk the undirected view, inverting edges traversed against their
    stored direction, and pick the shortest path (ties resolved by
    expanding neighbours in lexicographic frame-name order).
    """

    def __init__(self) -> None:
        self._edges: dict[tuple[Frame, Frame], GraphEdge] = {}
        self._lock = threading.Lock()
        self._counter = 0

    def set_edge(self, src: Frame | str, dst: Frame | str, transform: RigidTransform, stamp: int | None = None) -> None:
        src, dst = parse_frame(src), parse_frame(dst)
        if src == dst:
            raise ValueError("self-edges are not allowed")
        with self._lock:
            if stamp is None:
                self._counter += 1
                stamp = self._counter
            else:
                self._counter = max(self._counter, int(stamp))
            edges = dict(self._edges)
            edges[(src, dst)] = GraphEdge(src, dst, transform, int(stamp))
            self._edges = edges  # atomic swap; readers keep their snapshot

    def edges(self) -> tuple[GraphEdge, ...]:
        snap = self._edges
        return tuple(snap[k] for k in sorted(snap, key=lambda k: (k[0].value, k[1].value)))

    def frames(self) -> tuple[Frame, ...]:
        snap = self._edges
        seen = {f for pair in snap for f in pair}
        return tuple(sorted(seen, key=lambda f: f.value))

    def has_path(self, src: Frame | str, dst: Frame | str) -> bool:
        try:
            self.query(src, dst)
            return True
        except NoPathError:
            return False

    def query(self, src: Frame | str, dst: Frame | str) -> RigidTransform:
        """Transform taking dst-frame coordinates into the src frame."""
        src, dst = parse_frame(src), parse_frame(dst)
        if src == dst:
            return RigidTransform.identity()
        snap = self._edges

        neighbours: dict[Frame, list[Frame]] = {}
        for a, b in snap:
            neighbours.setdefault(a, []).append(b)
            neighbours.setdefault(b, []).append(a)
        for key in neighbours:
            neighbours[key] = sorted(set(neighbours[key]), key=lambda f: f.value)

        if src not in neighbours or dst not in neighbours:
            raise NoPathError(f"no transform path from '{src}' to '{dst}'")

        parent: dict[Frame, Frame | None] = {src: None}
        queue: deque[Frame] = deque([src])
        while queue:
            node = queue.popleft()
            if node == dst:
                break
            for nxt in neighbours.get(node, ()):
                if nxt not in parent:
                    parent[nxt] = node
                    queue.append(nxt)
        if dst not in parent:
            raise NoPathError(f"no transform path from '{src}' to '{dst}'")

        path: list[Frame] = [dst]
        while parent[path[-1]] is not None:
            path.append(parent[path[-1]])  # type: ignore[arg-type]
        path.reverse()

        result = RigidTransform.identity()
        for a, b in zip(path, path[1:]):
            if (a, b) in snap:
                step = snap[(a, b)].transform
            else:
                step = snap[(b, a)].transform.inverse()
            result = result @ step
        return result

    def map_points(self, points, src_frame: Frame | str, dst_frame: Frame | str) -> np.ndarray:
        """Express points given in ``src_frame`` in ``dst_frame``."""
        return self.query(dst_frame, src_frame).apply(points)
