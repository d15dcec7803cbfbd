"""Point clouds in millimetres, with PLY import/export.

A cloud carries an optional frame label and optional per-point normals.
PLY support covers ASCII and binary little-endian files with x,y,z and
optional nx,ny,nz properties; other vertex properties are ignored.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyCloudError
from .transforms import Frame, RigidTransform, parse_frame

__all__ = ["PointCloud", "load_ply", "save_ply", "estimate_normals"]


@dataclass
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None
    frame: Frame | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != len(self.points):
                raise ValueError("normals must match points one-to-one")
        if self.frame is not None:
            self.frame = parse_frame(self.frame)

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, tf: RigidTransform, frame: Frame | None = None) -> "PointCloud":
        normals = tf.rotate(self.normals) if self.normals is not None else None
        return PointCloud(tf.apply(self.points), normals, frame if frame is not None else self.frame)

    def select(self, mask_or_indices) -> "PointCloud":
        pts = self.points[mask_or_indices]
        nrm = self.normals[mask_or_indices] if self.normals is not None else None
        return PointCloud(pts, nrm, self.frame)


def estimate_normals(cloud: PointCloud, k: int = 12) -> PointCloud:
    """Unoriented normals from local plane fits over k nearest neighbours."""
    from scipy.spatial import cKDTree

    pts = cloud.points
    if len(pts) == 0:
        raise EmptyCloudError("cannot estimate normals of an empty cloud")
    k = min(k, len(pts))
    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=k)
    if k == 1:
        idx = idx[:, None]
    neigh = pts[idx]  # (N, k, 3)
    centred = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centred, centred)
    # smallest-eigenvalue eigenvector of each 3x3 covariance
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return PointCloud(pts.copy(), normals / norms, cloud.frame)


# ---------------------------------------------------------------------------
# PLY io
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "float": ("f", 4), "float32": ("f", 4),
    "double": ("d", 8), "float64": ("d", 8),
    "char": ("b", 1), "int8": ("b", 1),
    "uchar": ("B", 1), "uint8": ("B", 1),
    "short": ("h", 2), "int16": ("h", 2),
    "ushort": ("H", 2), "uint16": ("H", 2),
    "int": ("i", 4), "int32": ("i", 4),
    "uint": ("I", 4), "uint32": ("I", 4),
}


def load_ply(path, frame: Frame | None = None) -> PointCloud:
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    header = data[: end + len(b"end_header\n")]
    body = data[len(header):]

    fmt = None
    vertex_count = 0
    props: list[tuple[str, str]] = []
    in_vertex = False
    for line in header.decode("ascii", "replace").splitlines():
        tokens = line.split()
        if not tokens:
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                vertex_count = int(tokens[2])
        elif tokens[0] == "property" and in_vertex:
            if tokens[1] == "list":
                raise ValueError("list properties are not supported on vertices")
            props.append((tokens[2], tokens[1]))

    names = [name for name, _ in props]
    for needed in ("x", "y", "z"):
        if needed not in names:
            raise ValueError(f"{path}: PLY vertex element lacks '{needed}'")
    has_normals = all(n in names for n in ("nx", "ny", "nz"))

    if fmt == "ascii":
        rows = np.loadtxt(
            [ln for ln in body.decode("ascii").splitlines() if ln.strip()][:vertex_count],
            dtype=np.float64,
            ndmin=2,
        ) if vertex_count else np.zeros((0, len(props)))
    elif fmt == "binary_little_endian":
        dtype = np.dtype([(name, "<" + _PLY_TYPES[typ][0]) for name, typ in props])
        raw = np.frombuffer(body, dtype=dtype, count=vertex_count)
        rows = np.column_stack([raw[name].astype(np.float64) for name in names]) if vertex_count else np.zeros((0, len(props)))
    else:
        raise ValueError(f"{path}: unsupported PLY format {fmt!r}")

    if vertex_count and rows.shape[0] < vertex_count:
        raise ValueError(f"{path}: truncated PLY body")
    cols = {name: i for i, name in enumerate(names)}
    pts = rows[:, [cols["x"], cols["y"], cols["z"]]]
    normals = rows[:, [cols["nx"], cols["ny"], cols["nz"]]] if has_normals else None
    return PointCloud(pts, normals, frame)


def save_ply(path, cloud: PointCloud, binary: bool = True) -> None:
    pts = cloud.points
    nrm = cloud.normals
    names = ["x", "y", "z"] + (["nx", "ny", "nz"] if nrm is not None else [])
    header = ["ply"]
    header.append("format binary_little_endian 1.0" if binary else "format ascii 1.0")
    header.append(f"element vertex {len(pts)}")
    header.extend(f"property double {n}" for n in names)
    header.append("end_header")
    table = np.hstack([pts, nrm]) if nrm is not None else pts

    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(table, dtype="<f8").tobytes())
        else:
            for row in table:
                fh.write((" ".join(f"{v:.17g}" for v in row) + "\n").encode("ascii"))
