"""Core geometric types, domain normalization, edge extraction and surface sampling.

Point clouds are plain ``(N, 3)`` float64 arrays. Meshes carry their triangle
list and a lazily derived undirected edge set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateGeometryError, InputError


def as_points(points, name: str = "points") -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InputError(f"{name} must have shape (N, 3), got {arr.shape}")
    if arr.shape[0] == 0:
        raise InputError(f"{name} is empty")
    return arr


@dataclass(frozen=True)
class NormalizationTransform:
    """Isotropic map ``p -> (p - center) * scale``."""

    center: np.ndarray
    scale: float

    def apply(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) * self.scale

    def invert(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale + self.center

    def to_dict(self) -> dict:
        return {"center": [float(c) for c in self.center], "scale": float(self.scale)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationTransform":
        return cls(np.asarray(d["center"], dtype=np.float64), float(d["scale"]))


@dataclass
class PointCloudSequence:
    frames: list[np.ndarray]
    normalization: NormalizationTransform | None = None

    def __post_init__(self):
        if len(self.frames) < 2:
            raise InputError("a sequence needs at least 2 frames")
        self.frames = [as_points(f, f"frame {i}") for i, f in enumerate(self.frames)]

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def T(self) -> int:
        """Index of the last frame (the sequence holds ``T + 1`` frames)."""
        return len(self.frames) - 1


@dataclass
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    _edges: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        n = len(self.vertices)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= n):
            raise InputError("triangle index out of range")
        t = self.triangles
        if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
            raise InputError("degenerate triangle with repeated vertex index")

    @property
    def edges(self) -> np.ndarray:
        if self._edges is None:
            self._edges = extract_edges(self)
        return self._edges

    def with_vertices(self, vertices) -> "TriMesh":
        m = TriMesh(vertices, self.triangles)
        m._edges = self._edges
        return m

    def face_normals(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit face normals and triangle areas."""
        v = self.vertices
        t = self.triangles
        cr = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        norm = np.linalg.norm(cr, axis=1)
        area = 0.5 * norm
        with np.errstate(invalid="ignore", divide="ignore"):
            normals = cr / norm[:, None]
        normals[norm == 0] = 0.0
        return normals, area


def normalize_sequence(raw: PointCloudSequence | Sequence) -> tuple[PointCloudSequence, NormalizationTransform]:
    """Fit the joint bounding box of all frames into ``[-1, 1]^3``.

    The box is centered at the origin and its longest axis spans exactly
    ``[-1, 1]``; one isotropic transform is shared by every frame.
    """
    frames = raw.frames if isinstance(raw, PointCloudSequence) else [as_points(f, f"frame {i}") for i, f in enumerate(raw)]
    stacked = np.concatenate(frames, axis=0)
    lo = stacked.min(axis=0)
    hi = stacked.max(axis=0)
    extent = float((hi - lo).max())
    if not extent > 0:
        raise DegenerateGeometryError("point sequence has zero spatial extent")
    tf = NormalizationTransform(center=0.5 * (lo + hi), scale=2.0 / extent)
    out = [tf.apply(f) for f in frames]
    # guard against rounding just outside the box
    out = [np.clip(f, -1.0, 1.0) for f in out]
    return PointCloudSequence(out, tf), tf


def extract_edges(mesh: TriMesh) -> np.ndarray:
    """Undirected edges ``(i, j)`` with ``i < j``, each once, sorted lexicographically."""
    t = np.asarray(mesh.triangles, dtype=np.int64)
    n = len(mesh.vertices)
    if t.size and (t.min() < 0 or t.max() >= n):
        raise InputError("triangle index out of range")
    if t.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=0)
    e.sort(axis=1)
    return np.unique(e, axis=0)


def sample_surface(mesh: TriMesh, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` area-uniform surface samples and their face normals."""
    normals, area = mesh.face_normals()
    total = area.sum()
    if not total > 0:
        raise DegenerateGeometryError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(area), size=n, p=area / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a = 1.0 - r1
    b = r1 * (1.0 - r2)
    c = r1 * r2
    v = mesh.vertices
    t = mesh.triangles[tri]
    pts = a[:, None] * v[t[:, 0]] + b[:, None] * v[t[:, 1]] + c[:, None] * v[t[:, 2]]
    return pts, normals[tri]


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriMesh:
    """Subdivided icosahedron; 3 subdivisions give 642 vertices."""
    phi = (1.0 + 5.0 ** 0.5) / 2.0
    verts = [
        (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
        (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
        (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    v = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    f = faces
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = v[i] + v[j]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    return TriMesh(np.array(v) * radius, np.array(f, dtype=np.int64))


def box_mesh(size=(2.0, 0.3, 0.2), divisions=(40, 6, 4)) -> TriMesh:
    """Closed axis-aligned box centered at the origin, each face a regular triangulated grid."""
    size = np.asarray(size, dtype=np.float64)
    div = tuple(int(d) for d in divisions)
    half = size / 2
    verts: list[np.ndarray] = []
    index: dict[tuple[int, int, int], int] = {}

    def vid(ijk):
        if ijk not in index:
            index[ijk] = len(verts)
            verts.append(-half + size * np.array(ijk, dtype=np.float64) / div)
        return index[ijk]

    tris = []
    for axis in range(3):
        u, w = [a for a in range(3) if a != axis]
        for side in (0, div[axis]):
            for i in range(div[u]):
                for j in range(div[w]):
                    quad = []
                    for di, dj in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        ijk = [0, 0, 0]
                        ijk[axis] = side
                        ijk[u] = i + di
                        ijk[w] = j + dj
                        quad.append(vid(tuple(ijk)))
                    a, b, c, d = quad
                    # outward orientation
                    flip = (side == 0) ^ (axis == 1)
                    if flip:
                        tris += [(a, c, b), (a, d, c)]
                    else:
                        tris += [(a, b, c), (a, c, d)]
    return TriMesh(np.array(verts), np.array(tris, dtype=np.int64))
