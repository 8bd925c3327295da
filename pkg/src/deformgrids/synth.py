"""Analytic test scenes: point sequences with ground-truth meshes and material tracks.

Every scene deforms a rest mesh with a known per-frame map. Point clouds are
drawn from the deformed surface; by default the same barycentric samples are
reused every frame, so each point is a fixed material point (a rigid sphere
would otherwise carry no observable rotation).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError
from .geometry import TriMesh, box_mesh, icosphere
from .io import write_obj, write_ply

KINDS = ("rigid-sphere", "bending-bar", "scaling-cube")


@dataclass
class SynthScene:
    kind: str
    frames: list[np.ndarray]
    meshes: list[TriMesh]
    template_frame: int
    params: dict = field(default_factory=dict)

    @property
    def tracks(self) -> np.ndarray:
        """``(T + 1, V, 3)`` positions of every rest-mesh vertex."""
        return np.stack([m.vertices for m in self.meshes])

    @property
    def template(self) -> TriMesh:
        return self.meshes[self.template_frame]


def axis_rotation(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def bend(x: np.ndarray, bend_angle: float, nodes: int = 24) -> np.ndarray:
    """Bend a bar lying along ``x`` in ``[-1, 1]``.

    The tangent angle of the centerline grows as ``bend_angle * ((x + 1) / 2)^2``
    (the root at ``x = -1`` stays fixed); cross-sections stay normal to the
    centerline. The centerline integral uses Gauss-Legendre quadrature.
    """
    x = np.asarray(x, dtype=np.float64)
    s = x[:, 0]
    theta = lambda u: bend_angle * ((u + 1.0) / 2.0) ** 2
    g, w = np.polynomial.legendre.leggauss(nodes)
    half = (s + 1.0) / 2.0
    u = -1.0 + half[:, None] * (g[None, :] + 1.0)  # nodes mapped to [-1, s]
    th = theta(u)
    cx = -1.0 + half * (np.cos(th) @ w)
    cy = half * (np.sin(th) @ w)
    ts = theta(s)
    out = np.empty_like(x)
    out[:, 0] = cx - x[:, 1] * np.sin(ts)
    out[:, 1] = cy + x[:, 1] * np.cos(ts)
    out[:, 2] = x[:, 2]
    return out


def _barycentric_samples(mesh: TriMesh, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    _, area = mesh.face_normals()
    tri = rng.choice(len(area), size=n, p=area / area.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    return tri, np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)


def _points(mesh: TriMesh, tri, bary) -> np.ndarray:
    t = mesh.triangles[tri]
    v = mesh.vertices
    return bary[:, 0:1] * v[t[:, 0]] + bary[:, 1:2] * v[t[:, 1]] + bary[:, 2:3] * v[t[:, 2]]


def _scene(kind, rest: TriMesh, maps, n_points, seed, fixed_samples, params) -> SynthScene:
    rng = np.random.default_rng(seed)
    meshes = [rest.with_vertices(f(rest.vertices)) for f in maps]
    if fixed_samples:
        tri, bary = _barycentric_samples(rest, n_points, rng)
        frames = [_points(m, tri, bary) for m in meshes]
    else:
        frames = []
        for m in meshes:
            tri, bary = _barycentric_samples(m, n_points, rng)
            frames.append(_points(m, tri, bary))
    T = len(maps) - 1
    return SynthScene(kind, frames, meshes, T // 2, dict(params, frames=T, points=n_points, seed=seed,
                                                            fixed_samples=fixed_samples))


def rigid_sphere(T: int = 8, n_points: int = 2000, seed: int = 0, deg_per_frame: float = 5.0,
                 shift_per_frame: float = 0.02, radius: float = 0.5, subdivisions: int = 3,
                 axis=(0.2, 1.0, 0.3), fixed_samples: bool = True) -> SynthScene:
    rest = icosphere(subdivisions, radius)
    step = np.deg2rad(deg_per_frame)
    shift = np.array([1.0, 0.0, 0.0]) * shift_per_frame

    def motion(t):
        R = axis_rotation(axis, step * t)
        return lambda v: v @ R.T + t * shift

    params = dict(deg_per_frame=deg_per_frame, shift_per_frame=shift_per_frame, radius=radius,
                  subdivisions=subdivisions, axis=list(axis))
    return _scene("rigid-sphere", rest, [motion(t) for t in range(T + 1)], n_points, seed, fixed_samples, params)


def bending_bar(T: int = 8, n_points: int = 2000, seed: int = 0, max_bend_deg: float = 45.0,
                size=(2.0, 0.3, 0.2), divisions=(40, 6, 4), fixed_samples: bool = True) -> SynthScene:
    rest = box_mesh(size, divisions)
    if not np.isclose(size[0], 2.0):
        rest = rest.with_vertices(rest.vertices * np.array([2.0 / size[0], 1.0, 1.0]))
    maps = [lambda v, b=np.deg2rad(max_bend_deg) * t / T: bend(v, b) for t in range(T + 1)]
    params = dict(max_bend_deg=max_bend_deg, size=list(size), divisions=list(divisions))
    return _scene("bending-bar", rest, maps, n_points, seed, fixed_samples, params)


def scaling_cube(T: int = 8, n_points: int = 2000, seed: int = 0, scale_per_frame: float = 1.1,
                 divisions=(8, 8, 8), fixed_samples: bool = True) -> SynthScene:
    """Unit cube stretched along ``x`` by ``scale_per_frame`` each frame."""
    rest = box_mesh((1.0, 1.0, 1.0), divisions)
    maps = [lambda v, s=scale_per_frame ** t: v * np.array([s, 1.0, 1.0]) for t in range(T + 1)]
    params = dict(scale_per_frame=scale_per_frame, divisions=list(divisions))
    return _scene("scaling-cube", rest, maps, n_points, seed, fixed_samples, params)


def make_scene(kind: str, **kw) -> SynthScene:
    try:
        fn = {"rigid-sphere": rigid_sphere, "bending-bar": bending_bar, "scaling-cube": scaling_cube}[kind]
    except KeyError:
        raise InputError(f"unknown scene kind {kind!r}; choose from {', '.join(KINDS)}") from None
    if kw.get("T", 1) < 1 or kw.get("n_points", 1) < 1:
        raise InputError("frames and points must be positive")
    return fn(**kw)


def gt_isometry_loss(scene: SynthScene) -> float:
    """Edge-length variation of the ground-truth meshes, walking outward from the template frame."""
    e = scene.meshes[0].edges
    k = scene.template_frame
    lengths = [np.linalg.norm(m.vertices[e[:, 0]] - m.vertices[e[:, 1]], axis=1) for m in scene.meshes]
    total = 0.0
    for t in range(len(lengths)):
        if t != k:
            s = t - 1 if t > k else t + 1
            total += np.abs(lengths[t] - lengths[s]).sum()
    return float(total) / ((len(lengths) - 1) * len(e))


def write_scene(scene: SynthScene, out_dir) -> dict:
    """Write ``frames/``, ``gt/``, ``template.obj``, ``tracks.npy`` and ``scene.json``."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    frame_files, gt_files = [], []
    for t, (pts, m) in enumerate(zip(scene.frames, scene.meshes)):
        fp = out / "frames" / f"frame_{t:04d}.ply"
        gp = out / "gt" / f"mesh_{t:04d}.obj"
        write_ply(fp, pts)
        write_obj(gp, m.vertices, m.triangles)
        frame_files.append(str(fp.relative_to(out)))
        gt_files.append(str(gp.relative_to(out)))
    write_obj(out / "template.obj", scene.template.vertices, scene.template.triangles)
    np.save(out / "tracks.npy", scene.tracks)
    info = {
        "kind": scene.kind,
        "template_frame": scene.template_frame,
        "frames": frame_files,
        "gt_meshes": gt_files,
        "template": "template.obj",
        "tracks": "tracks.npy",
        "params": scene.params,
    }
    (out / "scene.json").write_text(json.dumps(info, indent=2) + "\n")
    return info
