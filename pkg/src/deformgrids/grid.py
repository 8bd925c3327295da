"""Multi-resolution lattices of local rigid transforms.

Level ``l`` is a lattice of ``r = 2l - 1`` vertices per axis spanning
``[-1, 1]^3``. Each active vertex stores a 6-vector ``(z, t)``: Cayley rotation
parameters and a translation. Inactive (pruned) vertices act as the zero
vector. A point's transform is the mean over levels of the trilinearly
interpolated vertex parameters; the resulting ``(z, t)`` maps ``x`` to
``R(z) x + t`` with the rotation pivot at the domain origin.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np
import scipy.sparse as sp
from scipy.ndimage import binary_dilation

from .errors import InputError

FORWARD = "forward"
BACKWARD = "backward"

PRUNE_RADIUS = 3
_CORNERS = np.array(list(product((0, 1), repeat=3)), dtype=np.int64)  # (8, 3)


def resolution(level: int) -> int:
    return 2 * level - 1


class GridLevel:
    """One lattice level: active vertex coordinates and their parameter rows.

    ``params`` is normally a view into the owning grid's flat parameter array.
    """

    def __init__(self, level: int, coords, params=None):
        if level < 1:
            raise InputError("grid levels start at 1")
        self.level = int(level)
        self.resolution = resolution(level)
        r = self.resolution
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        if coords.size and (coords.min() < 0 or coords.max() >= r):
            raise InputError(f"active coordinate out of range for level {level}")
        flat = (coords[:, 0] * r + coords[:, 1]) * r + coords[:, 2]
        order = np.argsort(flat, kind="stable")
        if len(np.unique(flat)) != len(flat):
            raise InputError("duplicate active coordinates")
        self.coords = coords[order]
        self.lookup = np.full(r ** 3, -1, dtype=np.int64)
        self.lookup[flat[order]] = np.arange(len(flat))
        if params is None:
            params = np.zeros((len(flat), 6))
        else:
            params = np.asarray(params, dtype=np.float64).reshape(-1, 6)[order]
        self.params = params

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def dense_count(self) -> int:
        return self.resolution ** 3

    def vertex_position(self, coords) -> np.ndarray:
        if self.resolution == 1:
            return np.zeros(np.shape(coords), dtype=np.float64)
        return -1.0 + 2.0 * np.asarray(coords, dtype=np.float64) / (self.resolution - 1)


class DeformationGrid:
    """All levels for one frame transition; parameters live in ``self.params``."""

    def __init__(self, levels: list[GridLevel], direction: str = FORWARD):
        if direction not in (FORWARD, BACKWARD):
            raise InputError(f"unknown direction {direction!r}")
        self.direction = direction
        self.levels = levels
        sizes = [len(lv) for lv in levels]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.params = np.concatenate([lv.params for lv in levels], axis=0) if levels else np.zeros((0, 6))
        self._rebind()

    def global_lookup(self, levels) -> np.ndarray:
        """Concatenated per-level lookups mapping to flat parameter rows (pad row if inactive)."""
        key = tuple(li for li, _ in levels)
        cache = self.__dict__.setdefault("_lookup_cache", {})
        if key not in cache:
            pad = int(self.offsets[-1])
            parts = [np.where(lv.lookup >= 0, lv.lookup + self.offsets[li], pad) for li, lv in levels]
            base = np.concatenate([[0], np.cumsum([len(p) for p in parts])[:-1]]).astype(np.int64)
            cache[key] = (np.concatenate(parts), base)
        return cache[key][0]

    def lookup_base(self, levels) -> np.ndarray:
        self.global_lookup(levels)
        return self._lookup_cache[tuple(li for li, _ in levels)][1]

    @property
    def topology(self) -> tuple:
        """Hashable description of the active cells; equal for copies."""
        if "_topology" not in self.__dict__:
            self._topology = tuple((lv.level, lv.coords.tobytes()) for lv in self.levels)
        return self._topology

    def _rebind(self):
        for i, lv in enumerate(self.levels):
            lv.params = self.params[self.offsets[i]:self.offsets[i + 1]]

    @property
    def n_params(self) -> int:
        return self.params.size

    @property
    def dense_params(self) -> int:
        return 6 * sum(lv.dense_count for lv in self.levels)

    def set_params(self, flat) -> None:
        self.params[...] = flat

    def copy(self) -> "DeformationGrid":
        levels = [GridLevel(lv.level, lv.coords, lv.params.copy()) for lv in self.levels]
        return DeformationGrid(levels, self.direction)

    # ---- evaluation -------------------------------------------------------

    def stencil(self, x) -> "Stencil":
        return Stencil.build(self, x)

    def interpolate(self, x) -> np.ndarray:
        """Aggregated 6-vector transform at each query point, shape ``(N, 6)``."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        return self.stencil(x).gather(self.params)


@dataclass
class Stencil:
    """Sparse interpolation weights of a point batch against a grid's flat parameters.

    ``rows``/``weights`` are ``(N, K)`` with ``K = 8`` per level (1 for a
    single-vertex level); ``dweights`` holds the spatial derivative of each
    weight, zero along clamped axes. Inactive corners point at a padding row.
    """

    rows: np.ndarray
    weights: np.ndarray
    dweights: np.ndarray
    n_rows: int
    scale: float
    _w: sp.csr_matrix | None = field(default=None, repr=False)

    @classmethod
    def build(cls, grid: DeformationGrid, x: np.ndarray) -> "Stencil":
        n = len(x)
        pad = int(grid.offsets[-1])
        n_levels = max(len(grid.levels), 1)
        rows, ws, dws = [], [], []
        fine = [(li, lv) for li, lv in enumerate(grid.levels) if lv.resolution > 1]
        for li, lv in enumerate(grid.levels):
            if lv.resolution == 1:
                slot = lv.lookup[0]
                rows.append(np.full((n, 1), grid.offsets[li] + slot if slot >= 0 else pad, dtype=np.int64))
                ws.append(np.ones((n, 1)))
                dws.append(np.zeros((n, 1, 3)))
        if fine:
            # all multi-vertex levels at once; per-axis factors are (N, levels, 2)
            res = np.array([lv.resolution for _, lv in fine], dtype=np.int64)
            h = 2.0 / (res - 1)
            live = (x > -1.0) & (x < 1.0)
            u = (np.clip(x, -1.0, 1.0)[:, None, :] + 1.0) / h[None, :, None]
            i0 = np.minimum(u.astype(np.int64), (res - 2)[None, :, None])
            f = u - i0
            fx, fy, fz = (np.stack([1.0 - f[:, :, d], f[:, :, d]], axis=-1) for d in range(3))
            gx, gy, gz = (np.multiply.outer(live[:, d, None] / h[None, :], np.array([-1.0, 1.0]))
                          for d in range(3))
            yz = fy[:, :, :, None] * fz[:, :, None, :]
            w = (fx[:, :, :, None, None] * yz[:, :, None]).reshape(n, len(fine), 8)
            dw = np.empty((n, len(fine), 8, 3))
            dw[..., 0] = (gx[:, :, :, None, None] * yz[:, :, None]).reshape(n, -1, 8)
            dw[..., 1] = (fx[:, :, :, None, None] * (gy[:, :, :, None] * fz[:, :, None, :])[:, :, None]).reshape(n, -1, 8)
            dw[..., 2] = (fx[:, :, :, None, None] * (fy[:, :, :, None] * gz[:, :, None, :])[:, :, None]).reshape(n, -1, 8)
            corner = (_CORNERS[None, :, 0] * res[:, None] + _CORNERS[None, :, 1]) * res[:, None] + _CORNERS[None, :, 2]
            base = (i0[:, :, 0] * res + i0[:, :, 1]) * res + i0[:, :, 2] + grid.lookup_base(fine)
            slot = grid.global_lookup(fine)[base[:, :, None] + corner[None]]
            rows.append(slot.reshape(n, -1))
            ws.append(w.reshape(n, -1))
            dws.append(dw.reshape(n, -1, 3))
        return cls(
            rows=np.concatenate(rows, axis=1),
            weights=np.concatenate(ws, axis=1),
            dweights=np.concatenate(dws, axis=1),
            n_rows=pad + 1,
            scale=1.0 / n_levels,
        )

    def _matrix(self, data: np.ndarray) -> sp.csr_matrix:
        n, k = self.rows.shape
        indptr = np.arange(0, n * k + 1, k, dtype=np.int64)
        return sp.csr_matrix((data.ravel(), self.rows.ravel(), indptr), shape=(n, self.n_rows))

    @property
    def matrix(self) -> sp.csr_matrix:
        if self._w is None:
            self._w = self._matrix(self.weights * self.scale)
        return self._w

    def gather(self, params: np.ndarray) -> np.ndarray:
        padded = np.concatenate([params, np.zeros((1, params.shape[1]))], axis=0)
        return np.asarray(self.matrix @ padded)

    def scatter(self, g: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`gather` (padding row dropped)."""
        return np.asarray(self.matrix.T @ g)[:-1]

    def spatial_jacobian(self, params: np.ndarray) -> np.ndarray:
        """``d T / d x`` as ``(N, 3, 6)``."""
        padded = np.concatenate([params, np.zeros((1, params.shape[1]))], axis=0)
        return self.scale * np.matmul(self.dweights.transpose(0, 2, 1), padded[self.rows])


# ---- rotations ---------------------------------------------------------------

def skew(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.zeros(z.shape[:-1] + (3, 3))
    out[..., 0, 1] = -z[..., 2]
    out[..., 0, 2] = z[..., 1]
    out[..., 1, 0] = z[..., 2]
    out[..., 1, 2] = -z[..., 0]
    out[..., 2, 0] = -z[..., 1]
    out[..., 2, 1] = z[..., 0]
    return out


def cayley_rotation(z) -> np.ndarray:
    """``(I + Z)(I - Z)^-1`` via the closed form ``I + 2 (Z + Z^2) / (1 + |z|^2)``."""
    z = np.asarray(z, dtype=np.float64)
    Z = skew(z)
    a = np.sum(z * z, axis=-1)[..., None, None]
    return np.eye(3) + 2.0 * (Z + Z @ Z) / (1.0 + a)


def apply_transform(tf, x) -> np.ndarray:
    """Map points by 6-vectors ``tf = (z, t)``: ``R(z) x + t``. Broadcasts over rows."""
    tf = np.asarray(tf, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    z, t = tf[..., :3], tf[..., 3:]
    s = 2.0 / (1.0 + np.sum(z * z, axis=-1, keepdims=True))
    c = np.cross(z, x)
    d = np.cross(z, c)
    return x + s * (c + d) + t


def apply_transform_backward(tf, x, gy) -> tuple[np.ndarray, np.ndarray]:
    """Vector-Jacobian product of :func:`apply_transform` at fixed ``tf`` and ``x``.

    Returns ``(g_tf, g_x)`` with ``g_tf`` of shape ``(..., 6)``.
    """
    z, t = tf[..., :3], tf[..., 3:]
    s = 2.0 / (1.0 + np.sum(z * z, axis=-1, keepdims=True))
    c = np.cross(z, x)
    d = np.cross(z, c)
    g_dot_cd = np.sum(gy * (c + d), axis=-1, keepdims=True)
    gz = (-s * s * g_dot_cd) * z + s * (
        np.cross(x, gy)
        + gy * np.sum(z * x, axis=-1, keepdims=True)
        + x * np.sum(gy * z, axis=-1, keepdims=True)
        - 2.0 * z * np.sum(gy * x, axis=-1, keepdims=True)
    )
    zg = np.cross(z, gy)
    gx = gy + s * (-zg + np.cross(z, zg))
    return np.concatenate([gz, gy], axis=-1), gx


# ---- single-transition evaluation with backward ------------------------------

@dataclass
class StepCache:
    x: np.ndarray
    tf: np.ndarray
    stencil: Stencil


def step_forward(grid: DeformationGrid, x: np.ndarray, stencil: Stencil | None = None) -> tuple[np.ndarray, StepCache]:
    """One transition; ``stencil`` may be passed when ``x`` and the topology are unchanged."""
    st = stencil if stencil is not None else grid.stencil(x)
    tf = st.gather(grid.params)
    return apply_transform(tf, x), StepCache(x, tf, st)


def step_backward(grid: DeformationGrid, cache: StepCache, gy: np.ndarray,
                  need_x: bool = True) -> tuple[np.ndarray | None, np.ndarray]:
    """Return ``(g_x, g_params)`` for one transition; ``g_x`` includes the
    dependence of the interpolated transform on the query position."""
    g_tf, gx = apply_transform_backward(cache.tf, cache.x, gy)
    g_params = cache.stencil.scatter(g_tf)
    if need_x:
        jac = cache.stencil.spatial_jacobian(grid.params)  # (N, 3, 6)
        gx = gx + np.matmul(jac, g_tf[:, :, None])[:, :, 0]
        return gx, g_params
    return None, g_params


# ---- sequences ---------------------------------------------------------------

@dataclass
class GridSequence:
    """Transition grids radiating from the keyframe.

    ``forward[i]`` maps frame ``keyframe + i`` to ``keyframe + i + 1``;
    ``backward[i]`` maps frame ``keyframe - i`` to ``keyframe - i - 1``.
    """

    keyframe: int
    forward: list[DeformationGrid]
    backward: list[DeformationGrid]

    @property
    def n_frames(self) -> int:
        return len(self.forward) + len(self.backward) + 1

    @property
    def grids(self) -> list[DeformationGrid]:
        return list(self.forward) + list(self.backward)

    def grid_for(self, t: int) -> DeformationGrid:
        """Grid of the transition arriving at frame ``t``."""
        k = self.keyframe
        if t > k:
            return self.forward[t - k - 1]
        if t < k:
            return self.backward[k - t - 1]
        raise InputError("the keyframe has no incoming transition")

    def source_of(self, t: int) -> int:
        return t - 1 if t > self.keyframe else t + 1

    def paths(self) -> list[list[int]]:
        """Frames in each direction, ordered outward from the keyframe."""
        k = self.keyframe
        return [list(range(k + 1, self.n_frames)), list(range(k - 1, -1, -1))]

    def copy(self) -> "GridSequence":
        return GridSequence(self.keyframe, [g.copy() for g in self.forward], [g.copy() for g in self.backward])

    def n_params(self) -> int:
        return sum(g.n_params for g in self.grids)

    def dense_params(self) -> int:
        return sum(g.dense_params for g in self.grids)


def deform_points(grids: GridSequence, base, target_frame: int) -> np.ndarray:
    """Carry keyframe positions to ``target_frame`` one transition at a time."""
    if not 0 <= target_frame < grids.n_frames:
        raise InputError(f"target frame {target_frame} outside [0, {grids.n_frames - 1}]")
    x = np.asarray(base, dtype=np.float64).reshape(-1, 3)
    k = grids.keyframe
    if target_frame == k:
        return x.copy()
    stride = 1 if target_frame > k else -1
    for t in range(k + stride, target_frame + stride, stride):
        x, _ = step_forward(grids.grid_for(t), x)
    return x


# ---- construction ------------------------------------------------------------

def occupied_vertices(level: int, points: np.ndarray) -> np.ndarray:
    """Boolean ``(r, r, r)`` mask of lattice vertices whose cell holds a point."""
    r = resolution(level)
    occ = np.zeros((r, r, r), dtype=bool)
    if r == 1:
        occ[0, 0, 0] = len(points) > 0
        return occ
    h = 2.0 / (r - 1)
    idx = np.clip(np.rint((np.clip(points, -1.0, 1.0) + 1.0) / h).astype(np.int64), 0, r - 1)
    occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return occ


def active_mask(level: int, points: np.ndarray, radius: int = PRUNE_RADIUS) -> np.ndarray:
    occ = occupied_vertices(level, points)
    if radius <= 0 or occ.shape[0] == 1:
        return occ
    return binary_dilation(occ, structure=np.ones((2 * radius + 1,) * 3, dtype=bool), border_value=0)


def build_grid(levels: list[int], points: np.ndarray | None, direction: str = FORWARD,
               prune: bool = True) -> DeformationGrid:
    out = []
    for l in levels:
        r = resolution(l)
        if prune and points is not None:
            mask = active_mask(l, points)
        else:
            mask = np.ones((r, r, r), dtype=bool)
        out.append(GridLevel(l, np.argwhere(mask)))
    return DeformationGrid(out, direction)


def build_pruned(level_count: int, frames: list[np.ndarray], keyframe: int,
                 levels: list[int] | None = None, prune: bool = True) -> GridSequence:
    """Grids for every transition, pruned to the union of both endpoint frames.

    ``levels`` overrides the default ``1..level_count`` (e.g. finest level only).
    """
    if levels is None:
        levels = list(range(1, level_count + 1))
    n = len(frames)
    if not 0 <= keyframe < n:
        raise InputError("keyframe outside the sequence")
    fwd = [build_grid(levels, np.concatenate([frames[t - 1], frames[t]]), FORWARD, prune)
           for t in range(keyframe + 1, n)]
    bwd = [build_grid(levels, np.concatenate([frames[t + 1], frames[t]]), BACKWARD, prune)
           for t in range(keyframe - 1, -1, -1)]
    return GridSequence(keyframe, fwd, bwd)


# ---- checkpoint files --------------------------------------------------------

CHECKPOINT_FORMAT = "deformgrids-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, grids: GridSequence) -> None:
    """Write an ``.npz`` container; layout documented in the README."""
    arrays = {
        "format": np.array(CHECKPOINT_FORMAT),
        "version": np.array(CHECKPOINT_VERSION, dtype=np.int64),
        "keyframe": np.array(grids.keyframe, dtype=np.int64),
        "n_forward": np.array(len(grids.forward), dtype=np.int64),
        "n_backward": np.array(len(grids.backward), dtype=np.int64),
    }
    for tag, seq in (("f", grids.forward), ("b", grids.backward)):
        for i, g in enumerate(seq):
            arrays[f"{tag}{i}/levels"] = np.array([lv.level for lv in g.levels], dtype=np.int64)
            for lv in g.levels:
                arrays[f"{tag}{i}/L{lv.level}/coords"] = lv.coords.astype(np.int32)
                arrays[f"{tag}{i}/L{lv.level}/params"] = lv.params
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path) -> GridSequence:
    with np.load(path, allow_pickle=False) as z:
        if str(z["format"]) != CHECKPOINT_FORMAT:
            raise InputError(f"{path}: not a grid checkpoint")
        if int(z["version"]) != CHECKPOINT_VERSION:
            raise InputError(f"{path}: unsupported checkpoint version {int(z['version'])}")
        seqs = {}
        for tag, key, direction in (("f", "n_forward", FORWARD), ("b", "n_backward", BACKWARD)):
            grids = []
            for i in range(int(z[key])):
                levels = [GridLevel(int(l), z[f"{tag}{i}/L{l}/coords"], z[f"{tag}{i}/L{l}/params"])
                          for l in z[f"{tag}{i}/levels"]]
                grids.append(DeformationGrid(levels, direction))
            seqs[tag] = grids
        return GridSequence(int(z["keyframe"]), seqs["f"], seqs["b"])
