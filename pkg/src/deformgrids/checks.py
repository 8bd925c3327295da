"""Self-checks behind ``deformgrids check``: gradients, smoothing solves, interpolation algebra."""

from __future__ import annotations

import itertools

import numpy as np
from scipy.spatial import ConvexHull

from .geometry import TriMesh, icosphere
from .gradients import GradientBundle, backward, cayley_jacobian_check, finite_difference_check
from .grid import (
    DeformationGrid,
    GridLevel,
    GridSequence,
    apply_transform,
    build_pruned,
    cayley_rotation,
    deform_points,
)
from .objective import ConfidenceState, Objective
from .precond import build_grid_laplacian, build_mesh_laplacian


def random_instance(seed: int = 0, levels: int = 2, n_frames: int = 3, n_points: int = 50,
                    n_vertices: int = 20, param_range: float = 0.5):
    """Small random problem: grids with parameters in ``[-param_range, param_range]``,
    frames of uniform points, and a convex-hull mesh on random sphere points."""
    rng = np.random.default_rng(seed)
    frames = [rng.uniform(-0.8, 0.8, (n_points, 3)) for _ in range(n_frames)]
    keyframe = n_frames // 2
    grids = build_pruned(levels, frames, keyframe, prune=False)
    for g in grids.grids:
        g.params[:] = rng.uniform(-param_range, param_range, g.params.shape)
    v = rng.normal(size=(n_vertices, 3))
    v *= 0.6 / np.linalg.norm(v, axis=1, keepdims=True)
    mesh = TriMesh(v, ConvexHull(v).simplices)
    conf = ConfidenceState(epoch=int(rng.integers(0, 10)), max_epochs=10)
    return frames, grids, mesh, conf


def grad_check(seed: int = 0, corrupt: bool = False, rtol: float = 1e-4, atol: float = 1e-7) -> dict:
    frames, grids, mesh, conf = random_instance(seed)
    obj = Objective(frames, grids.keyframe, mesh.edges)
    analytic = None
    if corrupt:
        ctx = obj.evaluate(grids, mesh.vertices, conf)
        b = backward(obj, ctx)
        fwd = [g.copy() for g in b.forward]
        flat = fwd[0].reshape(-1)
        flat[int(np.argmax(np.abs(flat)))] *= 2.0
        analytic = GradientBundle(fwd, b.backward, b.vertices)
    rep = finite_difference_check(obj, grids, mesh.vertices, conf, rtol, atol, analytic)
    rng = np.random.default_rng(seed)
    cay = cayley_jacobian_check(rng.normal(size=3), rng.normal(size=3), rng.normal(size=3))
    out = rep.to_dict()
    out["cayley"] = cay.to_dict()
    out["passed"] = rep.passed and cay.passed
    out["check"] = "grad"
    return out


def _dense_lattice(level: int) -> GridLevel:
    r = 2 * level - 1
    return GridLevel(level, np.array(list(itertools.product(range(r), repeat=3))))


def precond_check(seed: int = 0, lam: float = 0.25, tol: float = 1e-8) -> dict:
    rng = np.random.default_rng(seed)
    cases = []
    lattice = _dense_lattice(3)  # 5^3 vertices
    ops = [("lattice-5", build_grid_laplacian(lattice, lam)),
           ("icosphere-642", build_mesh_laplacian(icosphere(3), 16.0))]
    for name, op in ops:
        g = rng.normal(size=(op.n, 6))
        x = op.smooth(g)
        A = op.system().toarray()
        resid = np.linalg.norm(A @ (A @ x) - g) / np.linalg.norm(g)
        dense = np.linalg.solve(A, np.linalg.solve(A, g))
        const = op.smooth(np.full((op.n, 6), 3.0))
        cases.append({
            "case": name,
            "residual": float(resid),
            "dense_max_diff": float(np.abs(x - dense).max()),
            "constant_error": float(np.abs(const - 3.0).max()),
            "norm_ratio": float(np.linalg.norm(x) / np.linalg.norm(g)),
        })
    ok = all(c["residual"] < tol and c["constant_error"] < 1e-9 and c["norm_ratio"] <= 1.0 for c in cases)
    return {"check": "precond", "passed": bool(ok), "tolerance": tol, "cases": cases}


def interp_check(seed: int = 0, n: int = 10_000) -> dict:
    rng = np.random.default_rng(seed)
    z = rng.uniform(-10, 10, (n, 3))
    z *= np.minimum(1.0, 10.0 / np.linalg.norm(z, axis=1))[:, None]
    R = cayley_rotation(z)
    orth = float(np.abs(np.einsum("nji,njk->nik", R, R) - np.eye(3)).max())
    det = float(np.abs(np.linalg.det(R) - 1.0).max())
    # partition of unity, including points outside the domain that get clamped
    x = rng.uniform(-1.2, 1.2, (n, 3))
    levels = [GridLevel(l, np.array(list(itertools.product(range(2 * l - 1), repeat=3)))) for l in (1, 2, 3, 5)]
    grid = DeformationGrid(levels)
    st = grid.stencil(x)
    per_level, start = [], 0
    for lv in levels:
        k = 1 if lv.resolution == 1 else 8
        per_level.append(st.weights[:, start:start + k].sum(axis=1))
        start += k
    pou = float(max(np.abs(w - 1.0).max() for w in per_level))
    zero = GridSequence(1, [DeformationGrid([GridLevel(l, lv.coords) for l, lv in zip((1, 2, 3, 5), levels)])],
                        [DeformationGrid([GridLevel(2, levels[1].coords)])])
    pts = rng.uniform(-1.5, 1.5, (1000, 3))
    ident = all(np.array_equal(deform_points(zero, pts, t), pts) for t in range(3))
    apply_ok = bool(np.array_equal(apply_transform(np.zeros(6), pts), pts))
    ok = orth < 1e-9 and det < 1e-9 and pou < 1e-12 and ident and apply_ok
    return {"check": "interp", "passed": bool(ok), "cayley_orthogonality": orth, "cayley_det": det,
            "partition_of_unity": pou, "zero_grid_identity": bool(ident and apply_ok)}


CHECKS = {"grad": grad_check, "precond": precond_check, "interp": interp_check}
