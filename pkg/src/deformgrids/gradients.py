"""Reverse-mode gradients of the total loss and a finite-difference checker.

The backward pass walks each temporal direction from the far end back to the
keyframe, so the gradient on frame ``t`` is complete (direct loss terms plus
everything propagated from later frames) before it is pushed through the
transition that produced it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError
from .grid import (
    GridSequence,
    apply_transform,
    apply_transform_backward,
    cayley_rotation,
    step_backward,
)
from .objective import (
    ConfidenceState,
    Frozen,
    LossContext,
    Objective,
    chamfer_grad,
    _scatter,
)
from .spatial import sq_dist


@dataclass
class GradientBundle:
    """Gradients mirroring the parameter layout: one ``(n, 6)`` array per grid."""

    forward: list[np.ndarray]
    backward: list[np.ndarray]
    vertices: np.ndarray

    def grids(self) -> list[np.ndarray]:
        return list(self.forward) + list(self.backward)

    def flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grids()] + [self.vertices.ravel()])

    def check_finite(self, grids: GridSequence) -> None:
        for g_arr, grid, t in _grid_triples(self, grids):
            if not np.all(np.isfinite(g_arr)):
                bad = np.flatnonzero(~np.all(np.isfinite(g_arr), axis=1))[0]
                li = int(np.searchsorted(grid.offsets, bad, side="right") - 1)
                raise NumericalError(
                    f"non-finite gradient for transition into frame {t}, level {grid.levels[li].level}")
        if not np.all(np.isfinite(self.vertices)):
            raise NumericalError("non-finite gradient on template vertices")


def _grid_triples(bundle: GridSequence | GradientBundle, grids: GridSequence):
    k = grids.keyframe
    for i, (g, grid) in enumerate(zip(bundle.forward, grids.forward)):
        yield g, grid, k + i + 1
    for i, (g, grid) in enumerate(zip(bundle.backward, grids.backward)):
        yield g, grid, k - i - 1


def _isometry_grads(obj: Objective, ctx: LossContext, scale: float, g_pos: dict[int, np.ndarray]) -> None:
    e = obj.edges
    grids = ctx.grids
    for path in grids.paths():
        for t in path:
            s = grids.source_of(t)
            xt, xs = ctx.positions[t], ctx.positions[s]
            dt = xt[e[:, 0]] - xt[e[:, 1]]
            ds = xs[e[:, 0]] - xs[e[:, 1]]
            lt = np.sqrt(sq_dist(xt[e[:, 0]], xt[e[:, 1]]))
            ls = np.sqrt(sq_dist(xs[e[:, 0]], xs[e[:, 1]]))
            coef = scale * np.sign(lt - ls)
            ut = (coef / np.maximum(lt, 1e-300))[:, None] * dt
            us = (coef / np.maximum(ls, 1e-300))[:, None] * ds
            n = len(xt)
            g_pos[t] += _scatter(n, e[:, 0], ut) - _scatter(n, e[:, 1], ut)
            g_pos[s] -= _scatter(n, e[:, 0], us) - _scatter(n, e[:, 1], us)


def backward(obj: Objective, ctx: LossContext, check: bool = True) -> GradientBundle:
    """Exact gradients of ``ctx.breakdown.total`` with the frozen quantities held constant."""
    grids = ctx.grids
    fz = ctx.frozen
    k = grids.keyframe
    n = obj.n_terms
    g_pos = {t: np.zeros_like(x) for t, x in ctx.positions.items()}
    g_grid = {id(g): np.zeros_like(g.params) for g in grids.grids}

    g_pos[k] += chamfer_grad(ctx.X0, obj.frames[k], fz.mesh)[0]
    for t in ctx.transported:
        g_pos[t] += (fz.confidence[t] / n) * chamfer_grad(ctx.positions[t], obj.frames[t], fz.frame[t])[0]
        g_hat = chamfer_grad(ctx.transported[t], obj.frames[t], fz.transport[t])[0] / n
        grid = grids.grid_for(t)
        _, gp = step_backward(grid, ctx.transport_cache[t], g_hat, need_x=False)
        g_grid[id(grid)] += gp
    w_iso = obj.effective_w_isometry
    if w_iso and len(obj.edges):
        _isometry_grads(obj, ctx, w_iso / (n * len(obj.edges)), g_pos)

    for path in grids.paths():
        for t in reversed(path):
            grid = grids.grid_for(t)
            gx, gp = step_backward(grid, ctx.mesh_cache[t], g_pos[t])
            g_grid[id(grid)] += gp
            g_pos[grids.source_of(t)] += gx

    bundle = GradientBundle(
        forward=[g_grid[id(g)] for g in grids.forward],
        backward=[g_grid[id(g)] for g in grids.backward],
        vertices=g_pos[k],
    )
    if check:
        bundle.check_finite(grids)
    return bundle


def value_and_grad(obj: Objective, grids: GridSequence, X0, conf: ConfidenceState,
                   frozen: Frozen | None = None):
    ctx = obj.evaluate(grids, X0, conf, frozen)
    return ctx, backward(obj, ctx)


# ---- finite differences --------------------------------------------------------

@dataclass
class FdEntry:
    name: str
    analytic: float
    numeric: float
    abs_err: float
    rel_err: float
    ok: bool


@dataclass
class FdReport:
    entries: list[FdEntry]
    rtol: float
    atol: float
    failures: list[FdEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def max_rel_err(self) -> float:
        return max((e.rel_err for e in self.entries if max(abs(e.analytic), abs(e.numeric)) > self.atol), default=0.0)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "checked": len(self.entries),
            "rtol": self.rtol,
            "atol": self.atol,
            "max_rel_err": self.max_rel_err,
            "failures": [e.__dict__ for e in self.failures[:50]],
        }


def fd_step(theta: float) -> float:
    return max(1.0, abs(theta)) * 1e-5


def compare(name: str, analytic: float, numeric: float, rtol: float, atol: float) -> FdEntry:
    err = abs(analytic - numeric)
    rel = err / max(abs(analytic), abs(numeric), 1e-300)
    return FdEntry(name, float(analytic), float(numeric), err, rel, bool(err < atol or rel < rtol))


def param_names(grids: GridSequence, n_vertices: int) -> list[str]:
    names = []
    k = grids.keyframe
    for tag, seq, sign in (("fwd", grids.forward, 1), ("bwd", grids.backward, -1)):
        for i, g in enumerate(seq):
            t = k + sign * (i + 1)
            for li, lv in enumerate(g.levels):
                for s, c in enumerate(lv.coords):
                    for ch in range(6):
                        names.append(f"{tag}[->{t}].L{lv.level}{tuple(int(v) for v in c)}.{'zzzttt'[ch]}{ch % 3}")
    names += [f"vertex[{i}].{'xyz'[c]}" for i in range(n_vertices) for c in range(3)]
    return names


def finite_difference_check(obj: Objective, grids: GridSequence, X0, conf: ConfidenceState,
                            rtol: float = 1e-4, atol: float = 1e-7,
                            analytic: GradientBundle | None = None) -> FdReport:
    """Compare analytic gradients with central differences of the frozen objective.

    ``analytic`` may be supplied to test the harness itself.
    """
    X0 = np.array(X0, dtype=np.float64)
    ctx = obj.evaluate(grids, X0, conf)
    frozen = ctx.frozen
    if analytic is None:
        analytic = backward(obj, ctx)
    flat_a = analytic.flat()
    names = param_names(grids, len(X0))
    entries = []
    slots = [g.params for g in grids.grids] + [X0]
    pos = 0
    for arr in slots:
        view = arr.reshape(-1)
        for j in range(view.size):
            orig = view[j]
            h = fd_step(orig)
            view[j] = orig + h
            fp = obj.loss(grids, X0, conf, frozen).total
            view[j] = orig - h
            fm = obj.loss(grids, X0, conf, frozen).total
            view[j] = orig
            entries.append(compare(names[pos], flat_a[pos], (fp - fm) / (2 * h), rtol, atol))
            pos += 1
    return FdReport(entries, rtol, atol, [e for e in entries if not e.ok])


def cayley_jacobian_check(z, x, gy, rtol: float = 1e-6) -> FdReport:
    """FD check of the rotation-and-translation map alone."""
    tf = np.concatenate([np.asarray(z, float), np.zeros(3)])
    x = np.asarray(x, float)
    gy = np.asarray(gy, float)
    g_tf, g_x = apply_transform_backward(tf, x, gy)
    entries = []
    for j in range(3):
        h = fd_step(tf[j])
        tp, tm = tf.copy(), tf.copy()
        tp[j] += h
        tm[j] -= h
        num = (gy @ apply_transform(tp, x) - gy @ apply_transform(tm, x)) / (2 * h)
        entries.append(compare(f"z{j}", g_tf[j], num, rtol, 1e-12))
    R = cayley_rotation(z)
    for j in range(3):
        entries.append(compare(f"x{j}", g_x[j], (R.T @ gy)[j], rtol, 1e-12))
    return FdReport(entries, rtol, 1e-12, [e for e in entries if not e.ok])
