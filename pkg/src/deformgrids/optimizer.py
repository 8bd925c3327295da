"""Preconditioned Adam over all transition grids and the template vertices."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import InputError, NumericalError
from .geometry import TriMesh
from .gradients import GradientBundle, backward
from .grid import GridSequence
from .objective import ConfidenceState, LossBreakdown, Objective
from .precond import LaplacianOperator, build_mesh_laplacian, grid_edges, laplacian_from_edges

log = logging.getLogger(__name__)

# Where the Laplacian smoothing sits relative to Adam. Smoothing the raw gradient
# lets Adam's per-parameter normalization inflate tiny fine-level gradients into
# full-size, spatially incoherent steps; smoothing the Adam direction does not.
BEFORE_ADAM = "before_adam"
AFTER_ADAM = "after_adam"

# Grid step scale used when smoothing is switched off; unsmoothed updates are
# only stable at a tenth of the configured rate.
NO_PRECOND_LR_SCALE = 0.1


@dataclass
class OptimSchedule:
    lr: float = 5e-3
    lr_growth: float = 1.1
    lam: float = 0.25
    lam_growth: float = 1.5
    mesh_lr: float = 1e-4
    mesh_lam: float = 16.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 2000
    precondition: bool = True
    precondition_order: str = AFTER_ADAM
    log_every: int = 10

    def __post_init__(self):
        for name in ("lr", "lr_growth", "lam", "lam_growth", "mesh_lr", "mesh_lam", "eps"):
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InputError("Adam betas must lie in [0, 1)")
        if self.epochs < 1 or self.log_every < 1:
            raise InputError("epochs and log_every must be at least 1")
        if self.precondition_order not in (BEFORE_ADAM, AFTER_ADAM):
            raise InputError(f"unknown precondition_order {self.precondition_order!r}")

    def level_lr(self, level: int) -> float:
        return self.lr * self.lr_growth ** (level - 1)

    def level_lambda(self, level: int) -> float:
        return self.lam * self.lam_growth ** (level - 1)

    def grid_lr(self, level: int) -> float:
        """Step size actually used for a level, including the no-smoothing scale."""
        return self.level_lr(level) * (1.0 if self.precondition else NO_PRECOND_LR_SCALE)

    def to_dict(self) -> dict:
        return asdict(self)


class GridPreconditioner:
    """``(I + lam_l L_l)^-2`` for every level of one grid, solved as one block system."""

    def __init__(self, grid, schedule: OptimSchedule):
        blocks = [schedule.level_lambda(lv.level) * laplacian_from_edges(len(lv), grid_edges(lv))
                  for lv in grid.levels]
        self.sizes = [len(lv) for lv in grid.levels]
        self.op = LaplacianOperator(sp.block_diag(blocks, format="csr") if blocks else sp.csr_matrix((0, 0)), 1.0)

    def smooth(self, g: np.ndarray) -> np.ndarray:
        if g.shape[0] != self.op.n:
            raise InputError("gradient does not match the grid's active-cell topology")
        return self.op.smooth(g)


@dataclass
class AdamMoments:
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def like(cls, a: np.ndarray) -> "AdamMoments":
        return cls(np.zeros_like(a), np.zeros_like(a))


@dataclass
class OptimizationState:
    grid_moments: list[AdamMoments]
    mesh_moments: AdamMoments
    conf: ConfidenceState
    step_count: int = 0
    epoch: int = 0
    best_loss: float = math.inf
    best_epoch: int = -1
    best_grids: GridSequence | None = None
    best_vertices: np.ndarray | None = None

    @classmethod
    def create(cls, grids: GridSequence, vertices: np.ndarray, epochs: int) -> "OptimizationState":
        return cls([AdamMoments.like(g.params) for g in grids.grids], AdamMoments.like(vertices),
                   ConfidenceState(0, epochs))

    def remember(self, loss: float, epoch: int, grids: GridSequence, vertices: np.ndarray) -> None:
        if loss < self.best_loss:
            self.best_loss = loss
            self.best_epoch = epoch
            self.best_grids = grids.copy()
            self.best_vertices = vertices.copy()


def _adam(p: np.ndarray, g: np.ndarray, mom: AdamMoments, lr, sched: OptimSchedule, t: int, smooth=None):
    mom.m *= sched.beta1
    mom.m += (1.0 - sched.beta1) * g
    mom.v *= sched.beta2
    mom.v += (1.0 - sched.beta2) * g * g
    mhat = mom.m / (1.0 - sched.beta1 ** t)
    vhat = mom.v / (1.0 - sched.beta2 ** t)
    d = mhat / (np.sqrt(vhat) + sched.eps)
    if smooth is not None:
        d = smooth(d)
    p -= lr * d


class Optimizer:
    """Owns the schedule and the factorized preconditioners for a fixed topology."""

    def __init__(self, grids: GridSequence, mesh: TriMesh, schedule: OptimSchedule | None = None):
        self.schedule = schedule or OptimSchedule()
        s = self.schedule
        self.grid_precond = [GridPreconditioner(g, s) for g in grids.grids] if s.precondition else None
        self.mesh_precond = build_mesh_laplacian(mesh, s.mesh_lam)
        # per-row learning rate for each grid's flat parameter array
        self.row_lr = []
        for g in grids.grids:
            lr = np.empty((len(g.params), 1))
            for i, lv in enumerate(g.levels):
                lr[g.offsets[i]:g.offsets[i + 1]] = s.grid_lr(lv.level)
            self.row_lr.append(lr)

    def step(self, state: OptimizationState, grids: GridSequence, vertices: np.ndarray,
             grads: GradientBundle) -> None:
        """One preconditioned Adam update of every grid and of ``vertices`` (in place)."""
        s = self.schedule
        glist = grads.grids()
        if len(glist) != len(grids.grids) or len(glist) != len(state.grid_moments):
            raise InputError("gradient bundle does not match the grid sequence")
        grads.check_finite(grids)
        state.step_count += 1
        t = state.step_count
        after = s.precondition_order == AFTER_ADAM
        for i, (grid, g) in enumerate(zip(grids.grids, glist)):
            if g.shape != grid.params.shape:
                raise InputError("gradient shape does not match grid parameters")
            pc = self.grid_precond[i].smooth if self.grid_precond is not None else None
            if pc is not None and not after:
                g = pc(g)
            _adam(grid.params, g, state.grid_moments[i], self.row_lr[i], s, t, pc if after else None)
        gv = grads.vertices
        if gv.shape != vertices.shape:
            raise InputError("vertex gradient shape does not match the template")
        mp = self.mesh_precond.smooth
        if not after:
            gv = mp(gv)
        _adam(vertices, gv, state.mesh_moments, s.mesh_lr, s, t, mp if after else None)


@dataclass
class RunResult:
    grids: GridSequence
    vertices: np.ndarray
    best_loss: float
    best_epoch: int
    history: list[dict] = field(default_factory=list)
    final: LossBreakdown | None = None
    last_grids: GridSequence | None = None
    last_vertices: np.ndarray | None = None


def _record(epoch: int, bd: LossBreakdown, t0: float) -> dict:
    row = {"epoch": epoch}
    row.update(bd.to_dict())
    row["wall_time"] = time.perf_counter() - t0
    return row


def run(objective: Objective, mesh: TriMesh, grids: GridSequence, schedule: OptimSchedule | None = None,
        callback=None) -> RunResult:
    """Joint optimization of ``mesh.vertices`` and every grid for ``schedule.epochs`` epochs.

    Inputs are not modified; the best-loss snapshot is returned together with
    the logged history (one row per ``log_every`` epochs plus the final pass).
    """
    schedule = schedule or OptimSchedule()
    grids = grids.copy()
    X = np.array(mesh.vertices, dtype=np.float64)
    opt = Optimizer(grids, mesh, schedule)
    state = OptimizationState.create(grids, X, schedule.epochs)
    history = []
    t0 = time.perf_counter()
    for epoch in range(schedule.epochs + 1):
        state.epoch = epoch
        state.conf.epoch = epoch
        ctx = objective.evaluate(grids, X, state.conf)
        bd = ctx.breakdown
        if not math.isfinite(bd.total):
            raise NumericalError(f"total loss became non-finite at epoch {epoch}")
        state.remember(bd.total, epoch, grids, X)
        last = epoch == schedule.epochs
        if epoch % schedule.log_every == 0 or last:
            row = _record(epoch, bd, t0)
            history.append(row)
            log.debug("epoch %d total %.6e", epoch, bd.total)
            if callback is not None:
                callback(row)
        if last:
            break
        opt.step(state, grids, X, backward(objective, ctx))
    final = objective.loss(state.best_grids, state.best_vertices, ConfidenceState(schedule.epochs, schedule.epochs))
    return RunResult(state.best_grids, state.best_vertices, state.best_loss, state.best_epoch, history, final,
                     grids, X)
