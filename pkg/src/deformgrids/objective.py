"""Loss terms: robust Chamfer, surface initialization, transformation fitting
with confidence weighting, and isometric regularization.

Nearest-neighbour pairings, robust weights, ``cd_max`` and the confidence
weights are treated as constants for differentiation. A :class:`Frozen` record
captures them so the same objective can be re-evaluated at perturbed
parameters (finite-difference checks).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, NumericalError
from .geometry import as_points
from .grid import GridSequence, StepCache, step_forward
from .spatial import NnIndex, sq_dist

ALPHA = 5.56
W_ISOMETRY = 250.0


@dataclass(frozen=True)
class RobustChamferParams:
    alpha: float = ALPHA

    def __post_init__(self):
        if not self.alpha > 0:
            raise InputError("alpha must be positive")


@dataclass
class ChamferPairing:
    """Nearest-neighbour indices and robust weights in both directions."""

    idx_pq: np.ndarray
    idx_qp: np.ndarray
    w_pq: np.ndarray
    w_qp: np.ndarray


def chamfer_pairing(P, Q, alpha: float = ALPHA, index_q: NnIndex | None = None,
                    index_p: NnIndex | None = None, workers: int = 1) -> ChamferPairing:
    index_q = index_q or NnIndex(Q)
    index_p = index_p or NnIndex(P)
    idx_pq, d_pq = index_q.query(P, workers=workers)
    idx_qp, d_qp = index_p.query(Q, workers=workers)
    return ChamferPairing(idx_pq, idx_qp, np.exp(-alpha * d_pq), np.exp(-alpha * d_qp))


def chamfer_value(P, Q, pair: ChamferPairing) -> float:
    d_pq = sq_dist(P, Q[pair.idx_pq])
    d_qp = sq_dist(P[pair.idx_qp], Q)
    return float(np.mean(pair.w_pq * d_pq) + np.mean(pair.w_qp * d_qp))


def _scatter(n: int, idx: np.ndarray, vals: np.ndarray) -> np.ndarray:
    out = np.empty((n, vals.shape[1]))
    for c in range(vals.shape[1]):
        out[:, c] = np.bincount(idx, weights=vals[:, c], minlength=n)
    return out


def chamfer_grad(P, Q, pair: ChamferPairing) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. ``P`` and ``Q`` with pairings and weights held fixed."""
    a = (2.0 / len(P)) * pair.w_pq[:, None] * (P - Q[pair.idx_pq])
    b = (2.0 / len(Q)) * pair.w_qp[:, None] * (P[pair.idx_qp] - Q)
    gP = a + _scatter(len(P), pair.idx_qp, b)
    gQ = -b - _scatter(len(Q), pair.idx_pq, a)
    return gP, gQ


def robust_chamfer(P, Q, params: RobustChamferParams | float = ALPHA) -> float:
    """Bidirectional mean of Gaussian-weighted squared nearest-neighbour distances."""
    alpha = params.alpha if isinstance(params, RobustChamferParams) else RobustChamferParams(float(params)).alpha
    P = as_points(P, "P")
    Q = as_points(Q, "Q")
    return chamfer_value(P, Q, chamfer_pairing(P, Q, alpha))


def mesh_loss(X0, P_key, alpha: float = ALPHA) -> float:
    return robust_chamfer(X0, P_key, alpha)


# ---- confidence ----------------------------------------------------------------

@dataclass
class ConfidenceState:
    epoch: int = 0
    max_epochs: int = 1
    cd_max: float = 0.0
    frame_cd: dict[int, float] = field(default_factory=dict)

    @property
    def delta(self) -> float:
        return confidence_delta(self.epoch, self.max_epochs)


def confidence_delta(epoch: int, max_epochs: int) -> float:
    e = min(max(epoch, 0), max_epochs)
    return 1.0 - float(np.sqrt(e / max_epochs))


def confidence_weights(conf: ConfidenceState, per_frame_cd) -> list[float]:
    """Cumulative weights along one direction; ``per_frame_cd`` is ordered
    outward from the keyframe."""
    delta = conf.delta
    out = []
    w = 1.0
    for cd in per_frame_cd:
        w *= (1.0 / (1.0 + max(0.0, cd - conf.cd_max))) ** delta
        out.append(w)
    return out


# ---- full objective ------------------------------------------------------------

@dataclass
class LossBreakdown:
    mesh_loss: float
    transform_loss: float
    isometry_loss: float
    total: float
    w_isometry: float
    frame_cd: dict[int, float]
    transport_cd: dict[int, float]
    confidence: dict[int, float]
    cd_max: float

    def to_dict(self) -> dict:
        return {
            "mesh_loss": self.mesh_loss,
            "transform_loss": self.transform_loss,
            "isometry_loss": self.isometry_loss,
            "total": self.total,
            "cd_max": self.cd_max,
            "frame_cd": {str(k): v for k, v in sorted(self.frame_cd.items())},
            "transport_cd": {str(k): v for k, v in sorted(self.transport_cd.items())},
            "confidence": {str(k): v for k, v in sorted(self.confidence.items())},
        }


@dataclass
class Frozen:
    mesh: ChamferPairing
    frame: dict[int, ChamferPairing]
    transport: dict[int, ChamferPairing]
    confidence: dict[int, float]
    cd_max: float


@dataclass
class LossContext:
    grids: GridSequence
    X0: np.ndarray
    positions: dict[int, np.ndarray]
    transported: dict[int, np.ndarray]
    mesh_cache: dict[int, StepCache]
    transport_cache: dict[int, StepCache]
    frozen: Frozen
    breakdown: LossBreakdown


def edge_lengths(x: np.ndarray, edges: np.ndarray) -> np.ndarray:
    return np.sqrt(sq_dist(x[edges[:, 0]], x[edges[:, 1]]))


class Objective:
    """Total loss over a normalized sequence with a fixed keyframe and mesh topology."""

    def __init__(self, frames: list[np.ndarray], keyframe: int, edges: np.ndarray | None,
                 alpha: float = ALPHA, w_isometry: float = W_ISOMETRY,
                 use_isometry: bool = True, workers: int = 1):
        self.frames = [as_points(f, f"frame {i}") for i, f in enumerate(frames)]
        if not 0 <= keyframe < len(self.frames):
            raise InputError("keyframe outside the sequence")
        self.keyframe = keyframe
        self.edges = np.zeros((0, 2), dtype=np.int64) if edges is None else np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if use_isometry and len(self.edges) == 0:
            raise InputError("mesh has no edges")
        self.alpha = RobustChamferParams(alpha).alpha
        self.w_isometry = float(w_isometry)
        self.use_isometry = use_isometry
        self.workers = workers
        self.indices = [NnIndex(f) for f in self.frames]
        self._stencils: dict[tuple, object] = {}

    def _source_stencil(self, t: int, grid, source: int):
        # input clouds never move, so their interpolation weights depend only on topology
        key = (t, grid.topology)
        st = self._stencils.get(key)
        if st is None:
            st = self._stencils[key] = grid.stencil(self.frames[source])
        return st

    @property
    def n_terms(self) -> int:
        return len(self.frames) - 1

    @property
    def effective_w_isometry(self) -> float:
        return self.w_isometry if self.use_isometry else 0.0

    def _check(self, grids: GridSequence, X0):
        if grids.n_frames != len(self.frames) or grids.keyframe != self.keyframe:
            raise InputError(
                f"grids cover {grids.n_frames} frames with keyframe {grids.keyframe}; "
                f"sequence has {len(self.frames)} frames with keyframe {self.keyframe}")
        X0 = np.asarray(X0, dtype=np.float64)
        if X0.ndim != 2 or X0.shape[1] != 3 or len(X0) == 0 or (len(self.edges) and len(X0) <= self.edges.max()):
            raise InputError("template vertices do not match the edge set")
        return X0

    def evaluate(self, grids: GridSequence, X0, conf: ConfidenceState,
                 frozen: Frozen | None = None) -> LossContext:
        X0 = self._check(grids, X0)
        k = self.keyframe
        positions = {k: X0}
        transported = {}
        mesh_cache = {}
        transport_cache = {}
        for path in grids.paths():
            prev = X0
            for t in path:
                g = grids.grid_for(t)
                positions[t], mesh_cache[t] = step_forward(g, prev)
                src = grids.source_of(t)
                transported[t], transport_cache[t] = step_forward(g, self.frames[src], self._source_stencil(t, g, src))
                if not (np.all(np.isfinite(positions[t])) and np.all(np.isfinite(transported[t]))):
                    raise NumericalError(f"non-finite deformed positions at frame {t}")
                prev = positions[t]

        if frozen is None:
            a, w = self.alpha, self.workers
            fr_mesh = chamfer_pairing(X0, self.frames[k], a, index_q=self.indices[k], workers=w)
            fr_frame = {t: chamfer_pairing(positions[t], self.frames[t], a, index_q=self.indices[t], workers=w)
                        for t in transported}
            fr_trans = {t: chamfer_pairing(transported[t], self.frames[t], a, index_q=self.indices[t], workers=w)
                        for t in transported}
        else:
            fr_mesh, fr_frame, fr_trans = frozen.mesh, frozen.frame, frozen.transport

        frame_cd = {t: chamfer_value(positions[t], self.frames[t], fr_frame[t]) for t in transported}
        transport_cd = {t: chamfer_value(transported[t], self.frames[t], fr_trans[t]) for t in transported}
        if frozen is None:
            cd_max = max(transport_cd.values())
            conf.cd_max = cd_max
            conf.frame_cd = dict(frame_cd)
            weights = {}
            for path in grids.paths():
                weights.update(zip(path, confidence_weights(conf, [frame_cd[t] for t in path])))
            frozen = Frozen(fr_mesh, fr_frame, fr_trans, weights, cd_max)

        n = self.n_terms
        mesh = chamfer_value(X0, self.frames[k], frozen.mesh)
        transform = 0.0
        for path in grids.paths():
            for t in path:
                transform += frozen.confidence[t] * frame_cd[t] + transport_cd[t]
        transform /= n
        iso = 0.0
        for path in (grids.paths() if len(self.edges) else []):
            for t in path:
                s = grids.source_of(t)
                iso += np.sum(np.abs(edge_lengths(positions[t], self.edges) - edge_lengths(positions[s], self.edges)))
        iso = float(iso) / (n * len(self.edges)) if len(self.edges) else 0.0
        w_iso = self.effective_w_isometry
        bd = LossBreakdown(mesh, transform, iso, mesh + transform + w_iso * iso, w_iso,
                           frame_cd, transport_cd, dict(frozen.confidence), frozen.cd_max)
        return LossContext(grids, X0, positions, transported, mesh_cache, transport_cache, frozen, bd)

    def loss(self, grids: GridSequence, X0, conf: ConfidenceState, frozen: Frozen | None = None) -> LossBreakdown:
        return self.evaluate(grids, X0, conf, frozen).breakdown


# ---- functional wrappers -------------------------------------------------------

def transform_loss(grids: GridSequence, X0, frames, conf: ConfidenceState,
                   alpha: float = ALPHA) -> tuple[float, LossBreakdown]:
    obj = Objective(frames, grids.keyframe, None, alpha, use_isometry=False)
    bd = obj.loss(grids, X0, conf)
    return bd.transform_loss, bd


def total_loss(grids: GridSequence, X0, edges, frames, conf: ConfidenceState, alpha: float = ALPHA,
               w_isometry: float = W_ISOMETRY) -> LossBreakdown:
    return Objective(frames, grids.keyframe, edges, alpha, w_isometry).loss(grids, X0, conf)


def cd_max(grids: GridSequence, frames, alpha: float = ALPHA) -> float:
    """Largest one-step transported-cloud robust Chamfer; a plain value."""
    frames = [as_points(f) for f in frames]
    best = 0.0
    for path in grids.paths():
        for t in path:
            p_hat, _ = step_forward(grids.grid_for(t), frames[grids.source_of(t)])
            best = max(best, robust_chamfer(p_hat, frames[t], alpha))
    return best


def isometry_loss(grids: GridSequence, X0, edges) -> float:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(edges) == 0:
        raise InputError("mesh has no edges")
    X0 = np.asarray(X0, dtype=np.float64)
    total = 0.0
    for path in grids.paths():
        prev = X0
        for t in path:
            cur, _ = step_forward(grids.grid_for(t), prev)
            total += np.sum(np.abs(edge_lengths(cur, edges) - edge_lengths(prev, edges)))
            prev = cur
    return float(total) / ((grids.n_frames - 1) * len(edges))
