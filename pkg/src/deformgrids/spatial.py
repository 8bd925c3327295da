"""Exact nearest-neighbour queries with deterministic tie-breaking."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .geometry import as_points

# Relative slack for detecting (near) ties between the two closest candidates;
# those queries are resolved by an exact scan of every point within the slack.
_TIE_RTOL = 1e-9


def sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


class NnIndex:
    """Static k-d tree over a point set answering exact 1-NN queries.

    Returned squared distances use :func:`sq_dist`; equal distances resolve to
    the smallest point index.
    """

    def __init__(self, points):
        self.points = np.ascontiguousarray(as_points(points))
        self._tree = cKDTree(self.points, balanced_tree=False, compact_nodes=False)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, queries, workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        if n == 1:
            idx = np.zeros(len(q), dtype=np.int64)
            return idx, sq_dist(q, self.points[idx])
        _, cand = self._tree.query(q, k=2, workers=workers)
        d0 = sq_dist(q, self.points[cand[:, 0]])
        d1 = sq_dist(q, self.points[cand[:, 1]])
        idx = np.where(d1 < d0, cand[:, 1], cand[:, 0]).astype(np.int64)
        best = np.minimum(d0, d1)
        tie = np.abs(d1 - d0) <= _TIE_RTOL * np.maximum(d0, d1)
        for qi in np.flatnonzero(tie):
            r = np.sqrt(best[qi]) * (1.0 + 1e-6) + 1e-300
            near = np.asarray(self._tree.query_ball_point(q[qi], r), dtype=np.int64)
            dd = sq_dist(q[qi], self.points[near])
            m = dd.min()
            idx[qi] = near[dd == m].min()
            best[qi] = m
        return idx, best

    def nearest(self, query) -> tuple[int, float]:
        idx, d = self.query(np.asarray(query, dtype=np.float64).reshape(1, 3))
        return int(idx[0]), float(d[0])


def build(points) -> NnIndex:
    return NnIndex(points)
