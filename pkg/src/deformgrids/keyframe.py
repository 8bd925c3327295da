"""Keyframe choice: favour frames with wide surface coverage near the middle of the sequence."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PointCloudSequence, as_points

KEY_RESOLUTION = 128
KEY_GAMMA = 0.001


@dataclass
class KeyframeReport:
    keyframe: int
    occupancy: list[int]
    weights: list[float]
    scores: list[float]

    def to_dict(self) -> dict:
        return {"keyframe": self.keyframe, "occupancy": self.occupancy, "weights": self.weights,
                "scores": self.scores}


def voxel_ids(points, resolution: int = KEY_RESOLUTION) -> np.ndarray:
    """Flat indices of the half-open ``[-1, 1)^3`` bins holding each point; the top face folds into the last bin."""
    p = as_points(points)
    ijk = np.floor((np.clip(p, -1.0, 1.0) + 1.0) * (resolution / 2.0)).astype(np.int64)
    ijk = np.clip(ijk, 0, resolution - 1)
    return (ijk[:, 0] * resolution + ijk[:, 1]) * resolution + ijk[:, 2]


def occupancy(points, resolution: int = KEY_RESOLUTION) -> int:
    return int(np.unique(voxel_ids(points, resolution)).size)


def centrality_weight(t, T: int, gamma: float = KEY_GAMMA):
    return np.exp(-gamma * (np.asarray(t, dtype=np.float64) - T / 2.0) ** 2)


def select_keyframe(seq: PointCloudSequence | list, resolution: int = KEY_RESOLUTION,
                    gamma: float = KEY_GAMMA) -> KeyframeReport:
    frames = seq.frames if isinstance(seq, PointCloudSequence) else list(seq)
    T = len(frames) - 1
    counts = np.array([occupancy(f, resolution) for f in frames], dtype=np.float64)
    w = centrality_weight(np.arange(len(frames)), T, gamma)
    scores = w * counts
    best = int(np.argmax(scores))  # first maximum, i.e. smallest index on ties
    return KeyframeReport(best, [int(c) for c in counts], [float(x) for x in w], [float(s) for s in scores])
