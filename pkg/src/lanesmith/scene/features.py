"""Min/max feature normalisation to [-1, 1]."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .types import LANE_POINTS, OBJECT_FIELDS, Scene


@dataclass(frozen=True)
class FeatureStats:
    """Per-field minimum and maximum, computed once over a training corpus.

    Lane fields are (x, y) shared by all 20 points; object fields follow
    ``OBJECT_FIELDS``.
    """

    lane_min: np.ndarray
    lane_max: np.ndarray
    object_min: np.ndarray
    object_max: np.ndarray

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("lane_min", "lane_max", "object_min", "object_max")}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureStats":
        return cls(*(np.asarray(d[k], dtype=np.float64) for k in ("lane_min", "lane_max", "object_min", "object_max")))

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {f"stats.{k}": v for k, v in self.to_dict().items()}


def compute_stats(scenes: list[Scene]) -> FeatureStats:
    if not scenes:
        raise ValueError("cannot compute feature statistics of an empty corpus")
    pts = np.concatenate([s.lanes.reshape(-1, 2) for s in scenes if s.n_lanes])
    objs = [s.objects for s in scenes if s.n_objects]
    objs = np.concatenate(objs) if objs else np.zeros((1, len(OBJECT_FIELDS)))
    return FeatureStats(pts.min(0), pts.max(0), objs.min(0), objs.max(0))


def _forward(values: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, int]:
    span = hi - lo
    degenerate = span <= 0
    if np.any(degenerate):
        warnings.warn("degenerate feature range (min == max); mapping to 0", RuntimeWarning, stacklevel=3)
    safe = np.where(degenerate, 1.0, span)
    out = 2.0 * (values - lo) / safe - 1.0
    out = np.where(degenerate, 0.0, out)
    clipped = int(np.count_nonzero((out < -1.0) | (out > 1.0)))
    return np.clip(out, -1.0, 1.0), clipped


def _inverse(values: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    return (np.asarray(values) + 1.0) * 0.5 * (hi - lo) + lo


def normalize_lanes(lanes: np.ndarray, stats: FeatureStats) -> tuple[np.ndarray, int]:
    """(N, 20, 2) lanes to (N, 40) features in [-1, 1]."""
    out, clipped = _forward(np.asarray(lanes).reshape(-1, LANE_POINTS, 2), stats.lane_min, stats.lane_max)
    return out.reshape(len(out), -1), clipped


def denormalize_lanes(feats: np.ndarray, stats: FeatureStats) -> np.ndarray:
    return _inverse(np.asarray(feats).reshape(-1, LANE_POINTS, 2), stats.lane_min, stats.lane_max)


def normalize_objects(objects: np.ndarray, stats: FeatureStats) -> tuple[np.ndarray, int]:
    return _forward(np.asarray(objects).reshape(-1, len(OBJECT_FIELDS)), stats.object_min, stats.object_max)


def denormalize_objects(feats: np.ndarray, stats: FeatureStats) -> np.ndarray:
    return _inverse(np.asarray(feats).reshape(-1, len(OBJECT_FIELDS)), stats.object_min, stats.object_max)


def normalize_features(scene: Scene, stats: FeatureStats) -> tuple[np.ndarray, np.ndarray, int]:
    """Lane features (N_l, 40), object features (N_o, 7) and the number of clipped values."""
    lanes, c1 = normalize_lanes(scene.lanes, stats)
    objs, c2 = normalize_objects(scene.objects, stats)
    return lanes, objs, c1 + c2
