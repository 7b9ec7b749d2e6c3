"""Oriented bounding-box overlap via the separating-axis test."""
from __future__ import annotations

from typing import Iterable

import numpy as np

from ..scene.geometry import box_corners
from ..scene.types import Scene


def object_corners(objects: np.ndarray) -> np.ndarray:
    """(N, 4, 2) corners for (N, 7) object rows."""
    objects = np.asarray(objects, dtype=np.float64).reshape(-1, 7)
    x, y, _, c, s, length, width = objects.T
    norm = np.hypot(c, s)
    norm = np.where(norm > 0, norm, 1.0)
    c, s = c / norm, s / norm
    hl, hw = length / 2, width / 2
    local = np.stack([np.stack([hl, hw], -1), np.stack([hl, -hw], -1), np.stack([-hl, -hw], -1), np.stack([-hl, hw], -1)], 1)
    rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], 1)  # (N, 2, 2)
    return np.einsum("nij,nkj->nki", rot, local) + np.stack([x, y], -1)[:, None]


def _axes(corners: np.ndarray) -> np.ndarray:
    e = np.stack([corners[1] - corners[0], corners[3] - corners[0]])
    return e / np.maximum(np.linalg.norm(e, axis=1, keepdims=True), 1e-12)


def boxes_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """True when two convex quads (4, 2) overlap; touching counts as overlap."""
    for axis in np.concatenate([_axes(a), _axes(b)]):
        pa, pb = a @ axis, b @ axis
        if pa.max() < pb.min() or pb.max() < pa.min():
            return False
    return True


def colliding_pairs(objects: np.ndarray, subject: int | None = None) -> list[tuple[int, int]]:
    """Overlapping (i, j) pairs, i < j; restricted to pairs involving ``subject`` if given."""
    corners = object_corners(objects)
    n = len(corners)
    if n < 2:
        return []
    centers = corners.mean(axis=1)
    radius = np.linalg.norm(corners - centers[:, None], axis=-1).max(axis=1)
    pairs = []
    rows = range(n) if subject is None else [subject]
    for i in rows:
        for j in range(n):
            if j == i or (subject is None and j < i):
                continue
            if np.linalg.norm(centers[i] - centers[j]) > radius[i] + radius[j]:
                continue
            if boxes_overlap(corners[i], corners[j]):
                pairs.append((min(i, j), max(i, j)))
    return pairs


def scene_has_collision(scene: Scene) -> bool:
    return bool(colliding_pairs(scene.objects))


def collision_rate(scenes: Iterable[Scene]) -> float:
    """Percentage of scenes with at least one overlapping pair of boxes."""
    flags = [scene_has_collision(s) for s in scenes]
    return 100.0 * float(np.mean(flags)) if flags else float("nan")


__all__ = ["box_corners", "boxes_overlap", "colliding_pairs", "collision_rate", "object_corners", "scene_has_collision"]
