"""Deterministic scene preprocessing: cropping, lane merging, partitioning and ordering."""
from __future__ import annotations

import numpy as np

from .geometry import clip_polyline_to_box, polyline_length, resample_polyline, rotation, to_frame
from .types import LANE_POINTS, LaneType, Scene, SceneError

ORDER_EPS = 0.5


class EmptySceneError(SceneError):
    """No lane survived an operation that requires at least one."""


def crop_fov(scene: Scene, center=(0.0, 0.0, 0.0), half_extent: float = 32.0,
             min_piece_length: float = 0.5) -> Scene:
    """Re-express ``scene`` in ``center``'s frame and clip it to the square FOV.

    Lanes are clipped by exact segment/box intersection and resampled to 20
    points; clipped pieces shorter than ``min_piece_length`` are discarded.
    A successor edge survives only between a piece that keeps its lane's
    original end and a piece that keeps its lane's original start.
    """
    return crop_polylines(
        list(scene.lanes), scene.lane_types, scene.successor, scene.left, scene.objects, scene.object_classes,
        center=center, half_extent=half_extent, min_piece_length=min_piece_length,
        condition=scene.condition, meta=scene.meta,
    )


def crop_polylines(polylines, lane_types, successor, left, objects, object_classes, center=(0.0, 0.0, 0.0),
                   half_extent: float = 32.0, min_piece_length: float = 0.5, condition: str = "compat",
                   meta: dict | None = None) -> Scene:
    """``crop_fov`` for polylines of arbitrary length (e.g. dense world-frame lanes)."""
    if half_extent <= 0:
        raise ValueError("half_extent must be positive")
    successor = np.asarray(successor, dtype=bool)
    left_in = np.asarray(left, dtype=bool)
    lane_types = np.asarray(lane_types, dtype=np.int64)
    pieces: list[np.ndarray] = []
    origin: list[int] = []
    keeps_start: list[bool] = []
    keeps_end: list[bool] = []
    for i, lane in enumerate(polylines):
        local = to_frame(np.asarray(lane, dtype=np.float64), center)
        for piece, s0, s1 in clip_polyline_to_box(local, half_extent):
            if polyline_length(piece) < min_piece_length:
                continue
            pieces.append(resample_polyline(piece, LANE_POINTS))
            origin.append(i)
            keeps_start.append(s0)
            keeps_end.append(s1)
    if not pieces:
        raise EmptySceneError("no lane survives the FOV crop")
    n = len(pieces)
    origin_arr = np.array(origin)
    succ = np.zeros((n, n), dtype=bool)
    left_out = np.zeros((n, n), dtype=bool)
    for p in range(n):
        for q in range(n):
            if p == q:
                continue
            i, j = origin[p], origin[q]
            if successor[i, j] and keeps_end[p] and keeps_start[q]:
                succ[p, q] = True
            if left_in[i, j]:
                mid_p = pieces[p][LANE_POINTS // 2]
                if np.min(np.linalg.norm(pieces[q] - mid_p, axis=1)) < 8.0:
                    left_out[p, q] = True

    objects = np.asarray(objects, dtype=np.float64).reshape(-1, 7).copy()
    classes = np.asarray(object_classes, dtype=np.int64).copy()
    if len(objects):
        objects[:, :2] = to_frame(objects[:, :2], center)
        heading = np.arctan2(objects[:, 4], objects[:, 3]) - center[2]
        objects[:, 3], objects[:, 4] = np.cos(heading), np.sin(heading)
        inside = np.all(np.abs(objects[:, :2]) <= half_extent, axis=1)
        objects, classes = objects[inside], classes[inside]
    return Scene(
        lanes=np.array(pieces),
        lane_types=lane_types[origin_arr],
        successor=succ,
        left=left_out,
        objects=objects,
        object_classes=classes,
        partitioned=False,
        condition=condition,
        meta=dict(meta or {}),
    )


def merge_degree2_lanes(scene: Scene) -> Scene:
    """Concatenate lanes joined by a single traversable path until none remain.

    A pair (i, j) merges when j is i's only successor and i is j's only
    predecessor. A closed ring of such lanes collapses to one loop lane whose
    self-successor edge is dropped; its index is listed in
    ``meta["loop_lanes"]``.
    """
    lanes = [l.copy() for l in scene.lanes]
    types = list(scene.lane_types)
    succ = scene.successor.copy()
    left = scene.left.copy()
    alive = list(range(len(lanes)))
    loops: set[int] = set()
    changed = True
    while changed:
        changed = False
        for i in alive:
            outs = np.flatnonzero(succ[i])
            if len(outs) != 1:
                continue
            j = int(outs[0])
            if j == i or np.count_nonzero(succ[:, j]) != 1:
                continue
            merged = np.concatenate([lanes[i], lanes[j][1:]])
            lanes[i] = resample_polyline(merged, LANE_POINTS)
            if types[i] != types[j] and types[i] == LaneType.CENTERLINE:
                types[i] = types[j]
            succ[i, :] = succ[j, :]
            succ[:, j] = False
            succ[j, :] = False
            left[i, :] |= left[j, :]
            left[:, i] |= left[:, j]
            left[j, :] = False
            left[:, j] = False
            if succ[i, i]:
                succ[i, i] = False
                loops.add(i)
            left[i, i] = False
            alive.remove(j)
            loops.discard(j)
            changed = True
            break
    idx = np.array(alive, dtype=np.int64)
    remap = {old: new for new, old in enumerate(alive)}
    meta = dict(scene.meta)
    if loops:
        meta["loop_lanes"] = sorted(remap[i] for i in loops)
    return Scene(
        lanes=np.array([lanes[i] for i in alive]).reshape(-1, LANE_POINTS, 2),
        lane_types=np.array([types[i] for i in alive], dtype=np.int64),
        successor=succ[np.ix_(idx, idx)],
        left=left[np.ix_(idx, idx)],
        objects=scene.objects.copy(),
        object_classes=scene.object_classes.copy(),
        partitioned=scene.partitioned,
        condition=scene.condition,
        meta=meta,
    )


def _split_at_x0(points: np.ndarray) -> list[np.ndarray]:
    """Split a polyline at every crossing of x = 0."""
    pieces: list[np.ndarray] = []
    current = [points[0]]
    side = np.sign(points[0, 0])
    for k in range(1, len(points)):
        p0, p1 = points[k - 1], points[k]
        s1 = np.sign(p1[0])
        if side != 0 and s1 != 0 and s1 != side:
            t = p0[0] / (p0[0] - p1[0])
            cut = p0 + t * (p1 - p0)
            cut[0] = 0.0
            current.append(cut)
            pieces.append(np.array(current))
            current = [cut.copy()]
        if s1 != 0:
            side = s1
        current.append(p1)
    pieces.append(np.array(current))
    return [p for p in pieces if polyline_length(p) > 1e-9]


def partition_scene(scene: Scene) -> Scene:
    """Split every lane that crosses x = 0 and chain the halves with successor edges."""
    if scene.partitioned:
        raise SceneError("scene is already partitioned")
    new_lanes: list[np.ndarray] = []
    types: list[int] = []
    first: list[int] = []
    last: list[int] = []
    origin: list[int] = []
    chain_edges: list[tuple[int, int]] = []
    for i, lane in enumerate(scene.lanes):
        parts = _split_at_x0(lane)
        if len(parts) == 1:
            parts = [lane]
        else:
            parts = [resample_polyline(p, LANE_POINTS) for p in parts]
        start = len(new_lanes)
        for k, p in enumerate(parts):
            new_lanes.append(p)
            types.append(int(scene.lane_types[i]))
            origin.append(i)
            if k:
                chain_edges.append((start + k - 1, start + k))
        first.append(start)
        last.append(len(new_lanes) - 1)
    n = len(new_lanes)
    succ = np.zeros((n, n), dtype=bool)
    left = np.zeros((n, n), dtype=bool)
    for a, b in chain_edges:
        succ[a, b] = True
    for i, j in scene.successor_edges():
        succ[last[i], first[j]] = True
    xs = np.array([p[:, 0].max() <= 1e-9 for p in new_lanes])
    for i, j in scene.left_edges():
        for p in range(first[i], last[i] + 1):
            for q in range(first[j], last[j] + 1):
                if xs[p] == xs[q]:
                    left[p, q] = True
    return Scene(
        lanes=np.array(new_lanes).reshape(-1, LANE_POINTS, 2),
        lane_types=np.array(types, dtype=np.int64),
        successor=succ,
        left=left,
        objects=scene.objects.copy(),
        object_classes=scene.object_classes.copy(),
        partitioned=True,
        condition=scene.condition,
        meta={**scene.meta, "split_origin": origin},
    )


def _extent_keys(points: np.ndarray) -> np.ndarray:
    return np.array([points[:, 0].min(), points[:, 1].min(), points[:, 0].max(), points[:, 1].max()])


def object_corner_keys(objects: np.ndarray) -> np.ndarray:
    """(min x, min y, max x, max y) over each oriented box's corners."""
    if len(objects) == 0:
        return np.zeros((0, 4))
    x, y, c, s, length, width = (objects[:, k] for k in (0, 1, 3, 4, 5, 6))
    hl, hw = length / 2, width / 2
    dx = np.stack([hl * c - hw * s, hl * c + hw * s, -hl * c + hw * s, -hl * c - hw * s], axis=1)
    dy = np.stack([hl * s + hw * c, hl * s - hw * c, -hl * s - hw * c, -hl * s + hw * c], axis=1)
    cx, cy = x[:, None] + dx, y[:, None] + dy
    return np.stack([cx.min(1), cy.min(1), cx.max(1), cy.max(1)], axis=1)


def _tolerant_order(keys: np.ndarray, features: np.ndarray, eps: float) -> np.ndarray:
    """Sort rows by the four keys, treating gaps below ``eps`` as ties.

    Ties are resolved by chaining: after sorting on the current key, runs of
    consecutive values closer than ``eps`` form a group that is ordered by the
    next key. This keeps the order total and independent of input order.
    Remaining ties fall back to the raw feature vector, then the index.
    """

    def rec(idx: list[int], level: int) -> list[int]:
        if len(idx) <= 1:
            return idx
        if level == keys.shape[1]:
            return sorted(idx, key=lambda i: (tuple(features[i]), i))
        idx = sorted(idx, key=lambda i: (keys[i, level], tuple(features[i]), i))
        out: list[int] = []
        group = [idx[0]]
        for a, b in zip(idx, idx[1:]):
            if keys[b, level] - keys[a, level] < eps:
                group.append(b)
            else:
                out.extend(rec(group, level + 1))
                group = [b]
        out.extend(rec(group, level + 1))
        return out

    return np.array(rec(list(range(len(keys))), 0), dtype=np.int64)


def order_elements(scene: Scene, epsilon: float = ORDER_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Lane and object permutations (position k holds the original index).

    In a partitioned scene every F_N element precedes every F_P element.
    """
    lane_keys = np.array([_extent_keys(l) for l in scene.lanes]).reshape(-1, 4)
    lane_feats = scene.lanes.reshape(scene.n_lanes, -1)
    obj_keys = object_corner_keys(scene.objects)
    obj_feats = np.concatenate([scene.objects, scene.object_classes[:, None]], axis=1)

    def grouped(keys, feats, regions):
        if not scene.partitioned:
            return _tolerant_order(keys, feats, epsilon)
        parts = []
        for r in (0, 1):
            sel = np.flatnonzero(regions == r)
            parts.append(sel[_tolerant_order(keys[sel], feats[sel], epsilon)])
        return np.concatenate(parts).astype(np.int64)

    lane_perm = grouped(lane_keys, lane_feats, scene.lane_regions())
    obj_perm = grouped(obj_keys, obj_feats, scene.object_regions())
    return lane_perm, obj_perm


def apply_ordering(scene: Scene, epsilon: float = ORDER_EPS) -> Scene:
    """Reorder lanes and objects (and adjacency) into canonical order."""
    lane_perm, obj_perm = order_elements(scene, epsilon)
    out = scene.subset(lane_perm, obj_perm)
    out.lane_order = lane_perm
    out.object_order = obj_perm
    if "split_origin" in scene.meta:
        out.meta["split_origin"] = [scene.meta["split_origin"][i] for i in lane_perm]
    if "loop_lanes" in scene.meta:
        inv = np.argsort(lane_perm)
        out.meta["loop_lanes"] = sorted(int(inv[i]) for i in scene.meta["loop_lanes"])
    return out


def transform_scene(scene: Scene, pose) -> Scene:
    """Express a scene in the frame of ``pose`` without clipping."""
    lanes = to_frame(scene.lanes.reshape(-1, 2), pose).reshape(scene.lanes.shape)
    objects = scene.objects.copy()
    if len(objects):
        objects[:, :2] = to_frame(objects[:, :2], pose)
        rot = rotation(-pose[2])
        objects[:, 3:5] = objects[:, 3:5] @ rot.T
    return scene.copy(lanes=lanes, objects=objects)
