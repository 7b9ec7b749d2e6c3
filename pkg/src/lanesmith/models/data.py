"""Padded, masked mini-batches of ordered and normalised scenes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..scene.features import FeatureStats, normalize_features
from ..scene.ops import apply_ordering, partition_scene
from ..scene.types import LANE_POINTS, MAX_LANES, Scene, SceneRegion

N_LANE_TYPES = 3
N_CLASSES = 5
EDGE_CHANNELS = 4  # successor, predecessor, left, right
CONN_NONE, CONN_SUCC, CONN_LEFT, CONN_RIGHT = range(4)
N_CONN = 4
LANE_DIM = LANE_POINTS * 2
OBJ_DIM = 7


@dataclass
class SceneBatch:
    lanes: np.ndarray  # (B, L, 40) normalised
    lane_types: np.ndarray  # (B, L)
    lane_mask: np.ndarray  # (B, L) bool
    edges: np.ndarray  # (B, L, L, 4)
    conn: np.ndarray  # (B, L, L) connectivity class of ordered pair (i, j)
    objects: np.ndarray  # (B, O, 7) normalised
    classes: np.ndarray  # (B, O)
    obj_mask: np.ndarray  # (B, O) bool
    partitioned: np.ndarray  # (B,) bool
    fn_mask: np.ndarray  # (B, L) lanes in the region behind the ego
    n_fp: np.ndarray  # (B,) number of lanes ahead of the ego
    label: np.ndarray  # (B,) 0 = compat, 1 = incompat

    @property
    def size(self) -> int:
        return len(self.lanes)

    @property
    def pair_mask(self) -> np.ndarray:
        m = self.lane_mask[:, :, None] & self.lane_mask[:, None, :]
        return m & ~np.eye(self.lanes.shape[1], dtype=bool)[None]


def connectivity_classes(scene: Scene) -> np.ndarray:
    n = scene.n_lanes
    c = np.full((n, n), CONN_NONE, dtype=np.int64)
    c[scene.left.T] = CONN_RIGHT
    c[scene.left] = CONN_LEFT
    c[scene.successor] = CONN_SUCC
    np.fill_diagonal(c, CONN_NONE)
    return c


def edge_features(scene: Scene) -> np.ndarray:
    return np.stack([scene.successor, scene.successor.T, scene.left, scene.left.T], axis=-1).astype(np.float64)


def prepare(scene: Scene, partition: bool = False) -> Scene:
    """Optionally partition, then order; the canonical training view of a scene."""
    if partition and not scene.partitioned:
        scene = partition_scene(scene)
    return apply_ordering(scene)


def make_batch(scenes: list[Scene], stats: FeatureStats) -> SceneBatch:
    """Scenes must already be ordered (see ``prepare``)."""
    B = len(scenes)
    L = max(1, max(s.n_lanes for s in scenes))
    O = max(1, max(s.n_objects for s in scenes))
    if L > MAX_LANES:
        raise ValueError(f"scene with {L} lanes exceeds the cap of {MAX_LANES}")
    lanes = np.zeros((B, L, LANE_DIM))
    lane_types = np.zeros((B, L), dtype=np.int64)
    lane_mask = np.zeros((B, L), dtype=bool)
    edges = np.zeros((B, L, L, EDGE_CHANNELS))
    conn = np.zeros((B, L, L), dtype=np.int64)
    objects = np.zeros((B, O, OBJ_DIM))
    classes = np.zeros((B, O), dtype=np.int64)
    obj_mask = np.zeros((B, O), dtype=bool)
    partitioned = np.zeros(B, dtype=bool)
    fn_mask = np.zeros((B, L), dtype=bool)
    n_fp = np.zeros(B, dtype=np.int64)
    label = np.zeros(B, dtype=np.int64)
    for b, s in enumerate(scenes):
        nl, no = s.n_lanes, s.n_objects
        ln, on, _ = normalize_features(s, stats)
        lanes[b, :nl] = ln
        lane_types[b, :nl] = s.lane_types
        lane_mask[b, :nl] = True
        edges[b, :nl, :nl] = edge_features(s)
        conn[b, :nl, :nl] = connectivity_classes(s)
        objects[b, :no] = on
        classes[b, :no] = s.object_classes
        obj_mask[b, :no] = True
        partitioned[b] = s.partitioned
        if s.partitioned:
            regions = s.lane_regions()
            fn_mask[b, :nl] = regions == SceneRegion.F_N
            n_fp[b] = int(np.sum(regions == SceneRegion.F_P))
        label[b] = 1 if s.condition == "incompat" else 0
    return SceneBatch(lanes, lane_types, lane_mask, edges, conn, objects, classes, obj_mask,
                      partitioned, fn_mask, n_fp, label)


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless shuffled index batches."""
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield perm[i:i + batch_size]
