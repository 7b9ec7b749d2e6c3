"""Vectorized scene containers.

A scene is stored column-wise in numpy arrays (lanes as an (N_l, 20, 2)
block, objects as an (N_o, 7) block) because every consumer downstream
works on the stacked arrays. ``Object`` and ``Lane`` are per-element views.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

LANE_POINTS = 20
FOV_HALF = 32.0
MAX_LANES = 100
MAX_OBJECTS = {"waymo": 30, "nuplan": 61}
OBJECT_FIELDS = ("x", "y", "speed", "cos", "sin", "length", "width")


class SceneError(ValueError):
    """A scene violates one of its structural invariants."""


class ObjectClass(IntEnum):
    EGO = 0
    VEHICLE = 1
    PEDESTRIAN = 2
    CYCLIST = 3
    STATIC = 4


class LaneType(IntEnum):
    CENTERLINE = 0
    GREEN_LIGHT = 1
    RED_LIGHT = 2


class SceneRegion(IntEnum):
    F_N = 0  # behind the ego, x < 0
    F_P = 1  # ahead of the ego, x > 0


N_OBJECT_CLASSES = len(ObjectClass)
N_LANE_TYPES = len(LaneType)


@dataclass(frozen=True)
class Object:
    x: float
    y: float
    speed: float
    cos: float
    sin: float
    length: float
    width: float
    cls: ObjectClass

    @property
    def heading(self) -> float:
        return float(np.arctan2(self.sin, self.cos))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.speed, self.cos, self.sin, self.length, self.width])


@dataclass(frozen=True)
class Lane:
    points: np.ndarray
    lane_type: LaneType = LaneType.CENTERLINE


@dataclass(frozen=True)
class Adjacency:
    """Successor and left relations; predecessor and right are their transposes."""

    successor: np.ndarray
    left: np.ndarray

    @property
    def predecessor(self) -> np.ndarray:
        return self.successor.T

    @property
    def right(self) -> np.ndarray:
        return self.left.T

    def stack(self) -> np.ndarray:
        """(N, N, 4) tensor ordered successor, predecessor, left, right."""
        return np.stack([self.successor, self.predecessor, self.left, self.right], axis=-1)


def _empty_objects() -> np.ndarray:
    return np.zeros((0, len(OBJECT_FIELDS)))


@dataclass
class Scene:
    lanes: np.ndarray
    lane_types: np.ndarray
    successor: np.ndarray
    left: np.ndarray
    objects: np.ndarray = field(default_factory=_empty_objects)
    object_classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    partitioned: bool = False
    condition: str = "compat"
    lane_order: np.ndarray | None = None
    object_order: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.lanes = np.asarray(self.lanes, dtype=np.float64).reshape(-1, LANE_POINTS, 2)
        n = len(self.lanes)
        self.lane_types = np.asarray(self.lane_types, dtype=np.int64).reshape(n)
        self.successor = np.asarray(self.successor, dtype=bool).reshape(n, n)
        self.left = np.asarray(self.left, dtype=bool).reshape(n, n)
        self.objects = np.asarray(self.objects, dtype=np.float64).reshape(-1, len(OBJECT_FIELDS))
        self.object_classes = np.asarray(self.object_classes, dtype=np.int64).reshape(len(self.objects))

    @property
    def n_lanes(self) -> int:
        return len(self.lanes)

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    @property
    def adjacency(self) -> Adjacency:
        return Adjacency(self.successor, self.left)

    def lane(self, i: int) -> Lane:
        return Lane(self.lanes[i].copy(), LaneType(int(self.lane_types[i])))

    def object(self, i: int) -> Object:
        return Object(*map(float, self.objects[i]), cls=ObjectClass(int(self.object_classes[i])))

    def copy(self, **changes) -> "Scene":
        fields = {
            f.name: (getattr(self, f.name).copy() if hasattr(getattr(self, f.name), "copy") else getattr(self, f.name))
            for f in dataclasses.fields(self)
        }
        fields.update(changes)
        return Scene(**fields)

    def successor_edges(self) -> list[tuple[int, int]]:
        return [tuple(map(int, e)) for e in np.argwhere(self.successor)]

    def left_edges(self) -> list[tuple[int, int]]:
        return [tuple(map(int, e)) for e in np.argwhere(self.left)]

    def lane_regions(self, tol: float = 1e-9) -> np.ndarray:
        """SceneRegion per lane: F_N when the lane lies in x <= 0."""
        if self.n_lanes == 0:
            return np.zeros(0, dtype=np.int64)
        return np.where(self.lanes[:, :, 0].max(axis=1) <= tol, SceneRegion.F_N, SceneRegion.F_P).astype(np.int64)

    def object_regions(self) -> np.ndarray:
        if self.n_objects == 0:
            return np.zeros(0, dtype=np.int64)
        return np.where(self.objects[:, 0] > 0, SceneRegion.F_P, SceneRegion.F_N).astype(np.int64)

    def subset(self, lane_idx, object_idx) -> "Scene":
        """Scene restricted (and reindexed) to the given lane and object indices."""
        lane_idx = np.asarray(lane_idx, dtype=np.int64)
        object_idx = np.asarray(object_idx, dtype=np.int64)
        return Scene(
            lanes=self.lanes[lane_idx],
            lane_types=self.lane_types[lane_idx],
            successor=self.successor[np.ix_(lane_idx, lane_idx)],
            left=self.left[np.ix_(lane_idx, lane_idx)],
            objects=self.objects[object_idx],
            object_classes=self.object_classes[object_idx],
            partitioned=self.partitioned,
            condition=self.condition,
            meta=dict(self.meta),
        )


def empty_adjacency(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.zeros((n, n), dtype=bool), np.zeros((n, n), dtype=bool)


def is_permutation(order: np.ndarray | None, n: int) -> bool:
    if order is None:
        return True
    order = np.asarray(order)
    return order.shape == (n,) and np.array_equal(np.sort(order), np.arange(n))


def validate(scene: Scene, max_objects: int = MAX_OBJECTS["waymo"], require_ego: bool = True,
             half_extent: float = FOV_HALF) -> None:
    """Raise SceneError if any Scene invariant is violated."""
    if scene.n_lanes > MAX_LANES:
        raise SceneError(f"{scene.n_lanes} lanes exceeds the cap of {MAX_LANES}")
    if scene.n_objects > max_objects:
        raise SceneError(f"{scene.n_objects} objects exceeds the limit of {max_objects}")
    if not (np.all(np.isfinite(scene.lanes)) and np.all(np.isfinite(scene.objects))):
        raise SceneError("non-finite coordinates")
    seg = np.linalg.norm(np.diff(scene.lanes, axis=1), axis=-1).sum(axis=1)
    if np.any(seg <= 0):
        raise SceneError(f"degenerate lane(s): {np.flatnonzero(seg <= 0).tolist()}")
    if np.any(np.diag(scene.successor)) or np.any(np.diag(scene.left)):
        raise SceneError("self-loop in adjacency")
    if scene.condition not in ("compat", "incompat"):
        raise SceneError(f"unknown condition label {scene.condition!r}")
    if scene.n_objects:
        o = scene.objects
        if np.any(np.abs(o[:, 3] ** 2 + o[:, 4] ** 2 - 1.0) > 1e-6):
            raise SceneError("object heading is not a unit vector")
        if np.any(np.abs(o[:, :2]) > half_extent + 1e-9):
            raise SceneError("object outside the field of view")
        if np.any(o[:, 2] < 0) or np.any(o[:, 5] <= 0) or np.any(o[:, 6] <= 0):
            raise SceneError("negative speed or non-positive box size")
    if require_ego and int(np.sum(scene.object_classes == ObjectClass.EGO)) != 1:
        raise SceneError("scene must contain exactly one ego object")
    if not is_permutation(scene.lane_order, scene.n_lanes) or not is_permutation(scene.object_order, scene.n_objects):
        raise SceneError("ordering is not a valid permutation")
    if scene.partitioned and scene.n_lanes:
        xs = scene.lanes[:, :, 0]
        crossing = (xs.min(axis=1) < -1e-9) & (xs.max(axis=1) > 1e-9)
        if np.any(crossing):
            raise SceneError(f"partitioned scene has lanes crossing x=0: {np.flatnonzero(crossing).tolist()}")
