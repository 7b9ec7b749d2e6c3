"""Scene interchange format (JSON, version 1).

::

    {"version": 1, "partitioned": bool, "condition": "compat" | "incompat",
     "lanes": [{"points": [[x, y] x 20], "type": "center" | "green" | "red"}],
     "adjacency": {"successor": [[i, j], ...], "left": [[i, j], ...]},
     "objects": [{"x", "y", "speed", "cos", "sin", "length", "width", "class"}]}

``predecessor`` and ``right`` may be present in ``adjacency``; they must be
the transposes of ``successor`` and ``left`` or the scene is rejected.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .types import LANE_POINTS, OBJECT_FIELDS, LaneType, ObjectClass, Scene, SceneError

LANE_TYPE_NAMES = {LaneType.CENTERLINE: "center", LaneType.GREEN_LIGHT: "green", LaneType.RED_LIGHT: "red"}
LANE_TYPE_CODES = {v: k for k, v in LANE_TYPE_NAMES.items()}
CLASS_NAMES = {c: c.name.lower() for c in ObjectClass}
CLASS_CODES = {v: k for k, v in CLASS_NAMES.items()}
_TOP_KEYS = {"version", "partitioned", "condition", "lanes", "adjacency", "objects"}


class SceneFormatError(SceneError):
    """Malformed scene JSON."""


def scene_to_dict(scene: Scene) -> dict:
    return {
        "version": 1,
        "partitioned": bool(scene.partitioned),
        "condition": scene.condition,
        "lanes": [
            {"points": lane.tolist(), "type": LANE_TYPE_NAMES[LaneType(int(t))]}
            for lane, t in zip(scene.lanes, scene.lane_types)
        ],
        "adjacency": {
            "successor": [list(e) for e in scene.successor_edges()],
            "left": [list(e) for e in scene.left_edges()],
        },
        "objects": [
            {**{k: float(v) for k, v in zip(OBJECT_FIELDS, row)}, "class": CLASS_NAMES[ObjectClass(int(c))]}
            for row, c in zip(scene.objects, scene.object_classes)
        ],
    }


def _edges(pairs, n: int, name: str) -> np.ndarray:
    m = np.zeros((n, n), dtype=bool)
    for pair in pairs:
        if len(pair) != 2:
            raise SceneFormatError(f"{name} edge must be a pair, got {pair!r}")
        i, j = int(pair[0]), int(pair[1])
        if not (0 <= i < n and 0 <= j < n):
            raise SceneFormatError(f"{name} edge {pair!r} out of range for {n} lanes")
        m[i, j] = True
    return m


def scene_from_dict(d: dict) -> Scene:
    if not isinstance(d, dict):
        raise SceneFormatError("scene must be a JSON object")
    unknown = set(d) - _TOP_KEYS
    if unknown:
        raise SceneFormatError(f"unknown keys: {sorted(unknown)}")
    if d.get("version") != 1:
        raise SceneFormatError(f"unsupported version {d.get('version')!r}")
    try:
        lanes_in = d["lanes"]
        lanes = np.array([l["points"] for l in lanes_in], dtype=np.float64).reshape(len(lanes_in), -1, 2)
        if lanes.shape[1:] != (LANE_POINTS, 2):
            raise SceneFormatError(f"each lane needs exactly {LANE_POINTS} points")
        lane_types = [LANE_TYPE_CODES[l.get("type", "center")] for l in lanes_in]
        n = len(lanes)
        adj = d.get("adjacency", {})
        extra = set(adj) - {"successor", "left", "predecessor", "right"}
        if extra:
            raise SceneFormatError(f"unknown adjacency keys: {sorted(extra)}")
        succ = _edges(adj.get("successor", []), n, "successor")
        left = _edges(adj.get("left", []), n, "left")
        if "predecessor" in adj and not np.array_equal(_edges(adj["predecessor"], n, "predecessor"), succ.T):
            raise SceneFormatError("predecessor edges are not the transpose of successor edges")
        if "right" in adj and not np.array_equal(_edges(adj["right"], n, "right"), left.T):
            raise SceneFormatError("right edges are not the transpose of left edges")
        objs_in = d.get("objects", [])
        objects = np.array([[float(o[k]) for k in OBJECT_FIELDS] for o in objs_in]).reshape(-1, len(OBJECT_FIELDS))
        classes = [CLASS_CODES[o["class"]] for o in objs_in]
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SceneFormatError):
            raise
        raise SceneFormatError(f"malformed scene: {exc!r}") from exc
    condition = d.get("condition", "compat")
    if condition not in ("compat", "incompat"):
        raise SceneFormatError(f"unknown condition {condition!r}")
    return Scene(
        lanes=lanes,
        lane_types=np.array(lane_types, dtype=np.int64),
        successor=succ,
        left=left,
        objects=objects,
        object_classes=np.array(classes, dtype=np.int64),
        partitioned=bool(d.get("partitioned", False)),
        condition=condition,
    )


def dumps(scene: Scene) -> str:
    return json.dumps(scene_to_dict(scene), separators=(",", ":"))


def loads(text: str) -> Scene:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"invalid JSON: {exc}") from exc
    return scene_from_dict(d)


def save_scene(path, scene: Scene) -> None:
    from ..tensor.checkpoint import atomic_write_bytes

    atomic_write_bytes(path, dumps(scene).encode("utf-8"))


def load_scene(path) -> Scene:
    return loads(Path(path).read_text())
