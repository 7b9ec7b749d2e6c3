"""Vectorized driving-scene model and deterministic preprocessing."""
from .features import FeatureStats, compute_stats, denormalize_lanes, denormalize_objects, normalize_features
from .geometry import resample_polyline
from .io import SceneFormatError, load_scene, save_scene, scene_from_dict, scene_to_dict
from .ops import (
    EmptySceneError,
    apply_ordering,
    crop_fov,
    crop_polylines,
    merge_degree2_lanes,
    order_elements,
    partition_scene,
    transform_scene,
)
from .types import (
    LANE_POINTS,
    MAX_LANES,
    MAX_OBJECTS,
    Adjacency,
    Lane,
    LaneType,
    Object,
    ObjectClass,
    Scene,
    SceneError,
    SceneRegion,
    validate,
)

__all__ = [
    "Adjacency", "EmptySceneError", "FeatureStats", "LANE_POINTS", "Lane", "LaneType", "MAX_LANES",
    "MAX_OBJECTS", "Object", "ObjectClass", "Scene", "SceneError", "SceneFormatError", "SceneRegion",
    "apply_ordering", "compute_stats", "crop_fov", "crop_polylines", "denormalize_lanes", "denormalize_objects",
    "load_scene", "merge_degree2_lanes", "normalize_features", "order_elements", "partition_scene",
    "resample_polyline", "save_scene", "scene_from_dict", "scene_to_dict", "transform_scene", "validate",
]
