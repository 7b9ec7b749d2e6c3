"""Procedural ground-truth scenes: straights, curves, T-junctions and 4-way intersections."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .metrics.collision import colliding_pairs
from .scene.geometry import cumulative_length, resample_by_spacing
from .scene.io import save_scene
from .scene.ops import apply_ordering, crop_polylines, merge_degree2_lanes
from .scene.types import MAX_LANES, MAX_OBJECTS, LaneType, ObjectClass, Scene, validate

log = logging.getLogger(__name__)

ARM_LENGTH = 90.0
JUNCTION_RADIUS = 9.0
DENSE_SPACING = 0.5


@dataclass
class CorpusConfig:
    seed: int = 0
    n_scenes: int = 2000
    intersection_prob: float = 0.5
    t_junction_share: float = 0.4  # fraction of intersections that are T-junctions
    curve_prob: float = 0.5  # among non-intersection scenes
    signal_prob: float = 0.3  # intersections carrying traffic lights ("incompat" scenes)
    agents: tuple[int, int] = (3, 14)
    speed: tuple[float, float] = (0.0, 15.0)
    lane_spacing: float = 3.5
    lanes_per_direction: tuple[int, int] = (1, 2)
    vru_prob: float = 0.1  # chance an agent is a cyclist or pedestrian
    max_objects: int = MAX_OBJECTS["waymo"]

    def __post_init__(self):
        self.agents = tuple(self.agents)
        self.speed = tuple(self.speed)
        self.lanes_per_direction = tuple(self.lanes_per_direction)
        for name in ("intersection_prob", "t_junction_share", "curve_prob", "signal_prob", "vru_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("agents", "speed", "lanes_per_direction"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is empty: {lo} > {hi}")
        if self.agents[0] < 0 or self.agents[1] + 1 > self.max_objects:
            raise ValueError("agent range must fit under max_objects together with the ego")
        if self.lane_spacing <= 0 or self.n_scenes < 0:
            raise ValueError("lane_spacing must be positive and n_scenes non-negative")


# ---- road network construction (world frame, junction at the origin) -------------------

def _right(d: np.ndarray) -> np.ndarray:
    return np.array([d[1], -d[0]])


def _bezier(p0, p1, p2, p3, n=60) -> np.ndarray:
    t = np.linspace(0, 1, n)[:, None]
    return (1 - t) ** 3 * p0 + 3 * (1 - t) ** 2 * t * p1 + 3 * (1 - t) * t ** 2 * p2 + t ** 3 * p3


class _Network:
    def __init__(self):
        self.lanes: list[np.ndarray] = []
        self.types: list[int] = []
        self.succ: list[tuple[int, int]] = []
        self.left: list[tuple[int, int]] = []
        self.drivable: list[int] = []  # lanes the ego may start on

    def add(self, pts, lane_type=LaneType.CENTERLINE, drivable=False) -> int:
        self.lanes.append(resample_by_spacing(np.asarray(pts, dtype=float), DENSE_SPACING))
        self.types.append(int(lane_type))
        if drivable:
            self.drivable.append(len(self.lanes) - 1)
        return len(self.lanes) - 1

    def crop(self, pose, condition: str) -> Scene:
        n = len(self.lanes)
        succ = np.zeros((n, n), dtype=bool)
        left = np.zeros((n, n), dtype=bool)
        for i, j in self.succ:
            succ[i, j] = True
        for i, j in self.left:
            left[i, j] = True
        return crop_polylines(self.lanes, self.types, succ, left, np.zeros((0, 7)), np.zeros(0), center=pose,
                              condition=condition)


def _parallel_lanes(net: _Network, centre: np.ndarray, n_fwd: int, n_bwd: int, spacing: float) -> None:
    """Lanes offset from a dense reference line; forward lanes to its right, backward ones to its left."""
    tang = np.gradient(centre, axis=0)
    tang /= np.linalg.norm(tang, axis=1, keepdims=True)
    normal_right = np.column_stack([tang[:, 1], -tang[:, 0]])
    fwd = [net.add(centre + normal_right * spacing * (k + 0.5), drivable=True) for k in range(n_fwd)]
    bwd = [net.add((centre - normal_right * spacing * (k + 0.5))[::-1], drivable=True) for k in range(n_bwd)]
    # lane k + 1 sits further right than lane k, so k is its left neighbour
    for group in (fwd, bwd):
        for a, b in zip(group[1:], group[:-1]):
            net.left.append((a, b))


def _straight_road(rng, cfg) -> _Network:
    net = _Network()
    xs = np.linspace(-ARM_LENGTH, ARM_LENGTH, 200)
    n_f, n_b = (int(rng.integers(cfg.lanes_per_direction[0], cfg.lanes_per_direction[1] + 1)) for _ in range(2))
    _parallel_lanes(net, np.column_stack([xs, np.zeros_like(xs)]), n_f, n_b, cfg.lane_spacing)
    return net


def _curved_road(rng, cfg) -> _Network:
    net = _Network()
    radius = rng.uniform(25.0, 90.0)
    span = min(2 * ARM_LENGTH / radius, 1.6 * np.pi)
    th = np.linspace(-span / 2, span / 2, 300) * rng.choice([-1.0, 1.0])
    centre = np.column_stack([radius * np.sin(th), radius * (1 - np.cos(th)) * np.sign(th[-1])])
    n_f, n_b = (int(rng.integers(cfg.lanes_per_direction[0], cfg.lanes_per_direction[1] + 1)) for _ in range(2))
    _parallel_lanes(net, centre, n_f, n_b, cfg.lane_spacing)
    return net


def _junction(rng, cfg, arm_angles) -> tuple[_Network, bool]:
    """One lane per direction on each arm, connectors for every non-U-turn movement."""
    net = _Network()
    half = cfg.lane_spacing / 2
    signal = rng.random() < cfg.signal_prob
    incoming, outgoing, dirs = [], [], []
    r0 = JUNCTION_RADIUS
    for a in arm_angles:
        u = np.array([np.cos(a), np.sin(a)])
        s = np.linspace(ARM_LENGTH, r0, 100)
        inc = u * s[:, None] + _right(-u) * half
        out = u * s[::-1, None] + _right(u) * half
        incoming.append(net.add(inc, drivable=True))
        outgoing.append(net.add(out, drivable=True))
        dirs.append(u)
    for i, ui in enumerate(dirs):
        # a signalised arm is green or red for all of its movements
        light = (LaneType.GREEN_LIGHT if rng.random() < 0.5 else LaneType.RED_LIGHT) if signal else LaneType.CENTERLINE
        for j, uj in enumerate(dirs):
            if i == j:
                continue
            p0 = net.lanes[incoming[i]][-1]
            p3 = net.lanes[outgoing[j]][0]
            k = 0.4 * np.linalg.norm(p3 - p0)
            conn = net.add(_bezier(p0, p0 - ui * k, p3 - uj * k, p3), lane_type=light)
            net.succ += [(incoming[i], conn), (conn, outgoing[j])]
    return net, signal


# ---- agents ------------------------------------------------------------------------

def _agent_dims(rng, cls: ObjectClass) -> tuple[float, float]:
    if cls == ObjectClass.PEDESTRIAN:
        return rng.uniform(0.5, 0.9), rng.uniform(0.5, 0.9)
    if cls == ObjectClass.CYCLIST:
        return rng.uniform(1.6, 2.0), rng.uniform(0.6, 0.9)
    return float(np.clip(rng.normal(4.7, 0.45), 3.8, 6.0)), float(np.clip(rng.normal(1.95, 0.12), 1.6, 2.3))


def _agent_speed(rng, cls: ObjectClass, cfg) -> float:
    if cls == ObjectClass.PEDESTRIAN:
        return rng.uniform(0.0, 1.8)
    if cls == ObjectClass.CYCLIST:
        return rng.uniform(1.0, 7.0)
    return rng.uniform(*cfg.speed)


def _place_agents(scene: Scene, rng, cfg) -> Scene:
    lanes = scene.lanes
    ego_len, ego_w = _agent_dims(rng, ObjectClass.EGO)
    rows = [[0.0, 0.0, rng.uniform(*cfg.speed), 1.0, 0.0, ego_len, ego_w]]
    classes = [int(ObjectClass.EGO)]
    target = int(rng.integers(cfg.agents[0], cfg.agents[1] + 1))
    cum = [cumulative_length(l) for l in lanes]
    weights = np.array([c[-1] for c in cum])
    weights = weights / weights.sum()
    attempts = 0
    while len(rows) - 1 < target and attempts < 40 * (target + 1):
        attempts += 1
        k = int(rng.choice(len(lanes), p=weights))
        s = rng.uniform(0, cum[k][-1])
        seg = int(np.clip(np.searchsorted(cum[k], s) - 1, 0, len(lanes[k]) - 2))
        d = lanes[k][seg + 1] - lanes[k][seg]
        seg_len = np.linalg.norm(d)
        if seg_len < 1e-9:
            continue
        d /= seg_len
        base = lanes[k][seg] + d * (s - cum[k][seg])
        roll = rng.random()
        cls = ObjectClass.VEHICLE
        if roll < cfg.vru_prob:
            cls = ObjectClass.CYCLIST if roll < 0.7 * cfg.vru_prob else ObjectClass.PEDESTRIAN
        lat = float(np.clip(rng.normal(0, 0.25), -0.9, 0.9))
        if cls == ObjectClass.PEDESTRIAN:
            lat = rng.uniform(-1.4, 1.4)
        pos = base + _right(d) * lat
        if np.any(np.abs(pos) > 31.0):
            continue
        heading = np.arctan2(d[1], d[0]) + np.radians(np.clip(rng.normal(0, 3.0), -10.0, 10.0))
        length, width = _agent_dims(rng, cls)
        cand = [pos[0], pos[1], _agent_speed(rng, cls, cfg), np.cos(heading), np.sin(heading), length, width]
        # reject overlaps, with a safety margin on the candidate box
        inflated = np.array(rows + [[*cand[:5], length + 2.0, width + 0.6]])
        if colliding_pairs(inflated, subject=len(rows)):
            continue
        rows.append(cand)
        classes.append(int(cls))
    return scene.copy(objects=np.array(rows), object_classes=np.array(classes, dtype=np.int64))


# ---- public API ------------------------------------------------------------------------

def _ego_pose(net: _Network, rng) -> np.ndarray:
    lane = net.lanes[int(rng.choice(net.drivable))]
    cum = cumulative_length(lane)
    # keep the ego away from the far ends of the long arms
    s = rng.uniform(max(0.0, cum[-1] - ARM_LENGTH + 5.0) if cum[-1] > ARM_LENGTH else 0.0, cum[-1])
    s = min(s, cum[-1] - 1.0)
    k = int(np.clip(np.searchsorted(cum, s) - 1, 0, len(lane) - 2))
    d = lane[k + 1] - lane[k]
    p = lane[k] + d / np.linalg.norm(d) * (s - cum[k])
    return np.array([p[0], p[1], np.arctan2(d[1], d[0])])


def generate_scene(cfg: CorpusConfig, index: int) -> Scene:
    rng = np.random.default_rng([cfg.seed, index])
    for _ in range(200):
        kind = "straight"
        signal = False
        if rng.random() < cfg.intersection_prob:
            if rng.random() < cfg.t_junction_share:
                kind = "t_junction"
                net, signal = _junction(rng, cfg, [0.0, np.pi / 2 * rng.choice([-1, 1]), np.pi])
            else:
                kind = "four_way"
                net, signal = _junction(rng, cfg, [0.0, np.pi / 2, np.pi, 3 * np.pi / 2])
        elif rng.random() < cfg.curve_prob:
            kind = "curve"
            net = _curved_road(rng, cfg)
        else:
            net = _straight_road(rng, cfg)
        pose = _ego_pose(net, rng)
        if kind in ("t_junction", "four_way") and np.hypot(pose[0], pose[1]) > 40.0:
            continue  # keep the junction in view
        scene = merge_degree2_lanes(net.crop(pose, "incompat" if signal else "compat"))
        if scene.n_lanes > MAX_LANES:
            continue
        scene = _place_agents(scene, rng, cfg)
        scene = apply_ordering(scene)
        scene.meta = {"kind": kind, "index": index}
        validate(scene, max_objects=cfg.max_objects)
        return scene
    raise RuntimeError(f"could not generate scene {index} within the lane budget")


def generate_corpus(cfg: CorpusConfig) -> list[Scene]:
    return [generate_scene(cfg, i) for i in range(cfg.n_scenes)]


def split_of(seed: int, index: int) -> str:
    """Deterministic 90/10 train/test assignment from a hash of (seed, index)."""
    h = hashlib.sha256(f"{seed}:{index}".encode()).digest()
    return "test" if int.from_bytes(h[:4], "little") % 10 == 0 else "train"


def split_corpus(scenes: list[Scene], seed: int) -> tuple[list[Scene], list[Scene]]:
    train, test = [], []
    for i, s in enumerate(scenes):
        (test if split_of(seed, i) == "test" else train).append(s)
    return train, test


def write_corpus(out_dir, scenes: list[Scene], cfg: CorpusConfig) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, s in enumerate(scenes):
        name = f"scene_{i:05d}.json"
        save_scene(out / name, s)
        files.append({"file": name, "split": split_of(cfg.seed, i), "kind": s.meta.get("kind")})
    manifest = {"config": asdict(cfg), "scenes": files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out / "manifest.json"


def read_corpus(path, split: str | None = None) -> list[Scene]:
    from .scene.io import load_scene

    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    return [load_scene(path / e["file"]) for e in manifest["scenes"] if split is None or e["split"] == split]


@dataclass
class CountDistribution:
    """Empirical joint distribution p(N_o, N_l)."""

    n_objects: np.ndarray
    n_lanes: np.ndarray
    probs: np.ndarray
    _cdf: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self._cdf = np.cumsum(self.probs)

    def sample(self, rng, size: int | None = None):
        u = rng.random(size if size is not None else 1)
        k = np.minimum(np.searchsorted(self._cdf, u * self._cdf[-1], side="right"), len(self.probs) - 1)
        out = np.stack([self.n_objects[k], self.n_lanes[k]], axis=-1)
        return tuple(int(v) for v in out[0]) if size is None else out

    def marginal_lanes(self) -> dict[int, float]:
        out: dict[int, float] = {}
        for nl, p in zip(self.n_lanes, self.probs):
            out[int(nl)] = out.get(int(nl), 0.0) + float(p)
        return out

    def objects_given_lanes(self, n_lanes: int) -> dict[int, float]:
        mask = self.n_lanes == n_lanes
        if not mask.any():
            raise KeyError(f"no scene with {n_lanes} lanes")
        z = self.probs[mask].sum()
        return {int(no): float(p / z) for no, p in zip(self.n_objects[mask], self.probs[mask])}

    def to_dict(self) -> dict:
        return {"n_objects": self.n_objects.tolist(), "n_lanes": self.n_lanes.tolist(), "probs": self.probs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "CountDistribution":
        return cls(np.array(d["n_objects"]), np.array(d["n_lanes"]), np.array(d["probs"], dtype=float))


def empirical_count_distribution(scenes) -> CountDistribution:
    pairs = [(s.n_objects, s.n_lanes) for s in scenes]
    if not pairs:
        raise ValueError("empty corpus")
    keys, counts = np.unique(np.array(pairs), axis=0, return_counts=True)
    return CountDistribution(keys[:, 0], keys[:, 1], counts / counts.sum())
