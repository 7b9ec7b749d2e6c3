"""Generative closed-loop simulation: routes, map extension by inpainting, FOV stepping."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .behaviour.dynamics import AgentStates, IdmParams, Route, bicycle_forward, match_lane, project_points
from .behaviour.policy import EGO_V0, V0_RANGES, Traffic, ego_collisions, idm_controls, idm_move
from .scene.geometry import from_frame, polyline_length
from .scene.ops import EmptySceneError, crop_polylines, partition_scene
from .scene.types import ObjectClass, Scene, SceneRegion

log = logging.getLogger(__name__)

PLANNER_IDM = IdmParams(v0=15.0, a=2.0)


class Outcome(str, Enum):
    SUCCESS = "success"
    COLLISION = "collision"
    OFFROAD = "offroad"
    TIMEOUT = "timeout"


@dataclass
class SimConfig:
    route_length_target: float = 55.0
    sim_radius: float = 64.0
    behaviour_fov: float = 80.0
    max_agents_per_window: int = 24
    dt: float = 0.1
    time_limit: float | None = None
    kappa: float = 0.0
    offroad_threshold: float = 2.5
    extend_trigger: float = 20.0
    max_extension_retries: int = 3

    def __post_init__(self):
        for name in ("route_length_target", "sim_radius", "behaviour_fov", "dt", "offroad_threshold"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_agents_per_window < 2:
            raise ValueError("max_agents_per_window must be at least 2")
        if self.behaviour_fov < self.sim_radius:
            raise ValueError("behaviour FOV must cover the simulation window")

    @property
    def limit_seconds(self) -> float:
        return self.time_limit if self.time_limit is not None else 9.0 * self.route_length_target / 55.0


# ---- world ----------------------------------------------------------------------------------

@dataclass
class World:
    """World-frame lanes and agents; the ego is the planner."""

    lanes: np.ndarray
    lane_types: np.ndarray
    successor: np.ndarray
    left: np.ndarray
    traffic: Traffic
    route: Route
    seen: np.ndarray  # agents that have been inside the behaviour window
    tiles: list = field(default_factory=list)
    extension_failed: bool = False

    @property
    def agents(self) -> AgentStates:
        return self.traffic.agents

    @property
    def ego(self) -> int:
        return self.traffic.agents.ego


def _longest_path(lanes: np.ndarray, successor: np.ndarray, start: int, target: float, budget: int = 50_000):
    """Longest simple successor path from ``start``; ties keep the lower-index branch."""
    lengths = np.array([polyline_length(l) for l in lanes])
    succ = [sorted(np.flatnonzero(successor[i]).tolist()) for i in range(len(lanes))]
    best = [lengths[start], [start]]
    count = [budget]

    def dfs(path, on, acc):
        if acc > best[0] + 1e-9:
            best[0], best[1] = acc, list(path)
        if acc >= target:
            return
        for v in succ[path[-1]]:
            if v in on or count[0] <= 0:
                continue
            count[0] -= 1
            path.append(v)
            on.add(v)
            dfs(path, on, acc + lengths[v])
            path.pop()
            on.discard(v)

    dfs([start], {start}, lengths[start])
    return best[1]


def _path_points(lanes: np.ndarray, ids: list) -> np.ndarray:
    pts = [lanes[ids[0]]]
    for j in ids[1:]:
        nxt = lanes[j]
        pts.append(nxt[1:] if np.linalg.norm(nxt[0] - pts[-1][-1]) < 0.5 else nxt)
    return np.concatenate(pts)


def _cut(points: np.ndarray, start_s: float, length: float) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    end_s = min(start_s + length, s[-1])
    inner = (s > start_s) & (s < end_s)
    a = np.array([np.interp(start_s, s, points[:, 0]), np.interp(start_s, s, points[:, 1])])
    b = np.array([np.interp(end_s, s, points[:, 0]), np.interp(end_s, s, points[:, 1])])
    return np.concatenate([a[None], points[inner], b[None]])


def build_route(lanes: np.ndarray, successor: np.ndarray, pose, target_length: float) -> Route:
    """Route along successor edges from the lane under ``pose``, cut at ``target_length``."""
    lane = match_lane(lanes, pose)
    if lane < 0:
        raise ValueError("no lane near the start pose")
    ids = _longest_path(lanes, successor, lane, target_length + 64.0)
    pts = _path_points(lanes, ids)
    s0 = float(project_points(np.asarray(pose[:2])[None], pts)[0][0])
    available = polyline_length(pts) - s0
    cut = _cut(pts, s0, target_length)
    return Route.from_points(cut, ids, truncated=available < target_length - 1e-6)


def world_from_scene(scene: Scene, rng: np.random.Generator, cfg: SimConfig, distracted_prob: float = 0.0) -> World:
    traffic = Traffic.from_scene(scene, rng, distracted_prob)
    ego = traffic.agents.ego
    if ego < 0:
        raise ValueError("scene has no ego agent")
    traffic.v0[ego] = PLANNER_IDM.v0
    route = build_route(scene.lanes, scene.successor, traffic.agents.pose[ego], cfg.route_length_target)
    traffic.routes[ego] = route
    return World(scene.lanes.copy(), scene.lane_types.copy(), scene.successor.copy(), scene.left.copy(),
                 traffic, route, np.zeros(len(traffic.agents), dtype=bool))


def route_end_pose(route: Route) -> np.ndarray:
    p = route.points
    d = p[-1] - p[-2]
    return np.array([p[-1, 0], p[-1, 1], np.arctan2(d[1], d[0])])


def behind_scene(world: World, anchor, half_extent: float = 32.0) -> Scene:
    """World content in the trailing half of the window around ``anchor``, in the anchor frame."""
    a = world.agents
    objects = a.to_objects()
    classes = a.cls.copy()
    classes[classes == ObjectClass.EGO] = ObjectClass.VEHICLE
    crop = crop_polylines(world.lanes, world.lane_types, world.successor, world.left, objects, classes,
                          center=anchor, half_extent=half_extent)
    part = partition_scene(crop)
    keep_l = np.flatnonzero(part.lane_regions() == SceneRegion.F_N)
    if len(keep_l) == 0:
        raise EmptySceneError("nothing behind the anchor")
    keep_o = np.flatnonzero(part.object_regions() == SceneRegion.F_N)
    out = part.subset(keep_l, keep_o)
    out.partitioned = False
    out.meta = {}
    return out


def extend_scene(world: World, gen, rng: np.random.Generator, cfg: SimConfig, inpaint_fn=None) -> bool:
    """Inpaint a new tile ahead of the route end and stitch it into the world.

    Returns False (and flags the world) when no lanes could be generated.
    """
    from .models.diffusion import inpaint

    inpaint_fn = inpaint_fn or (lambda s, r: inpaint(gen, s, r))
    anchor = route_end_pose(world.route)
    try:
        scene_fn = behind_scene(world, anchor)
    except EmptySceneError:
        world.extension_failed = True
        return False
    out = None
    for _ in range(cfg.max_extension_retries):
        cand = inpaint_fn(scene_fn, rng)
        if not cand.meta.get("inpaint_empty") and cand.n_lanes > cand.meta.get("n_fn_lanes", scene_fn.n_lanes):
            out = cand
            break
    if out is None:
        world.extension_failed = True
        return False
    n_fn = out.meta.get("n_fn_lanes", scene_fn.n_lanes)
    n_fn_o = out.meta.get("n_fn_objects", scene_fn.n_objects)
    new = np.arange(n_fn, out.n_lanes)
    base = len(world.lanes)
    new_lanes = from_frame(out.lanes[new].reshape(-1, 2), anchor).reshape(-1, out.lanes.shape[1], 2)
    n_total = base + len(new)
    succ = np.zeros((n_total, n_total), dtype=bool)
    left = np.zeros((n_total, n_total), dtype=bool)
    succ[:base, :base] = world.successor
    left[:base, :base] = world.left
    succ[base:, base:] = out.successor[np.ix_(new, new)]
    left[base:, base:] = out.left[np.ix_(new, new)]
    # seam edges: map decoded F_N lanes to the world lane ending closest to them
    ends = world.lanes[:, -1]
    starts = world.lanes[:, 0]
    for i, j in out.successor_edges():
        if i < n_fn <= j:
            end_w = from_frame(out.lanes[i, -1][None], anchor)[0]
            k = int(np.argmin(np.linalg.norm(ends - end_w, axis=1)))
            if np.linalg.norm(ends[k] - end_w) < 2.0:
                succ[k, base + j - n_fn] = True
        elif j < n_fn <= i:
            start_w = from_frame(out.lanes[j, 0][None], anchor)[0]
            k = int(np.argmin(np.linalg.norm(starts - start_w, axis=1)))
            if np.linalg.norm(starts[k] - start_w) < 2.0:
                succ[base + i - n_fn, k] = True
    # the route's own end lane continues into the nearest new lane start
    end_lane = world.route.lane_ids[-1] if world.route.lane_ids else -1
    if end_lane >= 0 and len(new):
        d = np.linalg.norm(new_lanes[:, 0] - world.lanes[end_lane, -1], axis=1)
        if d.min() < 2.0 and not succ[end_lane, base:].any():
            succ[end_lane, base + int(np.argmin(d))] = True
    world.lanes = np.concatenate([world.lanes, new_lanes])
    world.lane_types = np.concatenate([world.lane_types, out.lane_types[new]])
    world.successor, world.left = succ, left
    _add_agents(world, out, n_fn_o, anchor, rng)
    world.traffic.lanes, world.traffic.successor = world.lanes, world.successor
    _extend_route(world, cfg)
    world.tiles.append({"anchor": anchor.tolist(), "lanes": [int(base), int(n_total)]})
    return True


def _add_agents(world: World, out: Scene, n_fn_o: int, anchor, rng) -> None:
    if out.n_objects <= n_fn_o:
        return
    objs = out.objects[n_fn_o:].copy()
    cls = out.object_classes[n_fn_o:].copy()
    cls[cls == ObjectClass.EGO] = ObjectClass.VEHICLE
    objs[:, :2] = from_frame(objs[:, :2], anchor)
    heading = np.arctan2(objs[:, 4], objs[:, 3]) + anchor[2]
    objs[:, 3], objs[:, 4] = np.cos(heading), np.sin(heading)
    objs[:, 2] = np.maximum(objs[:, 2], 0.0)
    added = AgentStates.from_objects(objs, cls)
    t = world.traffic
    n_old = len(t.agents)
    t.agents = t.agents.append(added)
    v0 = [rng.uniform(*V0_RANGES.get(ObjectClass(int(c)), (EGO_V0, EGO_V0))) for c in cls]
    t.v0 = np.concatenate([t.v0, v0])
    t.ignore_ego = np.concatenate([t.ignore_ego, np.zeros(len(cls), bool)])
    t.routes = t.routes + [None] * len(cls)
    t.refresh_routes(range(n_old, len(t.agents)), rng, force=True)
    world.seen = np.concatenate([world.seen, np.zeros(len(cls), bool)])


def _extend_route(world: World, cfg: SimConfig) -> None:
    r = world.route
    last = r.lane_ids[-1] if r.lane_ids else match_lane(world.lanes, route_end_pose(r))
    if last < 0:
        return
    remaining = cfg.route_length_target - r.length
    ids = _longest_path(world.lanes, world.successor, last, remaining + polyline_length(world.lanes[last]) + 64.0)
    if len(ids) < 2:
        return
    tail = _path_points(world.lanes, ids[1:])
    if np.linalg.norm(tail[0] - r.points[-1]) > 2.0:
        return
    tail = _cut(tail, 0.0, max(remaining, 0.0)) if remaining > 0 else tail[:2]
    pts = np.concatenate([r.points, tail[1:] if np.linalg.norm(tail[0] - r.points[-1]) < 1e-9 else tail])
    world.route = Route.from_points(pts, r.lane_ids + ids[1:], truncated=False)
    world.traffic.routes[world.ego] = world.route


# ---- stepping -------------------------------------------------------------------------------

def in_window(world: World, half: float) -> np.ndarray:
    a = world.agents
    ego = world.ego
    c, s = np.cos(a.pose[ego, 2]), np.sin(a.pose[ego, 2])
    d = a.pose[:, :2] - a.pose[ego, :2]
    lx, ly = c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]
    return (np.abs(lx) <= half) & (np.abs(ly) <= half)


def agent_subsets(world: World, active: np.ndarray, size: int) -> list[list[int]]:
    """Ego plus the nearest (size - 1) active agents, then the next ones, and so on."""
    ego = world.ego
    idx = np.flatnonzero(active)
    idx = idx[idx != ego]
    d = np.hypot(*(world.agents.pose[idx, :2] - world.agents.pose[ego, :2]).T) if len(idx) else np.zeros(0)
    order = idx[np.lexsort((idx, d))]
    step = size - 1
    return [[ego] + order[k:k + step].tolist() for k in range(0, len(order), step)] or [[ego]]


class IdmAgents:
    """Rule-based agent policy with the same interface as the learned one."""

    def __init__(self, params: IdmParams = IdmParams()):
        self.params = params

    def move(self, traffic: Traffic, idx, context, rng, kappa: float = 0.0):
        pose, speed = idm_move(traffic, idx, context, self.params)
        return pose, speed, None, None


@dataclass
class StepRecord:
    t: int
    stepped: dict  # agent -> number of times moved this tick
    subsets: list
    tokens: dict
    bins: dict


def step_world(world: World, policy, cfg: SimConfig, rng: np.random.Generator, t: int = 0,
               planner: str = "idm") -> StepRecord:
    a = world.agents
    ego = world.ego
    inside = in_window(world, cfg.behaviour_fov / 2)
    a.exited |= world.seen & ~inside
    world.seen |= inside
    active = inside & ~a.exited
    a.frozen = ~active
    a.frozen[ego] = False
    world.traffic.refresh_routes([i for i in np.flatnonzero(active) if i != ego], rng)
    subsets = agent_subsets(world, active, cfg.max_agents_per_window)
    new_pose, new_speed = a.pose.copy(), a.speed.copy()
    stepped: dict[int, int] = {}
    tokens: dict[int, int] = {}
    bins: dict[int, int] = {}
    ego_action = None
    for sub in subsets:
        movers = [i for i in sub if i != ego]
        if planner == "policy" and ego_action is None:
            movers = sub
        if not movers:
            continue
        pose, speed, tok, rb = policy.move(world.traffic, movers, sub, rng, cfg.kappa)
        for k, i in enumerate(movers):
            if i == ego:
                ego_action = (pose[k], speed[k])
                stepped[ego] = stepped.get(ego, 0) + 1
                continue
            new_pose[i], new_speed[i] = pose[k], speed[k]
            stepped[i] = stepped.get(i, 0) + 1
            if tok is not None:
                tokens[i], bins[i] = int(tok[k]), int(rb[k])
    if planner == "idm":
        cand = [i for i in np.flatnonzero(active) if i != ego]
        acc, steer, _ = idm_controls(world.traffic, [ego], cand, PLANNER_IDM)
        pose, speed = bicycle_forward(a.pose[ego][None], a.speed[ego:ego + 1], a.length[ego:ego + 1], acc, steer)
        new_pose[ego], new_speed[ego] = pose[0], speed[0]
        stepped[ego] = 1
    elif ego_action is not None:
        new_pose[ego], new_speed[ego] = ego_action
    a.pose, a.speed = new_pose, new_speed
    return StepRecord(t, stepped, subsets, tokens, bins)


# ---- episodes ----------------------------------------------------------------------------------

@dataclass
class Episode:
    outcome: Outcome
    steps: int
    planner_trace: np.ndarray
    log_lines: list
    route_length: float
    extensions: int
    flags: dict = field(default_factory=dict)

    def log_bytes(self) -> bytes:
        return ("\n".join(self.log_lines) + "\n").encode()


def _log_step(world: World, rec: StepRecord) -> list[str]:
    a = world.agents
    lines = []
    for i in sorted(rec.stepped):
        lines.append(json.dumps({
            "t": rec.t, "agent": int(i), "x": round(float(a.pose[i, 0]), 6), "y": round(float(a.pose[i, 1]), 6),
            "theta": round(float(a.pose[i, 2]), 6), "speed": round(float(a.speed[i]), 6),
            "token": rec.tokens.get(i), "return_bin": rec.bins.get(i),
        }, sort_keys=True))
    return lines


def run_episode(world: World, policy, cfg: SimConfig, rng: np.random.Generator, gen=None, inpaint_fn=None,
                planner: str = "idm", step_hook=None) -> Episode:
    """Step until collision, offroad, success or timeout; extend the map on the way when possible."""
    ego = world.ego
    max_steps = int(round(cfg.limit_seconds / cfg.dt))
    trace = [world.agents.pose[ego].copy()]
    lines: list[str] = []
    extensions = 0
    outcome = Outcome.TIMEOUT
    can_extend = gen is not None or inpaint_fn is not None
    for t in range(1, max_steps + 1):
        s_ego = world.traffic.progress(ego)
        while (can_extend and world.route.length < cfg.route_length_target - 1.0 and not world.extension_failed
               and world.route.length - s_ego < cfg.extend_trigger):
            if extend_scene(world, gen, rng, cfg, inpaint_fn):
                extensions += 1
            else:
                break
        rec = step_world(world, policy, cfg, rng, t, planner)
        if step_hook:
            step_hook(world, rec)
        lines.extend(_log_step(world, rec))
        trace.append(world.agents.pose[ego].copy())
        if ego_collisions(world.agents)[~world.agents.exited].any():
            outcome = Outcome.COLLISION
            break
        s, lat, _ = world.route.project(world.agents.pose[ego, :2][None])
        if abs(lat[0]) > cfg.offroad_threshold:
            outcome = Outcome.OFFROAD
            break
        if s[0] >= world.route.length - 1.0:
            outcome = Outcome.SUCCESS
            break
    lines.append(json.dumps({"outcome": outcome.value, "steps": t}, sort_keys=True))
    return Episode(outcome, t, np.array(trace), lines, world.route.length, extensions,
                   {"route_truncated": world.route.truncated, "extension_failed": world.extension_failed})


def episode_metrics(episodes) -> dict:
    """Collision / offroad / success percentages over episodes."""
    if not episodes:
        raise ValueError("need at least one episode")
    n = len(episodes)
    count = {o: sum(e.outcome == o for e in episodes) for o in Outcome}
    return {"collision": 100.0 * count[Outcome.COLLISION] / n, "offroad": 100.0 * count[Outcome.OFFROAD] / n,
            "success": 100.0 * count[Outcome.SUCCESS] / n, "timeout": 100.0 * count[Outcome.TIMEOUT] / n,
            "episodes": n}


def seed_metrics(per_seed: list) -> dict:
    """Mean and sample std over seeds of each percentage."""
    rows = [episode_metrics(eps) for eps in per_seed]
    out = {}
    for key in ("collision", "offroad", "success"):
        v = np.array([r[key] for r in rows])
        out[key] = {"mean": float(v.mean()), "std": float(v.std(ddof=1)) if len(v) > 1 else 0.0}
    return out


# ---- rendering ----------------------------------------------------------------------------------

CLASS_COLORS = {ObjectClass.EGO: "red", ObjectClass.VEHICLE: "blue", ObjectClass.PEDESTRIAN: "purple",
                ObjectClass.CYCLIST: "green", ObjectClass.STATIC: "gray"}


def render_svg(lanes: np.ndarray, objects: np.ndarray, classes: np.ndarray, center=(0.0, 0.0),
               half_extent: float = 40.0, px_per_m: float = 8.0) -> str:
    """Top-down SVG: lanes in black, boxes coloured by class."""
    from .metrics.collision import object_corners

    size = 2 * half_extent * px_per_m
    cx, cy = center

    def tx(p):
        return (p[..., 0] - cx + half_extent) * px_per_m, (half_extent - (p[..., 1] - cy)) * px_per_m

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size:.0f}" height="{size:.0f}" '
             f'viewBox="0 0 {size:.0f} {size:.0f}">', f'<rect width="{size:.0f}" height="{size:.0f}" fill="white"/>']
    for lane in lanes:
        x, y = tx(np.asarray(lane))
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(x, y))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="black" stroke-width="1"/>')
    if len(objects):
        for corners, c in zip(object_corners(objects), classes):
            x, y = tx(corners)
            pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(x, y))
            color = CLASS_COLORS.get(ObjectClass(int(c)), "black")
            parts.append(f'<polygon points="{pts}" fill="{color}" fill-opacity="0.7" stroke="{color}"/>')
    parts.append("</svg>")
    return "\n".join(parts)


def render_world(world: World) -> str:
    ego = world.ego
    return render_svg(world.lanes, world.agents.to_objects(), world.agents.cls,
                      center=tuple(world.agents.pose[ego, :2]))
