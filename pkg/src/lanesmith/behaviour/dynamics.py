"""Agent state, forward models, routes and the intelligent driver model."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..scene.geometry import cumulative_length, resample_by_spacing, wrap_angle
from ..scene.types import ObjectClass, Scene

DT = 0.1
MAX_ACCEL = 4.0
MAX_STEER = 0.7
V_MAX = 30.0
WHEELBASE_RATIO = 0.8


@dataclass
class AgentStates:
    """Struct-of-arrays agent block; row 0 is not special, see ``ego``."""

    pose: np.ndarray  # (A, 3) x, y, theta
    speed: np.ndarray  # (A,)
    length: np.ndarray
    width: np.ndarray
    cls: np.ndarray
    frozen: np.ndarray  # (A,) bool, stopped for this tick
    exited: np.ndarray  # (A,) bool, left the behaviour window for good

    @classmethod
    def from_objects(cls, objects: np.ndarray, classes: np.ndarray) -> "AgentStates":
        objects = np.asarray(objects, dtype=np.float64).reshape(-1, 7)
        pose = np.stack([objects[:, 0], objects[:, 1], np.arctan2(objects[:, 4], objects[:, 3])], axis=1)
        n = len(objects)
        return cls(pose, objects[:, 2].copy(), objects[:, 5].copy(), objects[:, 6].copy(),
                   np.asarray(classes, dtype=np.int64).copy(), np.zeros(n, bool), np.zeros(n, bool))

    @classmethod
    def from_scene(cls, scene: Scene) -> "AgentStates":
        return cls.from_objects(scene.objects, scene.object_classes)

    def __len__(self) -> int:
        return len(self.speed)

    @property
    def ego(self) -> int:
        idx = np.flatnonzero(self.cls == ObjectClass.EGO)
        return int(idx[0]) if len(idx) else -1

    def to_objects(self) -> np.ndarray:
        th = self.pose[:, 2]
        return np.stack([self.pose[:, 0], self.pose[:, 1], self.speed, np.cos(th), np.sin(th),
                         self.length, self.width], axis=1)

    def copy(self) -> "AgentStates":
        return AgentStates(*(np.array(getattr(self, f)) for f in self.__dataclass_fields__))

    def append(self, other: "AgentStates") -> "AgentStates":
        return AgentStates(*(np.concatenate([getattr(self, f), getattr(other, f)]) for f in self.__dataclass_fields__))


def se2_compose(pose, delta) -> np.ndarray:
    """Vectorised SE(2) product with ``delta`` expressed in the frame of ``pose``."""
    pose = np.asarray(pose, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    c, s = np.cos(pose[..., 2]), np.sin(pose[..., 2])
    x = pose[..., 0] + c * delta[..., 0] - s * delta[..., 1]
    y = pose[..., 1] + s * delta[..., 0] + c * delta[..., 1]
    return np.stack([x, y, wrap_angle(pose[..., 2] + delta[..., 2])], axis=-1)


def relative_delta(pose_a, pose_b) -> np.ndarray:
    """The delta d with se2_compose(pose_a, d) == pose_b."""
    pose_a = np.asarray(pose_a, dtype=np.float64)
    pose_b = np.asarray(pose_b, dtype=np.float64)
    c, s = np.cos(pose_a[..., 2]), np.sin(pose_a[..., 2])
    dx, dy = pose_b[..., 0] - pose_a[..., 0], pose_b[..., 1] - pose_a[..., 1]
    return np.stack([c * dx + s * dy, -s * dx + c * dy, wrap_angle(pose_b[..., 2] - pose_a[..., 2])], axis=-1)


def delta_forward(pose, delta, dt: float = DT) -> tuple[np.ndarray, np.ndarray]:
    """Apply local-frame offsets; speed becomes the displacement over ``dt``."""
    delta = np.asarray(delta, dtype=np.float64)
    return se2_compose(pose, delta), np.hypot(delta[..., 0], delta[..., 1]) / dt


def bicycle_forward(pose, speed, length, accel, steer, dt: float = DT, v_max: float = V_MAX):
    """Kinematic bicycle step with a wheelbase of 0.8 x box length."""
    pose = np.asarray(pose, dtype=np.float64)
    speed = np.asarray(speed, dtype=np.float64)
    a = np.clip(accel, -MAX_ACCEL, MAX_ACCEL)
    d = np.clip(steer, -MAX_STEER, MAX_STEER)
    wheelbase = np.maximum(WHEELBASE_RATIO * np.asarray(length, dtype=np.float64), 1e-3)
    v_new = np.clip(speed + a * dt, 0.0, v_max)
    th = pose[..., 2]
    th_new = th + speed / wheelbase * np.tan(d) * dt
    th_mid = 0.5 * (th + th_new)
    v_mid = 0.5 * (speed + v_new)
    x = pose[..., 0] + v_mid * np.cos(th_mid) * dt
    y = pose[..., 1] + v_mid * np.sin(th_mid) * dt
    return np.stack([x, y, wrap_angle(th_new)], axis=-1), v_new


@dataclass
class IdmParams:
    v0: float = 10.0
    time_headway: float = 1.5
    a: float = 1.5
    b: float = 2.0
    s0: float = 2.0
    delta: float = 4.0


def idm_accel(v, gap, dv, p: IdmParams = IdmParams(), v0=None) -> np.ndarray:
    """IDM acceleration; ``gap`` = inf means a free road. ``dv`` = own minus leader speed."""
    v = np.asarray(v, dtype=np.float64)
    v0 = p.v0 if v0 is None else np.asarray(v0, dtype=np.float64)
    free = 1.0 - (v / np.maximum(v0, 1e-6)) ** p.delta
    s_star = p.s0 + np.maximum(0.0, v * p.time_headway + v * np.asarray(dv) / (2 * np.sqrt(p.a * p.b)))
    gap = np.maximum(np.asarray(gap, dtype=np.float64), 1e-3)
    interact = np.where(np.isfinite(gap), (s_star / np.where(np.isfinite(gap), gap, 1.0)) ** 2, 0.0)
    return p.a * (free - interact)


# ---- routes -------------------------------------------------------------------------------

@dataclass
class Route:
    points: np.ndarray  # (P, 2) at 1 m spacing
    arclength: np.ndarray
    lane_ids: list = field(default_factory=list)
    truncated: bool = False

    @classmethod
    def from_points(cls, points, lane_ids=(), truncated=False, spacing: float = 1.0) -> "Route":
        pts = resample_by_spacing(np.asarray(points, dtype=np.float64), spacing)
        return cls(pts, cumulative_length(pts), list(lane_ids), truncated)

    @property
    def length(self) -> float:
        return float(self.arclength[-1]) if len(self.arclength) else 0.0

    def point_at(self, s) -> np.ndarray:
        s = np.clip(np.asarray(s, dtype=np.float64), 0.0, self.length)
        return np.stack([np.interp(s, self.arclength, self.points[:, 0]),
                         np.interp(s, self.arclength, self.points[:, 1])], axis=-1)

    def project(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(arclength, signed lateral offset, tangent heading) for each point."""
        return project_points(points, self.points, self.arclength)


def project_points(points, poly: np.ndarray, arclength: np.ndarray | None = None):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(poly) < 2:
        d = pts - poly[0]
        return np.zeros(len(pts)), np.hypot(d[:, 0], d[:, 1]), np.zeros(len(pts))
    arclength = cumulative_length(poly) if arclength is None else arclength
    a = poly[:-1]
    d = poly[1:] - a
    seg2 = np.maximum(np.einsum("ij,ij->i", d, d), 1e-30)
    rel = pts[:, None, :] - a[None]
    t = np.clip(np.einsum("psj,sj->ps", rel, d) / seg2, 0.0, 1.0)
    proj = a[None] + t[..., None] * d[None]
    dist = np.linalg.norm(pts[:, None, :] - proj, axis=-1)
    k = np.argmin(dist, axis=1)
    rows = np.arange(len(pts))
    s = arclength[k] + t[rows, k] * np.sqrt(seg2[k])
    cross = d[k, 0] * (pts[:, 1] - a[k, 1]) - d[k, 1] * (pts[:, 0] - a[k, 0])
    lateral = np.where(cross >= 0, 1.0, -1.0) * dist[rows, k]
    return s, lateral, np.arctan2(d[k, 1], d[k, 0])


def _lane_lengths(lanes: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.diff(lanes, axis=1), axis=-1).sum(1)


def match_lane(lanes: np.ndarray, pose, max_dist: float = 3.0, heading_tol: float = np.radians(60)) -> int:
    """Nearest lane whose local direction agrees with the heading; -1 if none."""
    if len(lanes) == 0:
        return -1
    p = np.asarray(pose[:2], dtype=np.float64)
    best, best_d = -1, np.inf
    a = lanes[:, :-1]
    d = lanes[:, 1:] - a
    seg2 = np.maximum((d ** 2).sum(-1), 1e-30)
    t = np.clip(((p - a) * d).sum(-1) / seg2, 0, 1)
    dist = np.linalg.norm(a + t[..., None] * d - p, axis=-1)
    k = np.argmin(dist, axis=1)
    rows = np.arange(len(lanes))
    dmin = dist[rows, k]
    heading = np.arctan2(d[rows, k, 1], d[rows, k, 0])
    ok = (dmin <= max_dist) & (np.abs(wrap_angle(heading - pose[2])) <= heading_tol)
    for i in np.flatnonzero(ok):
        if dmin[i] < best_d:
            best, best_d = int(i), dmin[i]
    return best


def lane_route(lanes: np.ndarray, successor: np.ndarray, pose, min_length: float, rng: np.random.Generator | None,
               start_lane: int | None = None) -> Route:
    """Follow successor edges from the lane under ``pose``.

    Random branch choice when ``rng`` is given, else the lowest index. A
    straight line along the heading is used when no lane matches.
    """
    lane = match_lane(lanes, pose) if start_lane is None else start_lane
    if lane < 0:
        x, y, th = pose
        pts = np.array([[x, y], [x + min_length * np.cos(th), y + min_length * np.sin(th)]])
        return Route.from_points(pts, [], truncated=True)
    s0 = project_points(np.asarray(pose[:2])[None], lanes[lane])[0][0]
    cum = cumulative_length(lanes[lane])
    keep = cum > s0
    start = np.concatenate([np.asarray(pose[:2])[None], lanes[lane][keep]])
    pts = [start]
    total = cum[-1] - s0
    ids = [lane]
    lengths = _lane_lengths(lanes)
    truncated = False
    while total < min_length:
        nxt = np.flatnonzero(successor[lane])
        nxt = [j for j in nxt if j not in ids]
        if not nxt:
            truncated = True
            break
        lane = int(rng.choice(nxt)) if rng is not None else int(nxt[0])
        ids.append(lane)
        pts.append(lanes[lane][1:] if np.linalg.norm(lanes[lane][0] - pts[-1][-1]) < 0.5 else lanes[lane])
        total += lengths[lane]
    pts = np.concatenate(pts)
    if truncated or len(pts) < 2:
        # drive on past the mapped lanes along the final direction
        end = pts[-1]
        if len(pts) >= 2 and np.linalg.norm(pts[-1] - pts[-2]) > 1e-9:
            u = (pts[-1] - pts[-2]) / np.linalg.norm(pts[-1] - pts[-2])
        else:
            u = np.array([np.cos(pose[2]), np.sin(pose[2])])
        pts = np.concatenate([pts, [end + max(min_length - total, 1.0) * u]])
    return Route.from_points(pts, ids, truncated)


def pure_pursuit_steer(pose, route: Route, s_now: float, speed: float, length: float) -> float:
    lookahead = max(4.0, 1.0 * speed)
    target = route.point_at(s_now + lookahead)
    c, s = np.cos(pose[2]), np.sin(pose[2])
    dx, dy = target[0] - pose[0], target[1] - pose[1]
    lx, ly = c * dx + s * dy, -s * dx + c * dy
    d2 = max(lx * lx + ly * ly, 1e-6)
    return float(np.clip(np.arctan(2 * WHEELBASE_RATIO * length * ly / d2), -MAX_STEER, MAX_STEER))


def find_leader(agents: AgentStates, i: int, route: Route, s_i: float, candidates, lane_half_width: float = 1.75):
    """Nearest candidate ahead on ``route``; returns (bumper gap, leader speed along route) or (inf, 0)."""
    cand = np.asarray([j for j in candidates if j != i], dtype=np.int64)
    if len(cand) == 0:
        return np.inf, 0.0
    s, lat, tangent = route.project(agents.pose[cand, :2])
    ahead = (s > s_i) & (np.abs(lat) <= lane_half_width + 0.5 * agents.width[cand]) & (s < route.length - 1e-6)
    if not ahead.any():
        return np.inf, 0.0
    k = np.flatnonzero(ahead)[np.argmin(s[ahead])]
    j = cand[k]
    gap = s[k] - s_i - 0.5 * (agents.length[i] + agents.length[j])
    v_along = agents.speed[j] * np.cos(wrap_angle(agents.pose[j, 2] - tangent[k]))
    return float(gap), float(max(v_along, 0.0))
