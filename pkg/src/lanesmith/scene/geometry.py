"""Polyline and SE(2) helpers shared across the package."""
from __future__ import annotations

import numpy as np


def polyline_length(points: np.ndarray) -> float:
    return float(np.linalg.norm(np.diff(points, axis=0), axis=1).sum())


def cumulative_length(points: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def resample_polyline(points: np.ndarray, n: int) -> np.ndarray:
    """``n`` points equally spaced by arc length, endpoints preserved exactly."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        raise ValueError("resampling needs at least two points")
    if n < 2:
        raise ValueError("n must be >= 2")
    s = cumulative_length(points)
    total = s[-1]
    if total <= 0:
        raise ValueError("zero-length polyline")
    keep = np.concatenate([[True], np.diff(s) > 0])
    s, pts = s[keep], points[keep]
    targets = np.linspace(0.0, total, n)
    out = np.stack([np.interp(targets, s, pts[:, 0]), np.interp(targets, s, pts[:, 1])], axis=1)
    out[0] = points[0]
    out[-1] = points[-1]
    return out


def resample_by_spacing(points: np.ndarray, spacing: float) -> np.ndarray:
    """Points every ``spacing`` metres along the polyline plus the final endpoint."""
    s = cumulative_length(points)
    total = s[-1]
    if total <= 0:
        raise ValueError("zero-length polyline")
    targets = np.arange(0.0, total, spacing)
    if total - targets[-1] > 1e-9:
        targets = np.append(targets, total)
    keep = np.concatenate([[True], np.diff(s) > 0])
    s, pts = s[keep], points[keep]
    return np.stack([np.interp(targets, s, pts[:, 0]), np.interp(targets, s, pts[:, 1])], axis=1)


def rotation(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def to_frame(points: np.ndarray, pose) -> np.ndarray:
    """Express world points in the frame of ``pose`` = (x, y, theta)."""
    x, y, th = pose
    return (np.asarray(points) - np.array([x, y])) @ rotation(th)


def from_frame(points: np.ndarray, pose) -> np.ndarray:
    x, y, th = pose
    return np.asarray(points) @ rotation(th).T + np.array([x, y])


def compose(pose_a, pose_b) -> np.ndarray:
    """SE(2) product a * b (b expressed in a's frame)."""
    xa, ya, ta = pose_a
    xb, yb, tb = pose_b
    c, s = np.cos(ta), np.sin(ta)
    return np.array([xa + c * xb - s * yb, ya + s * xb + c * yb, wrap_angle(ta + tb)])


def wrap_angle(theta):
    return (np.asarray(theta) + np.pi) % (2 * np.pi) - np.pi


def _clip_segment(p0: np.ndarray, p1: np.ndarray, h: float) -> tuple[float, float] | None:
    """Liang-Barsky: parameter interval of p0->p1 inside [-h, h]^2."""
    d = p1 - p0
    t0, t1 = 0.0, 1.0
    for pc, dc in ((p0[0], d[0]), (p0[1], d[1])):
        for p, q in ((-dc, pc + h), (dc, h - pc)):
            if p == 0:
                if q < 0:
                    return None
                continue
            r = q / p
            if p < 0:
                t0 = max(t0, r)
            else:
                t1 = min(t1, r)
    if t0 > t1:
        return None
    return t0, t1


def clip_polyline_to_box(points: np.ndarray, half_extent: float) -> list[tuple[np.ndarray, bool, bool]]:
    """Pieces of a polyline inside the axis-aligned box [-h, h]^2.

    Returns ``(piece, starts_at_original_start, ends_at_original_end)`` for
    every maximal inside run.
    """
    pieces: list[tuple[np.ndarray, bool, bool]] = []
    current: list[np.ndarray] = []
    cur_start = False
    n = len(points)
    for k in range(n - 1):
        p0, p1 = points[k], points[k + 1]
        iv = _clip_segment(p0, p1, half_extent)
        if iv is None:
            if current:
                pieces.append((np.array(current), cur_start, False))
                current = []
            continue
        t0, t1 = iv
        a = p0 + t0 * (p1 - p0)
        b = p0 + t1 * (p1 - p0)
        if not current:
            current = [a]
            cur_start = k == 0 and t0 == 0.0
        elif t0 > 0.0:
            pieces.append((np.array(current), cur_start, False))
            current = [a]
            cur_start = False
        current.append(b)
        if t1 < 1.0:
            pieces.append((np.array(current), cur_start, False))
            current = []
    if current:
        pieces.append((np.array(current), cur_start, True))
    return pieces


def project_to_polyline(point: np.ndarray, points: np.ndarray) -> tuple[float, float, float, float]:
    """Closest point on a polyline.

    Returns (distance, arclength at projection, signed lateral offset with left
    positive, segment heading).
    """
    a = points[:-1]
    d = points[1:] - a
    seg_len2 = np.einsum("ij,ij->i", d, d)
    seg_len2 = np.where(seg_len2 > 0, seg_len2, 1e-30)
    t = np.clip(np.einsum("ij,ij->i", point - a, d) / seg_len2, 0.0, 1.0)
    proj = a + t[:, None] * d
    dist = np.linalg.norm(point - proj, axis=1)
    k = int(np.argmin(dist))
    s = cumulative_length(points)
    arclen = s[k] + t[k] * np.sqrt(seg_len2[k])
    cross = d[k, 0] * (point[1] - a[k, 1]) - d[k, 1] * (point[0] - a[k, 0])
    lateral = float(np.sign(cross) * dist[k])
    return float(dist[k]), float(arclen), lateral, float(np.arctan2(d[k, 1], d[k, 0]))


def points_to_polylines_distance(points: np.ndarray, lanes: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised nearest-lane distance for many points against (N, P, 2) lanes.

    Returns (distance, index of nearest lane, heading of nearest segment).
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(lanes) == 0 or len(points) == 0:
        return np.full(len(points), np.inf), np.full(len(points), -1), np.zeros(len(points))
    a = lanes[:, :-1].reshape(-1, 2)
    d = (lanes[:, 1:] - lanes[:, :-1]).reshape(-1, 2)
    seg_len2 = np.maximum(np.einsum("ij,ij->i", d, d), 1e-30)
    rel = points[:, None, :] - a[None]
    t = np.clip(np.einsum("psj,sj->ps", rel, d) / seg_len2, 0.0, 1.0)
    proj = a[None] + t[..., None] * d[None]
    dist = np.linalg.norm(points[:, None, :] - proj, axis=-1)
    best = np.argmin(dist, axis=1)
    per_lane = lanes.shape[1] - 1
    heading = np.arctan2(d[best, 1], d[best, 0])
    return dist[np.arange(len(points)), best], best // per_lane, heading


def hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Hausdorff distance between two polylines (point-to-segment)."""
    da = max(project_to_polyline(p, b)[0] for p in a)
    db = max(project_to_polyline(p, a)[0] for p in b)
    return max(da, db)


def box_corners(x: float, y: float, cos: float, sin: float, length: float, width: float) -> np.ndarray:
    hl, hw = length / 2, width / 2
    local = np.array([[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]])
    rot = np.array([[cos, -sin], [sin, cos]])
    return local @ rot.T + np.array([x, y])
