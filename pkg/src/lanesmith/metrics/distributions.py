"""Histograms, Jensen-Shannon divergence and Frechet distances."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ..scene.geometry import points_to_polylines_distance, wrap_angle
from ..scene.types import ObjectClass, Scene

log = logging.getLogger(__name__)

ON_LANE_DIST = 1.5
VEHICLE_CLASSES = (ObjectClass.EGO, ObjectClass.VEHICLE)


@dataclass
class FeatureHistogram:
    edges: np.ndarray
    counts: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        if self.counts is None:
            self.counts = np.zeros(len(self.edges) - 1)
        self.counts = np.asarray(self.counts, dtype=np.float64)
        if self.counts.shape != (len(self.edges) - 1,):
            raise ValueError("counts must have one entry per bin")
        if np.any(self.counts < 0):
            raise ValueError("histogram counts must be non-negative")

    @classmethod
    def from_values(cls, values, edges) -> "FeatureHistogram":
        """Values are clipped into the edge range, then binned."""
        h = cls(edges)
        h.add(values)
        return h

    def add(self, values) -> None:
        v = np.asarray(values, dtype=np.float64).ravel()
        if v.size == 0:
            return
        v = np.clip(v, self.edges[0], self.edges[-1])
        self.counts += np.histogram(v, bins=self.edges)[0]

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    def probabilities(self) -> np.ndarray:
        t = self.total
        return self.counts / t if t > 0 else self.counts.copy()


def uniform_edges(lo: float, hi: float, *, width: float | None = None, bins: int | None = None) -> np.ndarray:
    if bins is None:
        bins = int(round((hi - lo) / width))
    return np.linspace(lo, hi, bins + 1)


def _kl(p: np.ndarray, m: np.ndarray) -> float:
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / m[nz])))


def jsd(p: FeatureHistogram, q: FeatureHistogram) -> float:
    """Jensen-Shannon divergence in nats between two normalised histograms."""
    if p.edges.shape != q.edges.shape or not np.allclose(p.edges, q.edges, rtol=0, atol=1e-12):
        raise ValueError("histograms have different bin edges")
    if p.total == 0 or q.total == 0:
        raise ValueError("jsd of an empty histogram is undefined")
    pp, qq = p.probabilities(), q.probabilities()
    m = 0.5 * (pp + qq)
    value = 0.5 * (_kl(pp, m) + _kl(qq, m))
    return float(min(max(value, 0.0), np.log(2.0)))


def frechet_1d(a: Sequence[float], b: Sequence[float]) -> float:
    """Frechet distance between Gaussians fitted to two feature lists (not squared)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("frechet_1d needs two non-empty feature lists")
    return float(np.hypot(a.mean() - b.mean(), a.std() - b.std()))


def _sqrtm_psd(m: np.ndarray, floor: float = 1e-10) -> np.ndarray:
    m = 0.5 * (m + m.T)
    w, v = np.linalg.eigh(m)
    return (v * np.sqrt(np.maximum(w, floor))) @ v.T


def frechet_gaussian(mu1, cov1, mu2, cov2, floor: float = 1e-10) -> float:
    """sqrt(|mu1-mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^1/2)).

    The cross term uses the symmetric form (S1^1/2 S2 S1^1/2)^1/2, whose trace
    equals that of (S1 S2)^1/2.
    """
    mu1, mu2 = np.atleast_1d(mu1).astype(float), np.atleast_1d(mu2).astype(float)
    cov1, cov2 = np.atleast_2d(cov1).astype(float), np.atleast_2d(cov2).astype(float)
    r1 = _sqrtm_psd(cov1, floor)
    cross = _sqrtm_psd(r1 @ cov2 @ r1, floor)
    d2 = float(np.sum((mu1 - mu2) ** 2) + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(cross))
    return float(np.sqrt(max(d2, 0.0)))


def gaussian_moments(x: np.ndarray, shrinkage: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    mu = x.mean(axis=0)
    if n < 2:
        cov = np.zeros((d, d))
    else:
        cov = np.cov(x, rowvar=False).reshape(d, d)
    if n < d:
        log.warning("only %d samples for %d-dim embeddings; covariance is ill-conditioned, adding shrinkage", n, d)
        cov = cov + shrinkage * np.eye(d)
    return mu, cov


def frechet_multivariate(x: np.ndarray, y: np.ndarray) -> float:
    mu1, c1 = gaussian_moments(x)
    mu2, c2 = gaussian_moments(y)
    return frechet_gaussian(mu1, c1, mu2, c2)


# ---- agent (initial scene) features ------------------------------------------------

AGENT_FEATURES = ("nearest_distance", "lateral_deviation", "angular_deviation", "length", "width", "speed")
AGENT_EDGES = {
    "nearest_distance": uniform_edges(0, 50, width=1.0),
    "lateral_deviation": uniform_edges(0, 1.5, width=0.1),
    "angular_deviation": uniform_edges(-200, 200, width=5.0),
    "length": uniform_edges(0, 25, width=0.1),
    "width": uniform_edges(0, 5, width=0.1),
    "speed": uniform_edges(0, 50, width=1.0),
}
AGENT_SCALES = {
    "nearest_distance": 10.0, "lateral_deviation": 10.0, "angular_deviation": 100.0,
    "length": 100.0, "width": 100.0, "speed": 100.0,
}


def centerline_lanes(scene: Scene) -> np.ndarray:
    # every lane vector is a centerline; the type only carries the signal state
    return scene.lanes


def vehicle_mask(scene: Scene) -> np.ndarray:
    return np.isin(scene.object_classes, [int(c) for c in VEHICLE_CLASSES])


def agent_feature_values(scene: Scene) -> dict[str, np.ndarray]:
    """Raw per-vehicle values for the six agent features of one scene."""
    veh = scene.objects[vehicle_mask(scene)]
    out: dict[str, np.ndarray] = {}
    xy = veh[:, :2]
    if len(veh) >= 2:
        d = np.linalg.norm(xy[:, None] - xy[None], axis=-1)
        np.fill_diagonal(d, np.inf)
        out["nearest_distance"] = d.min(axis=1)
    else:
        out["nearest_distance"] = np.zeros(0)
    lanes = centerline_lanes(scene)
    dist, _, lane_heading = points_to_polylines_distance(xy, lanes)
    on = dist <= ON_LANE_DIST
    heading = np.arctan2(veh[:, 4], veh[:, 3])
    out["lateral_deviation"] = dist[on]
    out["angular_deviation"] = np.degrees(wrap_angle(heading - lane_heading))[on]
    out["length"] = veh[:, 5]
    out["width"] = veh[:, 6]
    out["speed"] = veh[:, 2]
    return out


def agent_jsd_features(scenes: Iterable[Scene]) -> dict[str, FeatureHistogram]:
    hists = {k: FeatureHistogram(AGENT_EDGES[k]) for k in AGENT_FEATURES}
    for s in scenes:
        for k, v in agent_feature_values(s).items():
            hists[k].add(v)
    return hists


def fraction_on_lane(scenes: Iterable[Scene], classes=VEHICLE_CLASSES, threshold: float = ON_LANE_DIST) -> float:
    """Fraction of agents of the given classes within ``threshold`` of a centerline."""
    hit = total = 0
    for s in scenes:
        mask = np.isin(s.object_classes, [int(c) for c in classes])
        if not mask.any():
            continue
        dist, _, _ = points_to_polylines_distance(s.objects[mask, :2], centerline_lanes(s))
        hit += int(np.sum(dist <= threshold))
        total += int(mask.sum())
    return hit / total if total else float("nan")


# ---- behaviour (rollout) features ---------------------------------------------------

BEHAVIOUR_FEATURES = ("linear_speed", "angular_speed", "acceleration", "nearest_distance")
BEHAVIOUR_EDGES = {
    "linear_speed": uniform_edges(0, 30, bins=200),
    "angular_speed": uniform_edges(-50, 50, bins=200),
    "acceleration": uniform_edges(-10, 10, bins=200),
    "nearest_distance": uniform_edges(0, 40, bins=200),
}


def behaviour_feature_values(traj: np.ndarray, valid: np.ndarray | None = None, dt: float = 0.1) -> dict[str, np.ndarray]:
    """Per-agent per-step features from (A, T, 3) poses (x, y, heading).

    Angular speed is reported in degrees per second. A feature is only emitted
    where every frame it depends on is valid.
    """
    traj = np.asarray(traj, dtype=np.float64)
    if traj.ndim != 3 or traj.shape[1] < 2:
        raise ValueError("behaviour features need a rollout with at least two timesteps")
    a, t, _ = traj.shape
    valid = np.ones((a, t), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    step = np.diff(traj[:, :, :2], axis=1)
    speed = np.linalg.norm(step, axis=-1) / dt
    v1 = valid[:, 1:] & valid[:, :-1]
    ang = np.degrees(wrap_angle(np.diff(traj[:, :, 2], axis=1))) / dt
    acc = np.diff(speed, axis=1) / dt
    v2 = v1[:, 1:] & v1[:, :-1]
    near = []
    for k in range(t):
        idx = np.flatnonzero(valid[:, k])
        if len(idx) < 2:
            continue
        p = traj[idx, k, :2]
        d = np.linalg.norm(p[:, None] - p[None], axis=-1)
        np.fill_diagonal(d, np.inf)
        near.append(d.min(axis=1))
    return {
        "linear_speed": speed[v1],
        "angular_speed": ang[v1],
        "acceleration": acc[v2],
        "nearest_distance": np.concatenate(near) if near else np.zeros(0),
    }


def behaviour_jsd_features(rollouts, dt: float = 0.1) -> dict[str, FeatureHistogram]:
    """``rollouts`` yields (traj, valid) pairs or bare (A, T, 3) arrays."""
    hists = {k: FeatureHistogram(BEHAVIOUR_EDGES[k]) for k in BEHAVIOUR_FEATURES}
    for r in rollouts:
        traj, valid = r if isinstance(r, tuple) else (r, None)
        for k, v in behaviour_feature_values(traj, valid, dt).items():
            hists[k].add(v)
    return hists


def compare_histograms(a: dict[str, FeatureHistogram], b: dict[str, FeatureHistogram], scales=None) -> dict[str, dict]:
    """Per-feature {raw, scaled, n_samples}; features empty on either side are reported as missing."""
    out = {}
    for k in a:
        n = int(min(a[k].total, b[k].total))
        if n == 0:
            out[k] = {"raw": None, "scaled": None, "n_samples": 0}
            continue
        raw = jsd(a[k], b[k])
        scale = 1.0 if scales is None else scales[k]
        out[k] = {"raw": raw, "scaled": raw * scale, "n_samples": n}
    return out
