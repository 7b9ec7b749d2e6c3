"""Corpus-level reporting: Urban Planning Frechet distances and agent JSDs."""
from __future__ import annotations

import logging
from typing import Callable, Sequence

import numpy as np

from ..scene.types import Scene
from .collision import collision_rate
from .distributions import (
    AGENT_SCALES,
    FeatureHistogram,
    agent_jsd_features,
    compare_histograms,
    fraction_on_lane,
    frechet_1d,
    frechet_multivariate,
    jsd,
)
from .graph import build_lane_graph, endpoint_distance, route_length, urban_planning_features

log = logging.getLogger(__name__)

URBAN_FEATURES = ("connectivity", "density", "reach", "convenience")
URBAN_SCALES = {"connectivity": 10.0, "density": 1.0, "reach": 1.0, "convenience": 10.0}
DEGREE_EDGES = np.arange(-0.5, 16.5, 1.0)


def urban_feature_lists(scenes: Sequence[Scene]) -> dict[str, list[float]]:
    out: dict[str, list[float]] = {k: [] for k in URBAN_FEATURES}
    for s in scenes:
        f = urban_planning_features(build_lane_graph(s))
        out["connectivity"] += f.connectivity
        out["density"].append(f.density)
        out["reach"] += f.reach
        out["convenience"] += f.convenience
    return out


def urban_planning_report(real: Sequence[Scene], gen: Sequence[Scene]) -> dict[str, dict]:
    a, b = urban_feature_lists(real), urban_feature_lists(gen)
    out = {}
    for k in URBAN_FEATURES:
        if not a[k] or not b[k]:
            out[f"urban_{k}_fd"] = {"raw": None, "scaled": None, "n_samples": 0}
            continue
        raw = frechet_1d(a[k], b[k])
        out[f"urban_{k}_fd"] = {"raw": raw, "scaled": raw * URBAN_SCALES[k], "n_samples": min(len(a[k]), len(b[k]))}
    return out


def connectivity_jsd(real: Sequence[Scene], gen: Sequence[Scene]) -> float:
    """JSD between keypoint-degree histograms (integer bins)."""
    h = [FeatureHistogram.from_values(urban_feature_lists(c)["connectivity"], DEGREE_EDGES) for c in (real, gen)]
    return jsd(h[0], h[1])


def perceptual_fd(real: Sequence[Scene], gen: Sequence[Scene], embed: Callable[[Scene], np.ndarray]) -> float:
    """Multivariate Frechet distance between per-scene embeddings.

    ``embed`` maps a scene to one vector, typically the mean-pooled penultimate
    lane embedding of a separately trained probe autoencoder.
    """
    x = np.stack([np.asarray(embed(s), dtype=np.float64) for s in real])
    y = np.stack([np.asarray(embed(s), dtype=np.float64) for s in gen])
    return frechet_multivariate(x, y)


def _entry(value, n) -> dict:
    return {"raw": value, "scaled": value, "n_samples": n}


def scene_metrics_report(real: Sequence[Scene], gen: Sequence[Scene], embed=None) -> dict[str, dict]:
    """All scene-level realism metrics, as {name: {raw, scaled, n_samples}}."""
    report = urban_planning_report(real, gen)
    try:
        report["connectivity_jsd"] = _entry(connectivity_jsd(real, gen), len(gen))
    except ValueError:
        report["connectivity_jsd"] = _entry(None, 0)
    for k, v in compare_histograms(agent_jsd_features(real), agent_jsd_features(gen), AGENT_SCALES).items():
        report[f"agent_{k}_jsd"] = v
    report["collision_rate_pct"] = _entry(collision_rate(gen), len(gen))
    report["on_lane_fraction"] = _entry(fraction_on_lane(gen), len(gen))
    gaps = [g for g in (endpoint_distance(s) for s in gen) if g is not None]
    report["endpoint_distance"] = _entry(float(np.mean(gaps)) if gaps else None, len(gaps))
    report["route_length"] = _entry(float(np.mean([route_length(s) for s in gen])) if gen else None, len(gen))
    if embed is not None:
        report["perceptual_fd"] = _entry(perceptual_fd(real, gen, embed), len(gen))
    return report


def format_table(report: dict[str, dict]) -> str:
    rows = [f"{'metric':<32}{'raw':>14}{'scaled':>14}{'n':>8}"]
    for k, v in report.items():
        raw = "-" if v["raw"] is None else f"{v['raw']:.4f}"
        scaled = "-" if v["scaled"] is None else f"{v['scaled']:.4f}"
        rows.append(f"{k:<32}{raw:>14}{scaled:>14}{v['n_samples']:>8}")
    return "\n".join(rows)
