"""Action vocabulary, rewards, returns and exponential tilting."""
from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass

import numpy as np

VOCAB_SIZE = 384
N_RETURN_BINS = 350
HORIZON_STEPS = 20  # 2 s at 10 Hz
COLLISION_PENALTY = -10.0
DISTANCE_CAP = 10.0


@dataclass
class KDiskVocab:
    """Templates of per-step (dx, dy, dtheta) in the agent frame."""

    templates: np.ndarray  # (k, 3)
    theta_weight: float = 1.0

    def __len__(self) -> int:
        return len(self.templates)

    def _scaled(self, x: np.ndarray) -> np.ndarray:
        return x * np.array([1.0, 1.0, self.theta_weight])

    def tokenize(self, delta) -> np.ndarray:
        """Nearest template under the weighted metric; ties go to the lower index."""
        d = np.asarray(delta, dtype=np.float64)
        flat = self._scaled(d.reshape(-1, 3))
        t = self._scaled(self.templates)
        tok = np.empty(len(flat), dtype=np.int64)
        for i in range(0, len(flat), 4096):
            dist = ((flat[i:i + 4096, None, :] - t[None]) ** 2).sum(-1)
            tok[i:i + 4096] = np.argmin(dist, axis=1)
        return tok.reshape(d.shape[:-1]) if d.ndim > 1 else tok[0]

    def detokenize(self, token) -> np.ndarray:
        return self.templates[np.asarray(token)]

    def to_json(self) -> str:
        return json.dumps({"theta_weight": self.theta_weight, "templates": self.templates.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "KDiskVocab":
        d = json.loads(text)
        if isinstance(d, list):
            return cls(np.asarray(d, dtype=np.float64))
        return cls(np.asarray(d["templates"], dtype=np.float64), float(d["theta_weight"]))

    def save(self, path) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, "w") as fh:
            fh.write(self.to_json())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "KDiskVocab":
        with open(path) as fh:
            return cls.from_json(fh.read())


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(len(x))]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for i in range(1, k):
        total = d2.sum()
        j = rng.integers(len(x)) if total <= 0 else rng.choice(len(x), p=d2 / total)
        centers[i] = x[j]
        d2 = np.minimum(d2, ((x - centers[i]) ** 2).sum(1))
    return centers


def _assign(x: np.ndarray, centers: np.ndarray, chunk: int = 20_000) -> np.ndarray:
    out = np.empty(len(x), dtype=np.int64)
    cn = (centers ** 2).sum(1)
    for i in range(0, len(x), chunk):
        xs = x[i:i + chunk]
        out[i:i + chunk] = np.argmin(cn[None] - 2 * xs @ centers.T, axis=1)
    return out


def build_kdisk_vocab(samples, k: int = VOCAB_SIZE, rng: np.random.Generator | None = None,
                      theta_weight: float = 1.0, iters: int = 30) -> KDiskVocab:
    """k-means++ seeded Lloyd iterations over (dx, dy, w * dtheta)."""
    rng = rng or np.random.default_rng(0)
    x = np.asarray(samples, dtype=np.float64).reshape(-1, 3) * np.array([1.0, 1.0, theta_weight])
    if len(x) == 0:
        raise ValueError("no delta samples")
    n_distinct = len(np.unique(x, axis=0))
    if n_distinct < k:
        warnings.warn(f"only {n_distinct} distinct deltas for {k} templates; padding with jittered copies",
                      RuntimeWarning, stacklevel=2)
        pad = x[rng.integers(len(x), size=k)] + rng.normal(0, 1e-9, (k, 3))
        x = np.concatenate([x, pad])
    centers = _kmeans_pp(x, k, rng)
    for _ in range(iters):
        lab = _assign(x, centers)
        sums = np.zeros_like(centers)
        np.add.at(sums, lab, x)
        cnt = np.bincount(lab, minlength=k)
        moved = cnt > 0
        new = centers.copy()
        new[moved] = sums[moved] / cnt[moved, None]
        if np.allclose(new, centers, atol=1e-12):
            centers = new
            break
        centers = new
    return KDiskVocab(centers / np.array([1.0, 1.0, theta_weight]), theta_weight)


def reward(pos_i, pos_ego, colliding) -> np.ndarray:
    """-10 * collision indicator + min(center distance, 10) / 10."""
    d = np.linalg.norm(np.asarray(pos_i, dtype=np.float64) - np.asarray(pos_ego, dtype=np.float64), axis=-1)
    return COLLISION_PENALTY * np.asarray(colliding, dtype=np.float64) + np.minimum(d, DISTANCE_CAP) / DISTANCE_CAP


def discounted_return(rewards, horizon: int = HORIZON_STEPS, gamma: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """G_t = sum_{k<horizon} gamma^k r_{t+k} along the last axis.

    Returns (G, truncated) where truncated marks steps whose window runs past
    the end of the rollout; their G is set to zero.
    """
    r = np.asarray(rewards, dtype=np.float64)
    T = r.shape[-1]
    weights = gamma ** np.arange(horizon)
    G = np.zeros_like(r)
    truncated = np.zeros(T, dtype=bool)
    for t in range(T):
        if t + horizon > T:
            truncated[t] = True
            continue
        G[..., t] = r[..., t:t + horizon] @ weights
    return G, np.broadcast_to(truncated, r.shape).copy()


@dataclass
class ReturnBins:
    lo: float
    hi: float
    n: int = N_RETURN_BINS

    @classmethod
    def fit(cls, returns, n: int = N_RETURN_BINS) -> "ReturnBins":
        r = np.asarray(returns, dtype=np.float64)
        lo, hi = float(r.min()), float(r.max())
        if hi - lo < 1e-9:
            hi = lo + 1.0
        return cls(lo, hi, n)

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / self.n

    @property
    def centers(self) -> np.ndarray:
        return self.lo + (np.arange(self.n) + 0.5) * self.width

    def to_bin(self, g) -> np.ndarray:
        return np.clip(((np.asarray(g) - self.lo) / self.width).astype(np.int64), 0, self.n - 1)

    def normalized(self, bins) -> np.ndarray:
        """Bin centre mapped to [0, 1]."""
        return (np.asarray(bins) + 0.5) / self.n


def tilt_log_probs(logits, kappa: float, centers) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) + kappa * np.asarray(centers, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def tilted_return_sample(logits, kappa: float, centers, rng: np.random.Generator) -> np.ndarray:
    """Sample from softmax(logits + kappa * centers) along the last axis."""
    p = np.exp(tilt_log_probs(logits, kappa, centers))
    flat = p.reshape(-1, p.shape[-1])
    u = rng.random(len(flat))
    out = np.minimum((np.cumsum(flat, axis=1) < u[:, None]).sum(1), flat.shape[1] - 1)
    return out.reshape(p.shape[:-1]) if p.ndim > 1 else out[0]
