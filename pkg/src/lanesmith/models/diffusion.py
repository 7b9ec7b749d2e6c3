"""Latent DDPM over ordered lane and object latent sets."""
from __future__ import annotations

import csv
import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..corpus import CountDistribution, empirical_count_distribution
from ..scene.features import FeatureStats
from ..scene.ops import apply_ordering
from ..scene.types import MAX_LANES, MAX_OBJECTS, Scene, SceneError, SceneRegion
from ..tensor import autograd as ag
from ..tensor.autograd import Tensor
from ..tensor.checkpoint import load as load_ckpt, save as save_ckpt
from ..tensor.nn import AdaLNZeroBlock, LayerNorm, Linear, MLP, Module, sinusoidal_embedding, sinusoidal_table
from ..tensor.optim import EMA, AdamW, clip_grad_norm, warmup_linear_decay
from .autoencoder import SceneAutoencoder, outputs_to_scenes, training_views
from .data import iterate_minibatches, make_batch

log = logging.getLogger(__name__)

CLIP = 5.0
SCENE_PLAIN, SCENE_PARTITIONED, SCENE_LANES_GIVEN = 0, 1, 2
LABEL_COMPAT, LABEL_INCOMPAT, LABEL_NULL = 0, 1, 2
LANE_LOSS_SCALE = 10.0


# ---- schedule ------------------------------------------------------------------------

@dataclass
class NoiseSchedule:
    """Arrays indexed by t = 0..T; entry 0 is the clean-data convention (alpha_bar = 1)."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray


def build_schedule(T: int = 100, kind: str = "cosine", s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be at least 1")
    if kind != "cosine":
        raise ValueError(f"unknown schedule {kind!r}")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos((t / T + s) / (1 + s) * np.pi / 2) ** 2
    ab = f / f[0]
    betas = np.zeros(T + 1)
    betas[1:] = np.minimum(1.0 - ab[1:] / ab[:-1], max_beta)
    alphas = 1.0 - betas
    alpha_bar = np.cumprod(alphas)
    post = np.zeros(T + 1)
    post[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * betas[1:]
    return NoiseSchedule(T, betas, alphas, alpha_bar, post)


def q_sample(h0, t, eps, schedule: NoiseSchedule):
    """sqrt(alpha_bar_t) h0 + sqrt(1 - alpha_bar_t) eps; ``t`` scalar or per-batch array."""
    ab = schedule.alpha_bar[np.asarray(t)]
    ab = np.reshape(ab, np.shape(ab) + (1,) * (np.ndim(h0) - np.ndim(ab)))
    return np.sqrt(ab) * h0 + np.sqrt(1.0 - ab) * eps


def q_step(h_prev, t: int, eps, schedule: NoiseSchedule):
    """One forward kernel q(H_t | H_{t-1})."""
    return np.sqrt(schedule.alphas[t]) * h_prev + np.sqrt(schedule.betas[t]) * eps


# ---- latent whitening ------------------------------------------------------------------

@dataclass
class LatentStats:
    lane_mean: np.ndarray
    lane_std: np.ndarray
    obj_mean: np.ndarray
    obj_std: np.ndarray

    def whiten_lanes(self, z):
        return (z - self.lane_mean) / self.lane_std

    def unwhiten_lanes(self, z):
        return z * self.lane_std + self.lane_mean

    def whiten_objects(self, z):
        return (z - self.obj_mean) / self.obj_std

    def unwhiten_objects(self, z):
        return z * self.obj_std + self.obj_mean


@dataclass
class EncodedView:
    """Encoder posterior of one ordered training view."""

    mu_l: np.ndarray
    sig_l: np.ndarray
    mu_o: np.ndarray
    sig_o: np.ndarray
    partitioned: bool
    label: int
    n_fn_lanes: int
    n_fn_objects: int


def encode_views(ae: SceneAutoencoder, views: list[Scene], stats: FeatureStats, batch_size: int = 64) -> list[EncodedView]:
    out = []
    with ag.no_grad():
        for i in range(0, len(views), batch_size):
            chunk = views[i:i + batch_size]
            batch = make_batch(chunk, stats)
            mu_l, ls_l, mu_o, ls_o = (x.data for x in ae.encode(batch)[:4])
            for b, s in enumerate(chunk):
                nl, no = s.n_lanes, s.n_objects
                fn_l = int(np.sum(s.lane_regions() == SceneRegion.F_N)) if s.partitioned else 0
                fn_o = int(np.sum(s.object_regions() == SceneRegion.F_N)) if s.partitioned else 0
                out.append(EncodedView(mu_l[b, :nl], np.exp(ls_l[b, :nl]), mu_o[b, :no], np.exp(ls_o[b, :no]),
                                       s.partitioned, 1 if s.condition == "incompat" else 0, fn_l, fn_o))
    return out


def latent_stats(encoded: list[EncodedView], rng: np.random.Generator, min_std: float = 1e-8) -> LatentStats:
    """Per-dimension moments of *sampled* latents (mu + sigma * eps)."""
    lanes = np.concatenate([e.mu_l + e.sig_l * rng.standard_normal(e.mu_l.shape) for e in encoded])
    objs = [e.mu_o + e.sig_o * rng.standard_normal(e.mu_o.shape) for e in encoded if len(e.mu_o)]
    objs = np.concatenate(objs) if objs else np.zeros((1, encoded[0].mu_o.shape[-1]))
    ls, os_ = lanes.std(0), objs.std(0)
    if np.any(ls < min_std) or np.any(os_ < min_std):
        warnings.warn("latent dimension with near-zero spread; clamping its std", RuntimeWarning, stacklevel=2)
    return LatentStats(lanes.mean(0), np.maximum(ls, min_std), objs.mean(0), np.maximum(os_, min_std))


# ---- denoiser ----------------------------------------------------------------------------

@dataclass
class DmConfig:
    lane_latent: int = 24
    object_latent: int = 8
    d_lane: int = 128
    d_object: int = 64
    heads_lane: int = 4
    heads_object: int = 2
    n_blocks: int = 2
    l2l_per_block: int = 1
    seed: int = 0


@dataclass
class Conditioning:
    t: np.ndarray  # (B,) in 1..T
    scene_type: np.ndarray  # (B,)
    label: np.ndarray  # (B,)
    drop: np.ndarray | None = None  # (B,) bool: replace the label by the null embedding

    def effective_label(self) -> np.ndarray:
        if self.drop is None:
            return self.label
        return np.where(self.drop, LABEL_NULL, self.label)

    def concat(self, other: "Conditioning") -> "Conditioning":
        d1 = np.zeros(len(self.t), bool) if self.drop is None else self.drop
        d2 = np.zeros(len(other.t), bool) if other.drop is None else other.drop
        return Conditioning(np.concatenate([self.t, other.t]), np.concatenate([self.scene_type, other.scene_type]),
                            np.concatenate([self.label, other.label]), np.concatenate([d1, d2]))


class DenoiserBlock(Module):
    """O2L, L2L (possibly several), L2O, O2O sub-blocks with AdaLN-Zero modulation."""

    def __init__(self, cfg: DmConfig, rng):
        dl, do = cfg.d_lane, cfg.d_object
        self.o2l = AdaLNZeroBlock(dl, cfg.heads_lane, dl, rng, d_ctx=do)
        self.l2l = [AdaLNZeroBlock(dl, cfg.heads_lane, dl, rng) for _ in range(cfg.l2l_per_block)]
        self.l2o = AdaLNZeroBlock(do, cfg.heads_object, dl, rng, d_ctx=dl)
        self.o2o = AdaLNZeroBlock(do, cfg.heads_object, dl, rng)

    def __call__(self, hl, ho, c, lane_mask, obj_mask):
        has_obj = ho is not None and ho.shape[1] > 0
        if has_obj:
            hl = self.o2l(hl, c, ctx=ho, key_mask=obj_mask)
        for blk in self.l2l:
            hl = blk(hl, c, key_mask=lane_mask)
        if has_obj:
            ho = self.l2o(ho, c, ctx=hl, key_mask=lane_mask)
            ho = self.o2o(ho, c, key_mask=obj_mask)
        return hl, ho


class Denoiser(Module):
    def __init__(self, cfg: DmConfig | None = None):
        self.cfg = cfg = cfg or DmConfig()
        rng = np.random.default_rng(cfg.seed)
        self.lane_in = MLP([cfg.lane_latent, cfg.d_lane, cfg.d_lane], rng)
        self.obj_in = MLP([cfg.object_latent, cfg.d_object, cfg.d_object], rng)
        self.t_mlp = MLP([cfg.d_lane, cfg.d_lane, cfg.d_lane], rng)
        self.type_emb = ag.Tensor(rng.standard_normal((3, cfg.d_lane)) * 0.02, requires_grad=True)
        self.label_emb = ag.Tensor(rng.standard_normal((3, cfg.d_lane)) * 0.02, requires_grad=True)
        self.blocks = [DenoiserBlock(cfg, rng) for _ in range(cfg.n_blocks)]
        self.lane_norm = LayerNorm(cfg.d_lane)
        self.obj_norm = LayerNorm(cfg.d_object)
        self.lane_out = Linear(cfg.d_lane, cfg.lane_latent, rng)
        self.obj_out = Linear(cfg.d_object, cfg.object_latent, rng)
        self._pe_lane = sinusoidal_table(MAX_LANES, cfg.d_lane)
        self._pe_obj = sinusoidal_table(max(MAX_OBJECTS.values()), cfg.d_object)

    def condition_vector(self, cond: Conditioning) -> Tensor:
        t_feat = sinusoidal_embedding(np.asarray(cond.t, dtype=np.float64), self.cfg.d_lane)
        return (self.t_mlp(ag.as_tensor(t_feat)) + ag.index(self.type_emb, np.asarray(cond.scene_type))
                + ag.index(self.label_emb, cond.effective_label()))

    def embed(self, hl, ho) -> tuple[Tensor, Tensor | None]:
        L = hl.shape[1]
        el = self.lane_in(ag.as_tensor(hl)) + self._pe_lane[:L]
        eo = None
        if ho is not None and ho.shape[1] > 0:
            eo = self.obj_in(ag.as_tensor(ho)) + self._pe_obj[: ho.shape[1]]
        return el, eo

    def __call__(self, hl, ho, cond: Conditioning, lane_mask, obj_mask) -> tuple[Tensor, Tensor | None]:
        """Noise prediction for lane tokens (B, L, K_l) and object tokens (B, O, K_o)."""
        c = self.condition_vector(cond)
        el, eo = self.embed(hl, ho)
        for blk in self.blocks:
            el, eo = blk(el, eo, c, lane_mask, obj_mask)
        eps_l = self.lane_out(self.lane_norm(el))
        eps_o = self.obj_out(self.obj_norm(eo)) if eo is not None else None
        return eps_l, eps_o


def denoise_eps(model: Denoiser, hl, ho, cond: Conditioning, lane_mask, obj_mask):
    return model(hl, ho, cond, lane_mask, obj_mask)


def _masked_token_mse(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    n = mask.sum()
    if n == 0:
        return ag.as_tensor(0.0)
    per = ag.tmean((pred - target) ** 2, axis=-1)
    return ag.tsum(per * mask.astype(np.float64)) / float(n)


def dm_loss(model: Denoiser, h0_l, h0_o, t, eps_l, eps_o, cond: Conditioning, lane_mask, obj_mask,
            schedule: NoiseSchedule, lanes_given: np.ndarray | None = None) -> tuple[Tensor, dict]:
    """10 * lane noise MSE + object noise MSE, each averaged over valid tokens.

    Rows flagged in ``lanes_given`` see clean lane latents and contribute no
    lane term.
    """
    hl = q_sample(h0_l, t, eps_l, schedule)
    ho = q_sample(h0_o, t, eps_o, schedule)
    lane_loss_mask = lane_mask.copy()
    if lanes_given is not None and lanes_given.any():
        hl = np.where(lanes_given[:, None, None], h0_l, hl)
        lane_loss_mask &= ~lanes_given[:, None]
    pl, po = model(hl, ho, cond, lane_mask, obj_mask)
    lane = _masked_token_mse(pl, eps_l, lane_loss_mask)
    obj = _masked_token_mse(po, eps_o, obj_mask) if po is not None else ag.as_tensor(0.0)
    total = lane * LANE_LOSS_SCALE + obj
    return total, {"lane": float(lane.data), "object": float(obj.data)}


# ---- sampling ---------------------------------------------------------------------------

def guided_eps(model: Denoiser, hl, ho, cond: Conditioning, lane_mask, obj_mask, scale: float):
    """eps_null + s * (eps_cond - eps_null), from one doubled batch."""
    if scale < 0:
        raise ValueError("guidance scale must be non-negative")
    B = hl.shape[0]
    null = Conditioning(cond.t, cond.scene_type, cond.label, np.ones(B, dtype=bool))
    plain = Conditioning(cond.t, cond.scene_type, cond.label, np.zeros(B, dtype=bool))
    both = plain.concat(null)
    ho2 = None if ho is None else np.concatenate([ho, ho])
    with ag.no_grad():
        el, eo = model(np.concatenate([hl, hl]), ho2, both, np.concatenate([lane_mask, lane_mask]),
                       np.concatenate([obj_mask, obj_mask]))
    el = el.data
    eps_l = el[B:] + scale * (el[:B] - el[B:])
    eps_o = None
    if eo is not None:
        eo = eo.data
        eps_o = eo[B:] + scale * (eo[:B] - eo[B:])
    return eps_l, eps_o


def p_sample_step(hl, ho, t: int, eps_l, eps_o, schedule: NoiseSchedule, rng: np.random.Generator,
                  temp_alpha: float = 0.75):
    """One ancestral step from already guided noise predictions; returns (H_{t-1} lanes, objects)."""
    coef = schedule.betas[t] / np.sqrt(1.0 - schedule.alpha_bar[t])
    inv = 1.0 / np.sqrt(schedule.alphas[t])
    sd = np.sqrt(schedule.posterior_var[t])

    def step(h, eps, temp):
        mean = inv * (h - coef * eps)
        if t > 1:
            mean = mean + sd * temp * rng.standard_normal(h.shape)
        return np.clip(mean, -CLIP, CLIP)

    new_l = step(hl, eps_l, temp_alpha)
    new_o = step(ho, eps_o, 1.0) if ho is not None and eps_o is not None else ho
    return new_l, new_o


@dataclass
class SamplerConfig:
    guidance: float = 4.0
    temp_alpha: float = 0.75
    label: int = LABEL_COMPAT


@dataclass
class Generator:
    """Everything needed to sample and decode scenes."""

    denoiser: Denoiser
    ae: SceneAutoencoder
    feat_stats: FeatureStats
    lat_stats: LatentStats
    schedule: NoiseSchedule
    counts: CountDistribution
    partitioned_counts: dict = field(default_factory=dict)


def _masks(counts: list[tuple[int, int]]):
    L = max(1, max(nl for _, nl in counts))
    O = max(1, max(no for no, _ in counts))
    lm = np.zeros((len(counts), L), dtype=bool)
    om = np.zeros((len(counts), O), dtype=bool)
    for b, (no, nl) in enumerate(counts):
        lm[b, :nl] = True
        om[b, :no] = True
    return lm, om


def _decode(gen: Generator, hl, ho, lm, om, partitioned, conditions) -> list[Scene]:
    zl = gen.lat_stats.unwhiten_lanes(hl)
    zo = gen.lat_stats.unwhiten_objects(ho)
    with ag.no_grad():
        out = gen.ae.decode(zl, zo, lm, om)
    scenes = outputs_to_scenes(out, lm, om, gen.feat_stats, partitioned, conditions)
    for s in scenes:
        if not (np.all(np.isfinite(s.lanes)) and np.all(np.isfinite(s.objects))):
            raise SceneError("decoded scene contains non-finite values")
    return scenes


def _check_counts(counts):
    for no, nl in counts:
        if not (1 <= nl <= MAX_LANES) or not (0 <= no <= max(MAX_OBJECTS.values())):
            raise ValueError(f"requested counts (N_o={no}, N_l={nl}) outside dataset limits")


def sample_scene(gen: Generator, counts, rng: np.random.Generator, cfg: SamplerConfig = SamplerConfig(),
                 n: int | None = None, hook: Callable | None = None) -> list[Scene]:
    """Sample scenes from noise.

    ``counts`` is a list of (N_o, N_l) pairs, or "empirical" together with ``n``.
    """
    if isinstance(counts, str):
        if counts != "empirical" or n is None:
            raise ValueError('counts must be a list of (N_o, N_l) or "empirical" with n')
        counts = [tuple(int(v) for v in row) for row in gen.counts.sample(rng, n)]
    counts = [(int(a), int(b)) for a, b in counts]
    _check_counts(counts)
    lm, om = _masks(counts)
    B, L, O = len(counts), lm.shape[1], om.shape[1]
    hl = rng.standard_normal((B, L, gen.denoiser.cfg.lane_latent))
    ho = rng.standard_normal((B, O, gen.denoiser.cfg.object_latent))
    cond_type = np.full(B, SCENE_PLAIN)
    label = np.full(B, cfg.label)
    for t in range(gen.schedule.T, 0, -1):
        cond = Conditioning(np.full(B, t), cond_type, label)
        el, eo = guided_eps(gen.denoiser, hl, ho, cond, lm, om, cfg.guidance)
        hl, ho = p_sample_step(hl, ho, t, el, eo, gen.schedule, rng, cfg.temp_alpha)
        if hook:
            hook(t, hl, ho)
    conditions = ["incompat" if cfg.label == LABEL_INCOMPAT else "compat"] * B
    return _decode(gen, hl, ho, lm, om, np.zeros(B, bool), conditions)


def _encode_scene(gen: Generator, scene: Scene):
    batch = make_batch([scene], gen.feat_stats)
    with ag.no_grad():
        enc = gen.ae.encode(batch)
    return enc, batch


def _nearest_key(options, value):
    options = np.asarray(sorted(options))
    return int(options[np.argmin(np.abs(options - value))])


def sample_objects_given_lanes(gen: Generator, map_scene: Scene, rng: np.random.Generator,
                               cfg: SamplerConfig = SamplerConfig(), n_objects: int | None = None) -> Scene:
    """Diffuse only object tokens while the lane tokens stay at the encoder means."""
    if map_scene.n_lanes > MAX_LANES:
        raise ValueError(f"map has {map_scene.n_lanes} lanes, above the cap of {MAX_LANES}")
    ordered = apply_ordering(map_scene.copy(objects=np.zeros((0, 7)), object_classes=np.zeros(0, dtype=np.int64)))
    enc, _ = _encode_scene(gen, ordered)
    lanes0 = gen.lat_stats.whiten_lanes(enc[0].data)
    if n_objects is None:
        nl = _nearest_key(set(gen.counts.n_lanes.tolist()), ordered.n_lanes)
        dist = gen.counts.objects_given_lanes(nl)
        keys = np.array(list(dist))
        n_objects = int(rng.choice(keys, p=np.array(list(dist.values()))))
    n_objects = max(1, n_objects)
    lm = np.ones((1, ordered.n_lanes), dtype=bool)
    om = np.ones((1, n_objects), dtype=bool)
    ho = rng.standard_normal((1, n_objects, gen.denoiser.cfg.object_latent))
    for t in range(gen.schedule.T, 0, -1):
        cond = Conditioning(np.array([t]), np.array([SCENE_LANES_GIVEN]), np.array([cfg.label]))
        _, eo = guided_eps(gen.denoiser, lanes0, ho, cond, lm, om, cfg.guidance)
        _, ho = p_sample_step(lanes0, ho, t, np.zeros_like(lanes0), eo, gen.schedule, rng, cfg.temp_alpha)
    decoded = _decode(gen, lanes0, ho, lm, om, np.zeros(1, bool), [ordered.condition])[0]
    return ordered.copy(objects=decoded.objects, object_classes=decoded.object_classes,
                        meta={**ordered.meta, "generated_objects": n_objects})


def _sample_fp_objects(gen: Generator, n_fn_objects: int, n_lanes_total: int, rng) -> int:
    table = gen.partitioned_counts
    key = (n_fn_objects, n_lanes_total)
    if key in table:
        values, probs = table[key]
        return int(rng.choice(values, p=probs))
    nl = _nearest_key(set(gen.counts.n_lanes.tolist()), n_lanes_total)
    dist = gen.counts.objects_given_lanes(nl)
    total = int(rng.choice(np.array(list(dist)), p=np.array(list(dist.values()))))
    return max(total - n_fn_objects, 0)


def inpaint(gen: Generator, scene_fn: Scene, rng: np.random.Generator, cfg: SamplerConfig = SamplerConfig(),
            hook: Callable | None = None, n_fp_lanes: int | None = None) -> Scene:
    """Generate the region ahead of the ego (x > 0) given the region behind it.

    Known tokens are overwritten with q_sample(encoded latent, t) before every
    reverse step, with fresh noise each time. ``hook(t, lanes, objects,
    known_lanes, known_objects)`` sees the token state entering step t.
    """
    if np.any(scene_fn.lanes[:, :, 0] > 1e-6):
        raise SceneError("inpainting expects a scene confined to x <= 0")
    base = apply_ordering(scene_fn.copy(partitioned=True))
    enc, batch = _encode_scene(gen, base)
    known_l = gen.lat_stats.whiten_lanes(enc[0].data)
    known_o = gen.lat_stats.whiten_objects(enc[2].data[:, : base.n_objects])
    if n_fp_lanes is None:
        logits = enc[4].data[0]
        p = np.exp(logits - logits.max())
        p /= p.sum()
        n_fp_lanes = int(rng.choice(len(p), p=p))
    if n_fp_lanes == 0:
        return base.copy(meta={**base.meta, "inpaint_empty": True})
    n_fn_l, n_fn_o = base.n_lanes, base.n_objects
    n_l = min(n_fn_l + n_fp_lanes, MAX_LANES)
    n_fp_o = _sample_fp_objects(gen, n_fn_o, n_l, rng)
    n_o = min(n_fn_o + n_fp_o, max(MAX_OBJECTS.values()))
    lm, om = _masks([(max(n_o, 1), n_l)])
    om[0, n_o:] = False
    hl = rng.standard_normal((1, n_l, gen.denoiser.cfg.lane_latent))
    ho = rng.standard_normal((1, om.shape[1], gen.denoiser.cfg.object_latent))
    for t in range(gen.schedule.T, 0, -1):
        kl = q_sample(known_l, t, rng.standard_normal(known_l.shape), gen.schedule)
        ko = q_sample(known_o, t, rng.standard_normal(known_o.shape), gen.schedule)
        hl[:, :n_fn_l] = kl
        ho[:, :n_fn_o] = ko
        if hook:
            hook(t, hl.copy(), ho.copy(), kl, ko)
        cond = Conditioning(np.array([t]), np.array([SCENE_PARTITIONED]), np.array([cfg.label]))
        el, eo = guided_eps(gen.denoiser, hl, ho, cond, lm, om, cfg.guidance)
        hl, ho = p_sample_step(hl, ho, t, el, eo, gen.schedule, rng, cfg.temp_alpha)
    hl[:, :n_fn_l] = known_l
    ho[:, :n_fn_o] = known_o
    out = _decode(gen, hl, ho, lm, om, np.ones(1, bool), [base.condition])[0]
    out.meta = {"n_fn_lanes": n_fn_l, "n_fn_objects": n_fn_o, "n_fp_lanes": n_l - n_fn_l, "n_fp_objects": n_o - n_fn_o}
    return out


# ---- training ---------------------------------------------------------------------------

@dataclass
class DmTrainConfig:
    steps: int = 6000
    batch_size: int = 32
    lr: float = 5e-4
    warmup: int = 200
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    cond_dropout: float = 0.1
    lanes_given_prob: float = 0.15
    ema_decay: float = 0.999
    T: int = 100
    seed: int = 0
    model: DmConfig = field(default_factory=DmConfig)


def _pad_latents(encoded: list[EncodedView], lat: LatentStats, rng):
    B = len(encoded)
    L = max(len(e.mu_l) for e in encoded)
    O = max(1, max(len(e.mu_o) for e in encoded))
    kl = encoded[0].mu_l.shape[-1]
    hl = np.zeros((B, L, kl))
    ho = np.zeros((B, O, len(lat.obj_mean)))
    lm = np.zeros((B, L), dtype=bool)
    om = np.zeros((B, O), dtype=bool)
    for b, e in enumerate(encoded):
        nl, no = len(e.mu_l), len(e.mu_o)
        hl[b, :nl] = lat.whiten_lanes(e.mu_l + e.sig_l * rng.standard_normal(e.mu_l.shape))
        lm[b, :nl] = True
        if no:
            ho[b, :no] = lat.whiten_objects(e.mu_o + e.sig_o * rng.standard_normal(e.mu_o.shape))
            om[b, :no] = True
    return hl, ho, lm, om


def _lane_means(encoded: list[EncodedView], lat: LatentStats, L: int) -> np.ndarray:
    out = np.zeros((len(encoded), L, len(lat.lane_mean)))
    for b, e in enumerate(encoded):
        out[b, : len(e.mu_l)] = lat.whiten_lanes(e.mu_l)
    return out


def partitioned_count_table(views: list[Scene]) -> dict:
    """(N_o behind, N_l total) -> (values, probs) of N_o ahead, over partitioned views."""
    raw: dict[tuple[int, int], list[int]] = {}
    for s in views:
        if not s.partitioned:
            continue
        fn_o = int(np.sum(s.object_regions() == SceneRegion.F_N))
        raw.setdefault((fn_o, s.n_lanes), []).append(s.n_objects - fn_o)
    table = {}
    for k, v in raw.items():
        vals, cnt = np.unique(v, return_counts=True)
        table[k] = (vals, cnt / cnt.sum())
    return table


def train_diffusion(train: list[Scene], ae: SceneAutoencoder, feat_stats: FeatureStats, cfg: DmTrainConfig,
                    log_path=None) -> tuple[Generator, list[dict]]:
    rng = np.random.default_rng(cfg.seed)
    views = training_views(train)
    encoded = encode_views(ae, views, feat_stats)
    lat = latent_stats(encoded, np.random.default_rng(cfg.seed + 1))
    schedule = build_schedule(cfg.T)
    cfg.model.lane_latent = ae.cfg.lane_latent
    cfg.model.object_latent = ae.cfg.object_latent
    model = Denoiser(cfg.model)
    params = model.parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    ema = EMA(model.state_dict(), cfg.ema_decay)
    history = []
    fh = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(fh) if fh else None
    if writer:
        writer.writerow(["step", "total", "lane", "object", "lr"])
    batches = iterate_minibatches(len(encoded), min(cfg.batch_size, len(encoded)), rng)
    t0 = time.time()
    try:
        for step in range(1, cfg.steps + 1):
            idx = next(batches)
            chunk = [encoded[i] for i in idx]
            hl, ho, lm, om = _pad_latents(chunk, lat, rng)
            B = len(chunk)
            partitioned = np.array([e.partitioned for e in chunk])
            lanes_given = (~partitioned) & (rng.random(B) < cfg.lanes_given_prob)
            if lanes_given.any():
                hl = np.where(lanes_given[:, None, None], _lane_means(chunk, lat, hl.shape[1]), hl)
            scene_type = np.where(partitioned, SCENE_PARTITIONED, np.where(lanes_given, SCENE_LANES_GIVEN, SCENE_PLAIN))
            cond = Conditioning(rng.integers(1, cfg.T + 1, B), scene_type, np.array([e.label for e in chunk]),
                                rng.random(B) < cfg.cond_dropout)
            eps_l = rng.standard_normal(hl.shape)
            eps_o = rng.standard_normal(ho.shape)
            lr = warmup_linear_decay(step, cfg.steps, cfg.lr, cfg.warmup)
            total, parts = dm_loss(model, hl, ho, cond.t, eps_l, eps_o, cond, lm, om, schedule, lanes_given)
            model.zero_grad()
            total.backward()
            clip_grad_norm(params, cfg.grad_clip)
            opt.step(lr)
            ema.update(model.state_dict())
            row = {"step": step, "total": float(total.data), **parts, "lr": lr}
            history.append(row)
            if writer:
                writer.writerow([row["step"], row["total"], row["lane"], row["object"], lr])
            if step % 100 == 0:
                log.info("dm step %d loss %.4f (%.1fs)", step, row["total"], time.time() - t0)
    finally:
        if fh:
            fh.close()
    model.load_state_dict(ema.state_dict())
    counts = empirical_count_distribution([v for v in views if not v.partitioned])
    gen = Generator(model, ae, feat_stats, lat, schedule, counts, partitioned_count_table(views))
    return gen, history


# ---- persistence ---------------------------------------------------------------------------

DM_CONFIG_FIELDS = tuple(DmConfig.__dataclass_fields__)


def save_generator(path, gen: Generator) -> None:
    """Denoiser weights plus everything sampling needs except the autoencoder."""
    state = {f"dm.{k}": v for k, v in gen.denoiser.state_dict().items()}
    state["dm_config"] = np.array([getattr(gen.denoiser.cfg, k) for k in DM_CONFIG_FIELDS], dtype=np.float64)
    state["T"] = np.array([gen.schedule.T], dtype=np.float64)
    for k in ("lane_mean", "lane_std", "obj_mean", "obj_std"):
        state[f"latent.{k}"] = getattr(gen.lat_stats, k)
    state["counts"] = np.stack([gen.counts.n_objects, gen.counts.n_lanes, gen.counts.probs]).astype(np.float64)
    rows = [(k[0], k[1], v, p) for k, (vals, probs) in gen.partitioned_counts.items() for v, p in zip(vals, probs)]
    state["partitioned_counts"] = np.array(rows, dtype=np.float64).reshape(-1, 4)
    save_ckpt(path, state)


def load_generator(path, ae: SceneAutoencoder, feat_stats: FeatureStats) -> Generator:
    state = load_ckpt(path)
    cfg = DmConfig(**{k: int(v) for k, v in zip(DM_CONFIG_FIELDS, state["dm_config"])})
    model = Denoiser(cfg)
    model.load_state_dict({k[3:]: v for k, v in state.items() if k.startswith("dm.")})
    lat = LatentStats(*(state[f"latent.{k}"] for k in ("lane_mean", "lane_std", "obj_mean", "obj_std")))
    c = state["counts"]
    counts = CountDistribution(c[0].astype(np.int64), c[1].astype(np.int64), c[2])
    table: dict = {}
    for fo, nl, v, p in state["partitioned_counts"]:
        vals, probs = table.setdefault((int(fo), int(nl)), ([], []))
        vals.append(int(v))
        probs.append(p)
    table = {k: (np.array(v), np.array(p) / np.sum(p)) for k, (v, p) in table.items()}
    return Generator(model, ae, feat_stats, lat, build_schedule(int(state["T"][0])), counts, table)
