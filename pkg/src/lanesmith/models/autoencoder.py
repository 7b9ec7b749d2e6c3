"""Vectorised scene VAE with factorised attention.

Lane tokens only ever attend to lanes, so lane latents cannot depend on
object features. Objects attend to lanes and to each other.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from ..scene.features import FeatureStats, compute_stats, denormalize_lanes, denormalize_objects
from ..scene.types import MAX_LANES, Scene
from ..tensor import autograd as ag
from ..tensor.autograd import Tensor
from ..tensor.checkpoint import load as load_ckpt, save as save_ckpt
from ..tensor.nn import Linear, LayerNorm, MLP, Module, TransformerBlock
from ..tensor.optim import AdamW, clip_grad_norm, warmup_linear_decay
from .data import (
    CONN_LEFT,
    CONN_SUCC,
    EDGE_CHANNELS,
    LANE_DIM,
    N_CLASSES,
    N_CONN,
    N_LANE_TYPES,
    OBJ_DIM,
    SceneBatch,
    iterate_minibatches,
    make_batch,
    prepare,
)

log = logging.getLogger(__name__)

LOG_SIGMA_MIN, LOG_SIGMA_MAX = np.log(1e-8), np.log(1e3)
N_COUNT_CLASSES = MAX_LANES + 1


@dataclass
class AeConfig:
    lane_latent: int = 24
    object_latent: int = 8
    d_lane: int = 64
    d_object: int = 32
    d_edge: int = 16
    heads_lane: int = 4
    heads_object: int = 2
    n_encoder: int = 2
    n_decoder: int = 2
    seed: int = 0


@dataclass
class LossCoeffs:
    lane: float = 10.0
    conn: float = 10.0
    num: float = 0.1
    beta: float = 0.01


class FactorizedBlock(Module):
    """L2L self-attention, then objects attend lanes (L2O), then O2O."""

    def __init__(self, cfg: AeConfig, rng, edge_dim: int | None):
        self.l2l = TransformerBlock(cfg.d_lane, cfg.heads_lane, rng, edge_dim=edge_dim)
        self.l2o = TransformerBlock(cfg.d_object, cfg.heads_object, rng, d_ctx=cfg.d_lane)
        self.o2o = TransformerBlock(cfg.d_object, cfg.heads_object, rng)

    def __call__(self, hl: Tensor, ho: Tensor | None, lane_mask, obj_mask, edge=None):
        hl = self.l2l(hl, edge=edge, key_mask=lane_mask)
        if ho is not None:
            ho = self.l2o(ho, ctx=hl, key_mask=lane_mask)
            ho = self.o2o(ho, key_mask=obj_mask)
        return hl, ho


class Encoder(Module):
    def __init__(self, cfg: AeConfig, rng):
        self.lane_in = MLP([LANE_DIM + N_LANE_TYPES, cfg.d_lane, cfg.d_lane], rng)
        self.obj_in = MLP([OBJ_DIM + N_CLASSES, cfg.d_object, cfg.d_object], rng)
        self.edge_in = MLP([EDGE_CHANNELS, cfg.d_edge, cfg.d_edge], rng)
        self.blocks = [FactorizedBlock(cfg, rng, cfg.d_edge) for _ in range(cfg.n_encoder)]
        self.lane_norm = LayerNorm(cfg.d_lane)
        self.obj_norm = LayerNorm(cfg.d_object)
        self.lane_mu = Linear(cfg.d_lane, cfg.lane_latent, rng)
        self.lane_logsig = Linear(cfg.d_lane, cfg.lane_latent, rng)
        self.obj_mu = Linear(cfg.d_object, cfg.object_latent, rng)
        self.obj_logsig = Linear(cfg.d_object, cfg.object_latent, rng)
        # lane-count head: a learnable query cross-attends to the lanes behind the ego
        self.count_query = ag.Tensor(rng.standard_normal((1, 1, cfg.d_lane)) * 0.1, requires_grad=True)
        self.count_attn = TransformerBlock(cfg.d_lane, cfg.heads_lane, rng, d_ctx=cfg.d_lane)
        self.count_head = MLP([cfg.d_lane, cfg.d_lane, N_COUNT_CLASSES], rng)

    def lanes(self, batch: SceneBatch) -> Tensor:
        feats = np.concatenate([batch.lanes, np.eye(N_LANE_TYPES)[batch.lane_types]], axis=-1)
        return self.lane_in(ag.as_tensor(feats))

    def objects(self, batch: SceneBatch) -> Tensor:
        feats = np.concatenate([batch.objects, np.eye(N_CLASSES)[batch.classes]], axis=-1)
        return self.obj_in(ag.as_tensor(feats))

    def __call__(self, batch: SceneBatch, objects: Tensor | None = None):
        """Returns (mu_L, logsig_L, mu_O, logsig_O, count_logits, lane hidden).

        ``objects`` lets a caller substitute a differentiable object input.
        """
        hl = self.lanes(batch)
        if objects is None:
            ho = self.objects(batch)
        else:
            onehot = ag.as_tensor(np.eye(N_CLASSES)[batch.classes])
            ho = self.obj_in(ag.concat([objects, onehot], axis=-1))
        edge = ag.gelu(self.edge_in(ag.as_tensor(batch.edges)))
        for blk in self.blocks:
            hl, ho = blk(hl, ho, batch.lane_mask, batch.obj_mask, edge=edge)
        hl = self.lane_norm(hl)
        ho = self.obj_norm(ho)
        B = batch.size
        q = ag.broadcast_to(self.count_query, (B, 1, self.count_query.shape[-1]))
        fn = batch.fn_mask & batch.lane_mask
        cq = self.count_attn(q, ctx=hl, key_mask=fn)
        count_logits = self.count_head(cq.reshape(B, -1))
        return (self.lane_mu(hl), ag.clip(self.lane_logsig(hl), LOG_SIGMA_MIN, LOG_SIGMA_MAX),
                self.obj_mu(ho), ag.clip(self.obj_logsig(ho), LOG_SIGMA_MIN, LOG_SIGMA_MAX), count_logits, hl)


class Decoder(Module):
    def __init__(self, cfg: AeConfig, rng):
        self.lane_in = Linear(cfg.lane_latent, cfg.d_lane, rng)
        self.obj_in = Linear(cfg.object_latent, cfg.d_object, rng)
        self.blocks = [FactorizedBlock(cfg, rng, None) for _ in range(cfg.n_decoder)]
        self.lane_norm = LayerNorm(cfg.d_lane)
        self.obj_norm = LayerNorm(cfg.d_object)
        self.lane_out = MLP([cfg.d_lane, cfg.d_lane, LANE_DIM], rng)
        self.lane_type_out = Linear(cfg.d_lane, N_LANE_TYPES, rng)
        self.obj_out = MLP([cfg.d_object, cfg.d_object, OBJ_DIM], rng)
        self.class_out = Linear(cfg.d_object, N_CLASSES, rng)
        # pairwise head: MLP(concat(h_i, h_j)) with the first layer split into two halves
        self.conn_i = Linear(cfg.d_lane, cfg.d_lane, rng)
        self.conn_j = Linear(cfg.d_lane, cfg.d_lane, rng, bias=False)
        self.conn_out = MLP([cfg.d_lane, cfg.d_lane, N_CONN], rng)

    def __call__(self, z_lane: Tensor, z_obj: Tensor | None, lane_mask, obj_mask) -> dict:
        hl = self.lane_in(z_lane)
        ho = self.obj_in(z_obj) if z_obj is not None else None
        for blk in self.blocks:
            hl, ho = blk(hl, ho, lane_mask, obj_mask)
        hl = self.lane_norm(hl)
        B, L, d = hl.shape
        a = self.conn_i(hl).reshape(B, L, 1, d)
        b = self.conn_j(hl).reshape(B, 1, L, d)
        out = {
            "lanes": self.lane_out(hl),
            "lane_type_logits": self.lane_type_out(hl),
            "conn_logits": self.conn_out(ag.gelu(a + b)),
            "lane_hidden": hl,
        }
        if ho is not None:
            ho = self.obj_norm(ho)
            out["objects"] = self.obj_out(ho)
            out["class_logits"] = self.class_out(ho)
        return out


class SceneAutoencoder(Module):
    def __init__(self, cfg: AeConfig | None = None):
        self.cfg = cfg or AeConfig()
        rng = np.random.default_rng(self.cfg.seed)
        self.encoder = Encoder(self.cfg, rng)
        self.decoder = Decoder(self.cfg, rng)

    def encode(self, batch: SceneBatch, objects: Tensor | None = None):
        return self.encoder(batch, objects)

    def decode(self, z_lane, z_obj, lane_mask, obj_mask) -> dict:
        return self.decoder(ag.as_tensor(z_lane), None if z_obj is None else ag.as_tensor(z_obj), lane_mask, obj_mask)


def reparameterize(mu, logsig, rng: np.random.Generator):
    """h = mu + sigma * eps, eps ~ N(0, I); works on Tensors and on arrays."""
    shape = mu.shape
    eps = rng.standard_normal(shape)
    if isinstance(mu, Tensor) or isinstance(logsig, Tensor):
        return ag.as_tensor(mu) + ag.exp(ag.as_tensor(logsig)) * eps
    return np.asarray(mu) + np.exp(np.clip(logsig, LOG_SIGMA_MIN, LOG_SIGMA_MAX)) * eps


def _masked_mse(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean over valid elements of the per-element mean squared error."""
    n = mask.sum()
    if n == 0:
        return ag.as_tensor(0.0)
    per = ag.tmean((pred - target) ** 2, axis=-1)
    return ag.tsum(per * mask.astype(np.float64)) / float(n)


def _kl_sum(mu: Tensor, logsig: Tensor, mask: np.ndarray) -> Tensor:
    per = ag.tsum(mu * mu + ag.exp(logsig * 2.0) - 1.0 - logsig * 2.0, axis=-1) * 0.5
    return ag.tsum(per * mask.astype(np.float64))


def elbo_loss(batch: SceneBatch, out: dict, enc: tuple, coeffs: LossCoeffs = LossCoeffs()) -> tuple[Tensor, dict]:
    """Weighted ELBO; returns the total and every component as floats."""
    mu_l, ls_l, mu_o, ls_o, count_logits = enc[:5]
    lm, om = batch.lane_mask, batch.obj_mask
    lane_l2 = _masked_mse(out["lanes"], batch.lanes, lm)
    lane_ce = ag.cross_entropy(out["lane_type_logits"], batch.lane_types, lm)
    obj_l2 = _masked_mse(out["objects"], batch.objects, om)
    obj_ce = ag.cross_entropy(out["class_logits"], batch.classes, om)
    conn_ce = ag.cross_entropy(out["conn_logits"], batch.conn, batch.pair_mask)
    n_elem = lm.sum() + om.sum()
    kl = (_kl_sum(mu_l, ls_l, lm) + _kl_sum(mu_o, ls_o, om)) / float(max(n_elem, 1))
    num_ce = ag.cross_entropy(count_logits, np.minimum(batch.n_fp, N_COUNT_CLASSES - 1), batch.partitioned)
    total = (lane_l2 + lane_ce) * coeffs.lane + obj_l2 + obj_ce + conn_ce * coeffs.conn + kl * coeffs.beta \
        + num_ce * coeffs.num
    parts = {"lane_l2": lane_l2, "lane_ce": lane_ce, "obj_l2": obj_l2, "obj_ce": obj_ce, "conn_ce": conn_ce,
             "kl": kl, "num_ce": num_ce}
    return total, {k: float(v.data) for k, v in parts.items()}


def forward_loss(model: SceneAutoencoder, batch: SceneBatch, rng, coeffs: LossCoeffs = LossCoeffs(),
                 sample: bool = True):
    enc = model.encode(batch)
    mu_l, ls_l, mu_o, ls_o = enc[:4]
    z_l = reparameterize(mu_l, ls_l, rng) if sample else mu_l
    z_o = reparameterize(mu_o, ls_o, rng) if sample else mu_o
    out = model.decode(z_l, z_o, batch.lane_mask, batch.obj_mask)
    return elbo_loss(batch, out, enc, coeffs)


# ---- decoding back to scenes --------------------------------------------------------

def connectivity_from_logits(logits: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """(successor, left) from (n, n, 4) pair logits by per-pair argmax.

    Only the successor and left classes are read; predecessor and right are
    their transposes, so the result always satisfies the adjacency invariants.
    """
    cls = np.argmax(logits[:n, :n], axis=-1)
    np.fill_diagonal(cls, 0)
    return cls == CONN_SUCC, cls == CONN_LEFT


def outputs_to_scenes(out: dict, lane_mask, obj_mask, stats: FeatureStats, partitioned=None, conditions=None) -> list[Scene]:
    lanes = out["lanes"].data if isinstance(out["lanes"], Tensor) else out["lanes"]
    types = np.argmax(_np(out["lane_type_logits"]), axis=-1)
    conn = _np(out["conn_logits"])
    objects = _np(out["objects"]) if "objects" in out else None
    classes = np.argmax(_np(out["class_logits"]), axis=-1) if "class_logits" in out else None
    scenes = []
    for b in range(len(lanes)):
        nl = int(lane_mask[b].sum())
        no = int(obj_mask[b].sum()) if objects is not None else 0
        ln = denormalize_lanes(np.clip(lanes[b, :nl], -1, 1), stats)
        succ, left = connectivity_from_logits(conn[b], nl)
        if no:
            ob = denormalize_objects(np.clip(objects[b, :no], -1, 1), stats)
            norm = np.hypot(ob[:, 3], ob[:, 4])
            norm = np.where(norm > 1e-9, norm, 1.0)
            ob[:, 3] /= norm
            ob[:, 4] /= norm
            ob[:, 2] = np.maximum(ob[:, 2], 0.0)
            ob[:, 5:] = np.maximum(ob[:, 5:], 0.05)
            cl = classes[b, :no]
        else:
            ob, cl = np.zeros((0, OBJ_DIM)), np.zeros(0, dtype=np.int64)
        scenes.append(Scene(
            lanes=ln, lane_types=types[b, :nl], successor=succ, left=left, objects=ob, object_classes=cl,
            partitioned=bool(partitioned[b]) if partitioned is not None else False,
            condition=conditions[b] if conditions is not None else "compat",
        ))
    return scenes


def _np(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def reconstruct(model: SceneAutoencoder, scenes: list[Scene], stats: FeatureStats) -> list[Scene]:
    """Decode the encoder means of already-ordered scenes."""
    batch = make_batch(scenes, stats)
    with ag.no_grad():
        enc = model.encode(batch)
        out = model.decode(enc[0], enc[2], batch.lane_mask, batch.obj_mask)
    return outputs_to_scenes(out, batch.lane_mask, batch.obj_mask, stats, batch.partitioned,
                             [s.condition for s in scenes])


def lane_embedding(model: SceneAutoencoder, scene: Scene, stats: FeatureStats) -> np.ndarray:
    """Mean-pooled penultimate decoder lane embedding of one ordered scene."""
    batch = make_batch([scene], stats)
    with ag.no_grad():
        enc = model.encode(batch)
        out = model.decode(enc[0], enc[2], batch.lane_mask, batch.obj_mask)
    h = out["lane_hidden"].data[0, : scene.n_lanes]
    return h.mean(axis=0)


# ---- training ----------------------------------------------------------------------------

@dataclass
class AeTrainConfig:
    steps: int = 4000
    batch_size: int = 32
    lr: float = 1e-3
    warmup: int = 200
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    partition_prob: float = 0.5
    eval_every: int = 500
    seed: int = 0
    coeffs: LossCoeffs = field(default_factory=LossCoeffs)
    model: AeConfig = field(default_factory=AeConfig)


class TrainingDiverged(FloatingPointError):
    pass


def training_views(scenes: list[Scene]) -> list[Scene]:
    """Every scene in both its plain and its partitioned ordered form."""
    views = []
    for s in scenes:
        views.append(prepare(s, partition=False))
        views.append(prepare(s, partition=True))
    return views


def evaluate(model: SceneAutoencoder, views: list[Scene], stats: FeatureStats, coeffs: LossCoeffs,
             batch_size: int = 64) -> dict:
    rng = np.random.default_rng(12345)
    totals: dict[str, float] = {}
    n = 0
    with ag.no_grad():
        for i in range(0, len(views), batch_size):
            chunk = views[i:i + batch_size]
            total, parts = forward_loss(model, make_batch(chunk, stats), rng, coeffs)
            for k, v in {"total": float(total.data), **parts}.items():
                totals[k] = totals.get(k, 0.0) + v * len(chunk)
            n += len(chunk)
    return {k: v / max(n, 1) for k, v in totals.items()}


def train_autoencoder(train: list[Scene], cfg: AeTrainConfig, val: list[Scene] | None = None,
                      log_path=None, stats: FeatureStats | None = None):
    """Returns (model, stats, history). ``history`` has one dict per logged step."""
    rng = np.random.default_rng(cfg.seed)
    stats = stats or compute_stats(train)
    views = training_views(train)
    val_views = training_views(val) if val else []
    model = SceneAutoencoder(cfg.model)
    params = model.parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = []
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "total", "lane_l2", "lane_ce", "obj_l2", "obj_ce", "conn_ce", "kl", "num_ce", "lr"])
    batches = iterate_minibatches(len(views), min(cfg.batch_size, len(views)), rng)
    val_hist = []
    if val_views:
        val_hist.append((0, evaluate(model, val_views, stats, cfg.coeffs)))
    t0 = time.time()
    try:
        for step in range(1, cfg.steps + 1):
            idx = next(batches)
            batch = make_batch([views[i] for i in idx], stats)
            lr = warmup_linear_decay(step, cfg.steps, cfg.lr, cfg.warmup)
            try:
                total, parts = forward_loss(model, batch, rng, cfg.coeffs)
            except ag.NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite value at step {step}, batch {idx.tolist()}") from exc
            if not np.isfinite(total.data):
                raise TrainingDiverged(f"loss is {total.data} at step {step}, batch {idx.tolist()}")
            model.zero_grad()
            total.backward()
            clip_grad_norm(params, cfg.grad_clip)
            opt.step(lr)
            row = {"step": step, "total": float(total.data), **parts, "lr": lr}
            history.append(row)
            if writer:
                writer.writerow([row[k] for k in ("step", "total", "lane_l2", "lane_ce", "obj_l2", "obj_ce",
                                                  "conn_ce", "kl", "num_ce", "lr")])
            if step % 100 == 0:
                log.info("ae step %d total %.4f lane_l2 %.5f conn %.4f (%.1fs)", step, row["total"],
                         parts["lane_l2"], parts["conn_ce"], time.time() - t0)
            if val_views and (step % cfg.eval_every == 0 or step == cfg.steps):
                val_hist.append((step, evaluate(model, val_views, stats, cfg.coeffs)))
    finally:
        if fh:
            fh.close()
    model.val_history = val_hist
    return model, stats, history


# ---- persistence ---------------------------------------------------------------------------

def save_autoencoder(path, model: SceneAutoencoder, stats: FeatureStats) -> None:
    state = model.state_dict()
    state.update({f"stats.{k}": np.asarray(v, dtype=np.float64) for k, v in stats.to_dict().items()})
    cfg = model.cfg
    state["config"] = np.array([getattr(cfg, k) for k in AE_CONFIG_FIELDS], dtype=np.float64)
    save_ckpt(path, state)


AE_CONFIG_FIELDS = tuple(AeConfig.__dataclass_fields__)


def load_autoencoder(path) -> tuple[SceneAutoencoder, FeatureStats]:
    state = load_ckpt(path)
    cfg = AeConfig(**{k: int(v) for k, v in zip(AE_CONFIG_FIELDS, state.pop("config"))})
    stats = FeatureStats.from_dict({k: state.pop(f"stats.{k}") for k in ("lane_min", "lane_max", "object_min", "object_max")})
    model = SceneAutoencoder(cfg)
    model.load_state_dict(state)
    return model, stats
