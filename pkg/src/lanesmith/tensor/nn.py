"""Small module system and the attention building blocks used by both models."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor

MASK_FILL = -1e9


class Module:
    """Attribute-walking parameter container, loosely modelled on torch.nn.Module."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unknown = set(state) - set(params)
        if missing or unknown:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unknown={sorted(unknown)[:5]}")
        for k, p in params.items():
            if p.data.shape != state[k].shape:
                raise ValueError(f"shape mismatch for {k}: {p.data.shape} vs {state[k].shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def param(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, zero: bool = False):
        scale = 0.0 if zero else 1.0 / np.sqrt(d_in)
        self.weight = param(rng.standard_normal((d_in, d_out)) * scale)
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ag.matmul(x, self.weight) if x.ndim >= 2 else ag.matmul(x.reshape(1, -1), self.weight).reshape(-1)
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, d: int, affine: bool = True):
        self.gain = param(np.ones(d)) if affine else None
        self.bias = param(np.zeros(d)) if affine else None

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gain, self.bias, eps=1e-5)


class MLP(Module):
    """Stack of Linear layers with GELU between them (none after the last)."""

    def __init__(self, dims: list[int], rng: np.random.Generator, zero_last: bool = False):
        self.layers = [
            Linear(dims[i], dims[i + 1], rng, zero=zero_last and i == len(dims) - 2) for i in range(len(dims) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ag.gelu(x)
        return x


def multi_head_attention(
    q_in: Tensor,
    kv_in: Tensor,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: int,
    edge: Tensor | None = None,
    we_k: Linear | None = None,
    we_v: Linear | None = None,
    key_mask: np.ndarray | None = None,
) -> Tensor:
    """Scaled dot-product attention over a key set, with optional per-pair edge fusion.

    ``q_in`` is (B, Nq, dq), ``kv_in`` is (B, Nk, dk). When ``edge`` (B, Nq, Nk, de)
    is given, its projections are added to the key and value of every (i, j)
    pair. ``key_mask`` (B, Nk) marks valid keys; a query with no valid key
    receives a zero update.
    """
    if q_in.ndim != 3 or kv_in.ndim != 3:
        raise ValueError("attention expects (batch, tokens, features) inputs")
    B, Nq, _ = q_in.shape
    Nk = kv_in.shape[1]
    if kv_in.shape[0] != B:
        raise ValueError("batch size mismatch between queries and keys")
    d = wq.weight.shape[1]
    if d % heads:
        raise ValueError(f"hidden dim {d} not divisible by {heads} heads")
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)

    q = wq(q_in).reshape(B, Nq, heads, dh).transpose(0, 2, 1, 3)
    k = wk(kv_in).reshape(B, Nk, heads, dh).transpose(0, 2, 3, 1)
    v = wv(kv_in).reshape(B, Nk, heads, dh).transpose(0, 2, 1, 3)
    scores = ag.matmul(q, k)
    if edge is not None:
        if edge.shape[:3] != (B, Nq, Nk):
            raise ValueError(f"edge features {edge.shape[:3]} do not match ({B}, {Nq}, {Nk})")
        ek = we_k(edge).reshape(B, Nq, Nk, heads, dh).transpose(0, 3, 1, 2, 4)
        ev = we_v(edge).reshape(B, Nq, Nk, heads, dh).transpose(0, 3, 1, 2, 4)
        scores = scores + ag.matmul(ek, q.reshape(B, heads, Nq, dh, 1)).reshape(B, heads, Nq, Nk)
    scores = scores * scale
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        bias = np.where(key_mask, 0.0, MASK_FILL)[:, None, None, :]
        scores = scores + bias
    attn = ag.softmax(scores, axis=-1)
    if key_mask is not None:
        attn = attn * key_mask[:, None, None, :].astype(np.float64)
    out = ag.matmul(attn, v)
    if edge is not None:
        out = out + ag.matmul(attn.reshape(B, heads, Nq, 1, Nk), ev).reshape(B, heads, Nq, dh)
    out = out.transpose(0, 2, 1, 3).reshape(B, Nq, d)
    return wo(out)


class Attention(Module):
    def __init__(self, d: int, d_kv: int, heads: int, rng: np.random.Generator, edge_dim: int | None = None):
        self.heads = heads
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d_kv, d, rng)
        self.wv = Linear(d_kv, d, rng)
        self.wo = Linear(d, d, rng)
        self.we_k = Linear(edge_dim, d, rng, bias=False) if edge_dim else None
        self.we_v = Linear(edge_dim, d, rng, bias=False) if edge_dim else None

    def __call__(self, q_in: Tensor, kv_in: Tensor, edge: Tensor | None = None, key_mask=None) -> Tensor:
        return multi_head_attention(
            q_in, kv_in, self.wq, self.wk, self.wv, self.wo, self.heads,
            edge=edge, we_k=self.we_k, we_v=self.we_v, key_mask=key_mask,
        )


class TransformerBlock(Module):
    """Pre-LN block: attention (self or cross) followed by a feed-forward layer.

    Self-attention when ``d_ctx`` is None, otherwise queries attend to a
    context set of width ``d_ctx``.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator, d_ctx: int | None = None,
                 edge_dim: int | None = None, ffn_mult: int = 2):
        self.cross = d_ctx is not None
        self.norm_q = LayerNorm(d)
        self.norm_ctx = LayerNorm(d_ctx) if self.cross else None
        self.attn = Attention(d, d_ctx if self.cross else d, heads, rng, edge_dim=edge_dim)
        self.norm_ff = LayerNorm(d)
        self.ff = MLP([d, ffn_mult * d, d], rng)

    def __call__(self, x: Tensor, ctx: Tensor | None = None, edge: Tensor | None = None, key_mask=None) -> Tensor:
        h = self.norm_q(x)
        kv = self.norm_ctx(ctx) if self.cross else h
        x = x + self.attn(h, kv, edge=edge, key_mask=key_mask)
        return x + self.ff(self.norm_ff(x))


class AdaLNZeroBlock(Module):
    """DiT block with AdaLN-Zero modulation from a conditioning vector.

    The modulation layer is zero-initialised so the block is an identity
    residual at the start of training.
    """

    def __init__(self, d: int, heads: int, d_cond: int, rng: np.random.Generator,
                 d_ctx: int | None = None, ffn_mult: int = 2):
        self.d = d
        self.cross = d_ctx is not None
        self.norm_ctx = LayerNorm(d_ctx) if self.cross else None
        self.attn = Attention(d, d_ctx if self.cross else d, heads, rng)
        self.ff = MLP([d, ffn_mult * d, d], rng)
        self.modulation = Linear(d_cond, 6 * d, rng, zero=True)

    def __call__(self, x: Tensor, cond: Tensor, ctx: Tensor | None = None, key_mask=None) -> Tensor:
        B = x.shape[0]
        mod = self.modulation(ag.silu(cond)).reshape(B, 1, 6 * self.d)
        d = self.d
        shift1, scale1, gate1 = mod[:, :, 0:d], mod[:, :, d:2 * d], mod[:, :, 2 * d:3 * d]
        shift2, scale2, gate2 = mod[:, :, 3 * d:4 * d], mod[:, :, 4 * d:5 * d], mod[:, :, 5 * d:6 * d]
        h = ag.layer_norm(x) * (scale1 + 1.0) + shift1
        kv = self.norm_ctx(ctx) if self.cross else h
        x = x + gate1 * self.attn(h, kv, key_mask=key_mask)
        h = ag.layer_norm(x) * (scale2 + 1.0) + shift2
        return x + gate2 * self.ff(h)


def sinusoidal_table(n: int, d: int, base: float = 10000.0) -> np.ndarray:
    """Standard sin/cos positional table of shape (n, d)."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    freq = base ** (-2.0 * i / d)
    table = np.zeros((n, d))
    table[:, 0:2 * (d // 2):2] = np.sin(pos * freq)
    table[:, 1:2 * (d // 2):2] = np.cos(pos * freq)
    return table


def sinusoidal_embedding(values: np.ndarray, d: int, base: float = 10000.0) -> np.ndarray:
    """Sinusoidal features of arbitrary scalar values, shape (len(values), d)."""
    values = np.asarray(values, dtype=np.float64).reshape(-1, 1)
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    freq = base ** (-2.0 * i / d)
    return np.concatenate([np.sin(values * freq), np.cos(values * freq)], axis=1)
