"""Dense float64 tensors with reverse-mode autodiff, enough to train the toy models."""
from .autograd import (
    NonFiniteError,
    Tensor,
    as_tensor,
    check_finite_enabled,
    clip,
    concat,
    cross_entropy,
    exp,
    gelu,
    index,
    layer_norm,
    log,
    log_softmax,
    matmul,
    no_grad,
    relu,
    set_check_finite,
    sigmoid,
    silu,
    softmax,
    sqrt,
    tanh,
    where,
)
from .nn import (
    AdaLNZeroBlock,
    Attention,
    LayerNorm,
    Linear,
    MLP,
    Module,
    TransformerBlock,
    multi_head_attention,
    sinusoidal_embedding,
    sinusoidal_table,
)
from .optim import EMA, AdamW, adam_step, clip_grad_norm, warmup_linear_decay

__all__ = [
    "AdaLNZeroBlock", "AdamW", "Attention", "EMA", "LayerNorm", "Linear", "MLP", "Module",
    "NonFiniteError", "Tensor", "TransformerBlock", "adam_step", "as_tensor", "check_finite_enabled",
    "clip", "clip_grad_norm", "concat", "cross_entropy", "exp", "gelu", "index", "layer_norm", "log",
    "log_softmax", "matmul", "multi_head_attention", "no_grad", "relu", "set_check_finite", "sigmoid",
    "silu", "sinusoidal_embedding", "sinusoidal_table", "softmax", "sqrt", "tanh",
    "warmup_linear_decay", "where",
]
