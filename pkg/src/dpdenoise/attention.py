"""Memory-compressed, norm-bounded multi-head self-attention.

Per head: the input is projected to queries/keys/values, keys and values
are shortened along the sequence axis by a strided convolution (kernel 3,
stride 3, shared across heads), and the post-softmax attention map is
bias-shifted, transposed and rescaled so its Frobenius norm never exceeds
1 before it mixes the compressed values. Heads are concatenated and sent
through an output projection; the result keeps the input shape.

Inputs may be [l, d] or batched [B, l, d]; the norm clamp is applied per
matrix, so batch items and heads never mix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import CapacityError, ConfigError, ShapeError
from .tensor import (
    Tensor,
    concat,
    conv1d,
    frobenius_clamp,
    matmul,
    narrow,
    reshape,
    softmax,
    transpose,
)


@dataclass
class AttentionConfig:
    d: int
    heads: int = 8
    compress_kernel: int = 3
    compress_stride: int = 3
    compress: bool = True  # False disables compression (benchmark baseline)

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ConfigError(f"heads={self.heads} must divide d={self.d}")
        if self.compress_kernel < 1 or self.compress_stride < 1:
            raise ConfigError("compression kernel and stride must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


def compressed_length(l: int, cfg: AttentionConfig) -> int:
    """Sequence length after compression; short sequences bypass the conv."""
    if not cfg.compress or l < cfg.compress_kernel:
        return l
    return (l - cfg.compress_kernel) // cfg.compress_stride + 1


def max_compressed_length(max_len: int, cfg: AttentionConfig) -> int:
    """Largest compressed length over sequences of 1..max_len (bypass included)."""
    return max(compressed_length(l, cfg) for l in range(1, max_len + 1))


def attention_logit_counts(l: int, cfg: AttentionConfig) -> tuple[int, int]:
    """(full, compressed) logit element counts for one head at length l."""
    return l * l, l * compressed_length(l, cfg)


@dataclass
class AttentionWeights:
    """Per-head projections, shared compression kernels, key bias, output map.

    wq/wk/wv hold one [d, d/h] matrix per head; kernel_k/kernel_v compress
    the key and value sequences; bias has one entry per compressed key
    position up to the configured capacity; wo/wo_b merge the heads.
    """

    wq: list
    wk: list
    wv: list
    kernel_k: Tensor
    kernel_v: Tensor
    bias: Tensor
    wo: Tensor
    wo_b: Tensor


@dataclass
class AttentionTrace:
    """Per-head diagnostic arrays from one forward pass (detached)."""

    logits: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    explainable: list = field(default_factory=list)
    features: list = field(default_factory=list)


def project_heads(y: Tensor, w: AttentionWeights) -> list:
    """Map the input to per-head (query, key, value) triples."""
    if y.shape[-1] != w.wq[0].shape[0]:
        raise ShapeError(
            f"input feature dim {y.shape[-1]} does not match projections {w.wq[0].shape}"
        )
    return [(matmul(y, wq), matmul(y, wk), matmul(y, wv)) for wq, wk, wv in zip(w.wq, w.wk, w.wv)]


def _compress_one(x: Tensor, kernel: Tensor, cfg: AttentionConfig) -> Tensor:
    # x: [.., l, d_k] -> conv along the sequence axis in channel-first layout
    if not cfg.compress or x.shape[-2] < cfg.compress_kernel:
        return x
    perm = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    xc = transpose(x, perm)
    out = conv1d(xc, kernel, stride=cfg.compress_stride)
    return transpose(out, perm)


def compress_kv(k: Tensor, v: Tensor, w: AttentionWeights, cfg: AttentionConfig):
    """Shorten key and value sequences by the strided convolution."""
    return _compress_one(k, w.kernel_k, cfg), _compress_one(v, w.kernel_v, cfg)


def explainable_attention(
    q: Tensor,
    k_c: Tensor,
    v_c: Tensor,
    bias: Tensor,
    trace: Optional[AttentionTrace] = None,
) -> Tensor:
    """One head of bounded attention over compressed keys/values.

    logits = q k_c^T / sqrt(d_k); rows are softmaxed, the trainable bias
    (one entry per compressed key) is added, and the transposed map is
    scaled down to Frobenius norm <= 1 before mixing the values.
    """
    d_k = q.shape[-1]
    l_c = k_c.shape[-2]
    if bias.shape[0] < l_c:
        raise CapacityError(
            f"compressed length {l_c} exceeds attention bias capacity {bias.shape[0]}"
        )
    swap = tuple(range(q.ndim - 2)) + (q.ndim - 1, q.ndim - 2)
    logits = matmul(q, transpose(k_c, swap)) * (1.0 / math.sqrt(d_k))
    weights = softmax(logits, axis=-1)
    shifted = weights + narrow(bias, 0, 0, l_c)
    bounded = frobenius_clamp(transpose(shifted, swap))
    feat = matmul(transpose(bounded, swap), v_c)
    if trace is not None:
        trace.logits.append(logits.data.copy())
        trace.weights.append(weights.data.copy())
        trace.explainable.append(bounded.data.copy())
        trace.features.append(feat.data.copy())
    return feat


def mce_msa(
    y: Tensor,
    w: AttentionWeights,
    cfg: AttentionConfig,
    trace: Optional[AttentionTrace] = None,
) -> Tensor:
    """Full attention sublayer; output shape equals input shape.

    Heads are evaluated jointly: the per-head projections are applied as
    one concatenated matmul and the heads ride a stacked batch axis through
    compression and the bounded-attention core (the norm clamp acts per
    matrix, so heads never mix). The math per head is exactly
    ``explainable_attention`` over ``compress_kv`` of ``project_heads``.
    """
    if y.shape[-1] != cfg.d:
        raise ShapeError(f"input feature dim {y.shape[-1]} != configured d={cfg.d}")
    squeeze = y.ndim == 2
    y3 = reshape(y, (1,) + y.shape) if squeeze else y
    b, l, d = y3.shape
    h, dk = cfg.heads, cfg.head_dim

    def stack_heads(x):  # [B, l, h*dk] -> [B*h, l, dk]
        x = transpose(reshape(x, (b, l, h, dk)), (0, 2, 1, 3))
        return reshape(x, (b * h, l, dk))

    q = stack_heads(matmul(y3, concat(w.wq, axis=1)))
    k = stack_heads(matmul(y3, concat(w.wk, axis=1)))
    v = stack_heads(matmul(y3, concat(w.wv, axis=1)))
    k_c, v_c = compress_kv(k, v, w, cfg)
    inner = AttentionTrace() if trace is not None else None
    feat = explainable_attention(q, k_c, v_c, w.bias, inner)
    merged = reshape(transpose(reshape(feat, (b, h, l, dk)), (0, 2, 1, 3)), (b, l, d))
    out = matmul(merged, w.wo) + w.wo_b
    if trace is not None:
        for src, dest in (
            (inner.logits, trace.logits),
            (inner.weights, trace.weights),
            (inner.explainable, trace.explainable),
            (inner.features, trace.features),
        ):
            stacked = src[0].reshape(b, h, *src[0].shape[1:])
            for i in range(h):
                dest.append(stacked[0, i] if squeeze else stacked[:, i])
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


def init_attention_weights(
    cfg: AttentionConfig, max_len: int, rng: np.random.Generator, std: float = 0.02
) -> AttentionWeights:
    """Fresh weights: projections/kernels ~ N(0, std^2), biases zero."""
    d, dk = cfg.d, cfg.head_dim

    def mat(*shape):
        return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

    wq = [mat(d, dk) for _ in range(cfg.heads)]
    wk = [mat(d, dk) for _ in range(cfg.heads)]
    wv = [mat(d, dk) for _ in range(cfg.heads)]
    kernel_k = mat(dk, dk, cfg.compress_kernel)
    kernel_v = mat(dk, dk, cfg.compress_kernel)
    bias = Tensor(np.zeros(max_compressed_length(max_len, cfg)), requires_grad=True)
    wo = mat(d, d)
    wo_b = Tensor(np.zeros(d), requires_grad=True)
    return AttentionWeights(wq, wk, wv, kernel_k, kernel_v, bias, wo, wo_b)
