"""Dual-phase transformer block.

Each phase (local within chunks, global across chunks) runs the same two
sublayers: attention plus a feed-forward network whose first linear layer
is replaced by a GRU, each wrapped in a residual + LayerNorm. The local
phase treats every chunk as a length-K sequence; the global phase treats
every intra-chunk index as a length-M sequence. After each phase the
result passes through GroupNorm and is added back onto the phase input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttentionConfig, AttentionWeights, init_attention_weights, mce_msa
from .errors import ConfigError
from .tensor import (
    GRUParams,
    Tensor,
    activation,
    group_norm,
    gru_sequence,
    layer_norm,
    matmul,
    reshape,
    transpose,
)

FFN_WIDTH_FACTOR = 4  # inner feed-forward width is fixed at 4*d


@dataclass
class PhaseWeights:
    """Weights of one phase: attention, GRU feed-forward, norms."""

    attn: AttentionWeights
    gru: GRUParams
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    gn_gamma: Tensor
    gn_beta: Tensor


@dataclass
class BlockWeights:
    local: PhaseWeights
    global_: PhaseWeights


@dataclass
class BlockConfig:
    d: int
    heads: int
    activation: str = "gelu"
    gn_groups: int = 1
    ln_eps: float = 1e-5
    compress_kernel: int = 3
    compress_stride: int = 3

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(
            d=self.d,
            heads=self.heads,
            compress_kernel=self.compress_kernel,
            compress_stride=self.compress_stride,
        )

    def __post_init__(self):
        if self.d % self.gn_groups != 0:
            raise ConfigError(f"gn_groups={self.gn_groups} must divide d={self.d}")


def ffn(z: Tensor, w: PhaseWeights, kind: str) -> Tensor:
    """Position-wise feed-forward with a GRU first stage.

    activation(GRU(z) w1 + b1) w2 + b2, run along the sequence axis with a
    zero initial state.
    """
    g = gru_sequence(z, w.gru)
    hidden = activation(matmul(g, w.w1) + w.b1, kind)
    return matmul(hidden, w.w2) + w.b2


def transformer_sublayers(z: Tensor, w: PhaseWeights, cfg: BlockConfig) -> Tensor:
    """Attention and feed-forward sublayers with residuals and LayerNorm."""
    s = mce_msa(z, w.attn, cfg.attention_config())
    z1 = layer_norm(z + s, w.ln1_gamma, w.ln1_beta, cfg.ln_eps)
    out = layer_norm(z1 + ffn(z1, w, cfg.activation), w.ln2_gamma, w.ln2_beta, cfg.ln_eps)
    return out


def _phase(seg: Tensor, w: PhaseWeights, cfg: BlockConfig, axes: tuple) -> Tensor:
    """Run sublayers over one axis of [B, d, K, M], then GroupNorm + residual.

    ``axes`` permutes [B, d, K, M] so the attended axis lands second-to-last
    and the feature axis last; the inverse permutation restores the layout.
    """
    b, d, k, m = seg.shape
    x = transpose(seg, axes)                       # [B, other, seq, d]
    other, seq = x.shape[1], x.shape[2]
    flat = reshape(x, (b * other, seq, d))
    y = transformer_sublayers(flat, w, cfg)
    y = transpose(reshape(y, (b, other, seq, d)), tuple(np.argsort(axes)))
    y = reshape(
        group_norm(reshape(y, (b, d, k * m)), cfg.gn_groups, w.gn_gamma, w.gn_beta, cfg.ln_eps),
        (b, d, k, m),
    )
    return seg + y


def dual_phase(seg: Tensor, w: BlockWeights, cfg: BlockConfig) -> Tensor:
    """Local pass over each chunk, then global pass across chunks.

    Input and output are [d, K, M] or [B, d, K, M]; shape is preserved.
    """
    squeeze = seg.ndim == 3
    if squeeze:
        seg = reshape(seg, (1,) + seg.shape)
    out = _phase(seg, w.local, cfg, (0, 3, 2, 1))    # sequences of length K
    out = _phase(out, w.global_, cfg, (0, 2, 3, 1))  # sequences of length M
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


def init_phase_weights(
    cfg: BlockConfig, max_len: int, rng: np.random.Generator, std: float = 0.02
) -> PhaseWeights:
    d = cfg.d
    d_ff = FFN_WIDTH_FACTOR * d

    def mat(*shape):
        return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    return PhaseWeights(
        attn=init_attention_weights(cfg.attention_config(), max_len, rng, std),
        gru=GRUParams(mat(d, 3 * d), mat(d, 3 * d), zeros(3 * d)),
        w1=mat(d, d_ff),
        b1=zeros(d_ff),
        w2=mat(d_ff, d),
        b2=zeros(d),
        ln1_gamma=ones(d),
        ln1_beta=zeros(d),
        ln2_gamma=ones(d),
        ln2_beta=zeros(d),
        gn_gamma=ones(d),
        gn_beta=zeros(d),
    )


def init_block_weights(
    cfg: BlockConfig, max_local: int, max_global: int, rng: np.random.Generator, std: float = 0.02
) -> BlockWeights:
    return BlockWeights(
        local=init_phase_weights(cfg, max_local, rng, std),
        global_=init_phase_weights(cfg, max_global, rng, std),
    )
