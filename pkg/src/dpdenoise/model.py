"""Full denoiser: conv encoder, chunking with positions, block stack, decoder.

forward(audio) runs
    encode -> segment -> add_positions -> N x dual_phase -> decode
and returns an estimate with exactly the input length, for any length,
including lengths not divisible by the chunk size.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterator, Optional, Union

import numpy as np

from .block import BlockConfig, dual_phase, init_block_weights
from .errors import ConfigError, ShapeError
from .segmentation import (
    ChunkConfig,
    PositionalEmbedding,
    SegmentedTensor,
    add_positions,
    choose_chunk_size,
    chunk_count,
    overlap_add,
    segment,
)
from .tensor import Tensor, conv1d, matmul, reshape, transpose

DESK_PRESET = dict(d=32, heads=4, n_blocks=2, chunk_len=16)
# 12 heads do not divide the 1000-dim state, so the full-scale preset keeps
# the 8-head attention layout; 12 remains reachable for dims it divides
PAPER_PRESET = dict(d=1000, heads=8, n_blocks=12, chunk_len=1000)


@dataclass
class ModelConfig:
    d: int = 32
    heads: int = 4
    n_blocks: int = 2
    chunk_len: Union[int, str] = 16   # "auto" resolves to ~sqrt(5 L)
    hop: int = 0                      # 0: same as chunk_len (no overlap)
    encoder_kernel: int = 3
    activation: str = "gelu"
    max_chunks: int = 512             # inter-chunk position capacity
    gn_groups: int = 1
    seed: int = 0
    dtype: str = "float64"            # "float32" trades precision for speed

    def __post_init__(self):
        if isinstance(self.chunk_len, str) and self.chunk_len != "auto":
            raise ConfigError(f"chunk_len must be an int or 'auto', got {self.chunk_len!r}")
        if isinstance(self.chunk_len, int):
            if self.chunk_len < 1:
                raise ConfigError("chunk_len must be >= 1")
            if self.hop == 0:
                self.hop = self.chunk_len
        if self.n_blocks < 1:
            raise ConfigError("n_blocks must be >= 1")
        if self.d % self.heads != 0:
            raise ConfigError(f"heads={self.heads} must divide d={self.d}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def resolved(self, length: int) -> "ModelConfig":
        """Pin chunk_len for a concrete input length when set to 'auto'."""
        if self.chunk_len != "auto":
            return self
        k = choose_chunk_size(length)
        return replace(self, chunk_len=k, hop=k)

    def chunk_config(self) -> ChunkConfig:
        if self.chunk_len == "auto":
            raise ConfigError("chunk_len is 'auto'; call resolved(length) first")
        return ChunkConfig(self.chunk_len, hop=self.hop)

    def block_config(self) -> BlockConfig:
        return BlockConfig(
            d=self.d,
            heads=self.heads,
            activation=self.activation,
            gn_groups=self.gn_groups,
        )

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class ModelWeights:
    enc_kernel: Tensor
    enc_bias: Tensor
    pos_intra: PositionalEmbedding
    pos_inter: PositionalEmbedding
    blocks: list
    expand_w: Tensor
    expand_b: Tensor
    out_kernel: Tensor
    out_bias: Tensor

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "enc_kernel", self.enc_kernel
        yield "enc_bias", self.enc_bias
        yield "pos_intra", self.pos_intra.table
        yield "pos_inter", self.pos_inter.table
        for i, blk in enumerate(self.blocks):
            for phase_name, pw in (("local", blk.local), ("global", blk.global_)):
                base = f"blocks.{i}.{phase_name}"
                for j, t in enumerate(pw.attn.wq):
                    yield f"{base}.attn.wq.{j}", t
                for j, t in enumerate(pw.attn.wk):
                    yield f"{base}.attn.wk.{j}", t
                for j, t in enumerate(pw.attn.wv):
                    yield f"{base}.attn.wv.{j}", t
                yield f"{base}.attn.kernel_k", pw.attn.kernel_k
                yield f"{base}.attn.kernel_v", pw.attn.kernel_v
                yield f"{base}.attn.bias", pw.attn.bias
                yield f"{base}.attn.wo", pw.attn.wo
                yield f"{base}.attn.wo_b", pw.attn.wo_b
                yield f"{base}.gru.w_x", pw.gru.w_x
                yield f"{base}.gru.w_h", pw.gru.w_h
                yield f"{base}.gru.b", pw.gru.b
                yield f"{base}.w1", pw.w1
                yield f"{base}.b1", pw.b1
                yield f"{base}.w2", pw.w2
                yield f"{base}.b2", pw.b2
                yield f"{base}.ln1_gamma", pw.ln1_gamma
                yield f"{base}.ln1_beta", pw.ln1_beta
                yield f"{base}.ln2_gamma", pw.ln2_gamma
                yield f"{base}.ln2_beta", pw.ln2_beta
                yield f"{base}.gn_gamma", pw.gn_gamma
                yield f"{base}.gn_beta", pw.gn_beta
        yield "expand_w", self.expand_w
        yield "expand_b", self.expand_b
        yield "out_kernel", self.out_kernel
        yield "out_bias", self.out_bias

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.grad = None


WEIGHT_STD = 0.02  # all weight matrices and kernels start at N(0, 0.02^2)


def init_weights(cfg: ModelConfig, seed: Optional[int] = None) -> ModelWeights:
    """Seeded initialization: weights ~ N(0, 0.02^2), biases 0, norms (1, 0).

    The generator is numpy's PCG64; the draw order is fixed by construction
    order, so equal seeds give bit-identical weights.
    """
    if cfg.chunk_len == "auto":
        raise ConfigError("resolve chunk_len before initializing weights")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    dt = cfg.np_dtype()
    d, k = cfg.d, cfg.chunk_len

    def mat(*shape):
        return Tensor(rng.normal(0.0, WEIGHT_STD, size=shape).astype(dt), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dt), requires_grad=True)

    enc_kernel = mat(d, 1, cfg.encoder_kernel)
    enc_bias = zeros(d)
    pos_intra = PositionalEmbedding(mat(k, d))
    pos_inter = PositionalEmbedding(mat(cfg.max_chunks, d))
    bcfg = cfg.block_config()
    blocks = [
        init_block_weights(bcfg, max_local=k, max_global=cfg.max_chunks, rng=rng, std=WEIGHT_STD)
        for _ in range(cfg.n_blocks)
    ]
    # block init draws float64; cast once for the configured dtype
    if dt is not np.float64:
        for blk in blocks:
            for pw in (blk.local, blk.global_):
                for t in _phase_tensors(pw):
                    t.data = t.data.astype(dt)
    expand_w = mat(d, d)
    expand_b = zeros(d)
    out_kernel = mat(1, d, 1)
    out_bias = zeros(1)
    return ModelWeights(
        enc_kernel, enc_bias, pos_intra, pos_inter, blocks,
        expand_w, expand_b, out_kernel, out_bias,
    )


def _phase_tensors(pw):
    yield from pw.attn.wq
    yield from pw.attn.wk
    yield from pw.attn.wv
    for t in (
        pw.attn.kernel_k, pw.attn.kernel_v, pw.attn.bias, pw.attn.wo, pw.attn.wo_b,
        pw.gru.w_x, pw.gru.w_h, pw.gru.b, pw.w1, pw.b1, pw.w2, pw.b2,
        pw.ln1_gamma, pw.ln1_beta, pw.ln2_gamma, pw.ln2_beta, pw.gn_gamma, pw.gn_beta,
    ):
        yield t


def encode(audio: Tensor, w: ModelWeights) -> Tensor:
    """[.., 1, L] waveform -> [.., d, L] features via same-padded conv."""
    if audio.shape[-1] < 1:
        raise ShapeError("cannot encode empty audio")
    if audio.shape[-2] != 1:
        raise ShapeError(f"expected mono [.., 1, L], got {audio.shape}")
    return conv1d(audio, w.enc_kernel, stride=1, padding="same", bias=w.enc_bias)


def decode(seg: SegmentedTensor, w: ModelWeights, cfg: ModelConfig) -> Tensor:
    """Project features, overlap-add chunks, collapse channels to one.

    Output length equals the original (pre-padding) input length.
    """
    x = seg.data
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    b, d, k, m = x.shape
    expanded = matmul(transpose(x, (0, 2, 3, 1)), w.expand_w) + w.expand_b
    expanded = transpose(expanded, (0, 3, 1, 2))
    seq = overlap_add(
        SegmentedTensor(expanded, seg.original_length, seg.pad_length), cfg.chunk_config()
    )
    out = conv1d(seq, w.out_kernel, stride=1, padding="valid", bias=w.out_bias)
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


def forward(audio: Tensor, w: ModelWeights, cfg: ModelConfig) -> Tensor:
    """Denoise [1, L] (or a batch [B, 1, L]); output shape equals input."""
    feats = encode(audio, w)
    seg = segment(feats, cfg.chunk_config())
    seg = add_positions(seg, w.pos_intra, w.pos_inter)
    block_cfg = cfg.block_config()
    x = seg.data
    for blk in w.blocks:
        x = dual_phase(x, blk, block_cfg)
    return decode(SegmentedTensor(x, seg.original_length, seg.pad_length), w, cfg)


def attention_sequence_lengths(length: int, cfg: ModelConfig) -> tuple[int, int]:
    """(K, M): the two sequence lengths attention ever sees for this input."""
    resolved = cfg.resolved(length)
    return resolved.chunk_len, chunk_count(length, resolved.chunk_config())


def parameter_count(w: ModelWeights) -> int:
    return sum(t.size for _, t in w.named_parameters())
