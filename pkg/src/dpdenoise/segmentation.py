"""Chunking of feature sequences and overlap-add reconstruction.

A [d, L] feature sequence is zero-padded at the tail and split into M
chunks of length K taken every P frames, giving a [d, K, M] tensor (an
optional leading batch axis is carried through). With the default P = K
the chunks tile the padded sequence exactly, so overlap-add inverts
segmentation bit-for-bit after trimming the recorded padding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, ConfigError, ReconstructionError, ShapeError
from .tensor import Tensor, make_op, narrow, reshape, transpose


@dataclass
class ChunkConfig:
    """Chunk length K and hop P between chunk starts (P = K: no overlap)."""

    chunk_len: int
    hop: int = 0  # 0 means "same as chunk_len"
    pad_value: float = 0.0

    def __post_init__(self):
        if self.hop == 0:
            self.hop = self.chunk_len
        if self.chunk_len < 1 or not (1 <= self.hop <= self.chunk_len):
            raise ConfigError(
                f"need 1 <= hop <= chunk_len, got hop={self.hop}, chunk_len={self.chunk_len}"
            )


@dataclass
class SegmentedTensor:
    """Chunked features [.., d, K, M] plus the metadata needed to invert."""

    data: Tensor
    original_length: int
    pad_length: int

    @property
    def chunk_len(self) -> int:
        return self.data.shape[-2]

    @property
    def num_chunks(self) -> int:
        return self.data.shape[-1]


@dataclass
class PositionalEmbedding:
    """Learnable [max_positions, d] lookup table added to features."""

    table: Tensor

    @property
    def max_positions(self) -> int:
        return self.table.shape[0]


def choose_chunk_size(length: int) -> int:
    """Chunk length ~ sqrt(5 L), the sublinear operating point.

    With non-overlapping chunks the count is ceil(L / K), so both attention
    sequence lengths (K within a chunk, M across chunks) grow like sqrt(L).
    """
    if length < 1:
        raise ConfigError(f"sequence length must be >= 1, got {length}")
    return max(1, round(math.sqrt(5.0 * length)))


def chunk_count(length: int, cfg: ChunkConfig) -> int:
    """Number of chunks covering ``length`` frames (before padding)."""
    return math.ceil(max(0, length - cfg.chunk_len) / cfg.hop) + 1


def auto_chunk_lengths(length: int) -> tuple[int, int]:
    """(K, M) produced by the auto chunk size at hop P = K."""
    k = choose_chunk_size(length)
    return k, chunk_count(length, ChunkConfig(k))


def segment(features: Tensor, cfg: ChunkConfig) -> SegmentedTensor:
    """Split [.., d, L] into [.., d, K, M]; tail is zero-padded to fit."""
    if features.ndim < 2:
        raise ShapeError(f"segment expects [.., d, L], got {features.shape}")
    length = features.shape[-1]
    if length < 1:
        raise ShapeError("cannot segment an empty sequence")
    k, p = cfg.chunk_len, cfg.hop
    m = chunk_count(length, cfg)
    padded = (m - 1) * p + k
    pad = padded - length
    lead = features.shape[:-1]

    xd = features.data
    if pad:
        width = [(0, 0)] * (xd.ndim - 1) + [(0, pad)]
        xd = np.pad(xd, width, constant_values=cfg.pad_value)
    out = np.empty(lead + (k, m), dtype=xd.dtype)
    for j in range(m):
        out[..., j] = xd[..., j * p : j * p + k]

    def bwd(g):
        gx = np.zeros(lead + (padded,), dtype=g.dtype)
        for j in range(m):
            gx[..., j * p : j * p + k] += g[..., j]
        return (gx[..., :length],)

    data = make_op(out, (features,), "segment", bwd)
    return SegmentedTensor(data=data, original_length=length, pad_length=pad)


def overlap_add(seg: SegmentedTensor, cfg: ChunkConfig) -> Tensor:
    """Sum chunk contributions back into [.., d, L], trimming tail padding."""
    k, p = cfg.chunk_len, cfg.hop
    m = seg.num_chunks
    if seg.chunk_len != k:
        raise ReconstructionError(
            f"chunk length mismatch: tensor has K={seg.chunk_len}, config says {k}"
        )
    padded = (m - 1) * p + k
    if seg.original_length + seg.pad_length != padded:
        raise ReconstructionError(
            f"metadata mismatch: L={seg.original_length} + pad={seg.pad_length} "
            f"!= (M-1)*P + K = {padded}"
        )
    x = seg.data
    lead = x.shape[:-2]
    length = seg.original_length

    xd = x.data
    out = np.zeros(lead + (padded,), dtype=xd.dtype)
    for j in range(m):
        out[..., j * p : j * p + k] += xd[..., j]

    def bwd(g):
        if padded != length:
            gp = np.zeros(lead + (padded,), dtype=g.dtype)
            gp[..., :length] = g
        else:
            gp = g
        gs = np.empty(lead + (k, m), dtype=g.dtype)
        for j in range(m):
            gs[..., j] = gp[..., j * p : j * p + k]
        return (gs,)

    return make_op(out[..., :length], (x,), "overlap_add", bwd)


def add_positions(
    seg: SegmentedTensor,
    intra: PositionalEmbedding,
    inter: PositionalEmbedding,
) -> SegmentedTensor:
    """Add within-chunk and across-chunk position vectors to every frame."""
    x = seg.data
    d, k, m = x.shape[-3], x.shape[-2], x.shape[-1]
    if k > intra.max_positions:
        raise CapacityError(
            f"chunk length {k} exceeds intra-chunk table capacity {intra.max_positions}"
        )
    if m > inter.max_positions:
        raise CapacityError(
            f"chunk count {m} exceeds inter-chunk table capacity {inter.max_positions}"
        )
    if intra.table.shape[1] != d or inter.table.shape[1] != d:
        raise ShapeError("positional table feature width does not match the input")
    intra_dk = reshape(transpose(narrow(intra.table, 0, 0, k), (1, 0)), (d, k, 1))
    inter_dm = reshape(transpose(narrow(inter.table, 0, 0, m), (1, 0)), (d, 1, m))
    shifted = (x + intra_dk) + inter_dm
    return SegmentedTensor(shifted, seg.original_length, seg.pad_length)
