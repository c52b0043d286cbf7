"""Dual-phase chunked transformer for time-domain audio denoising.

A numpy library: a small reverse-mode tensor engine, chunk segmentation
with overlap-add reconstruction, memory-compressed norm-bounded attention,
dual-phase transformer blocks, and an MSE/Adam training loop, plus WAV,
checkpoint and config I/O behind a CLI.
"""

from .tensor import (
    GRUParams,
    Tape,
    TapeRecord,
    Tensor,
    activation,
    backward,
    concat,
    conv1d,
    frobenius_clamp,
    gelu,
    grad_check,
    group_norm,
    gru_sequence,
    layer_norm,
    matmul,
    narrow,
    no_grad,
    relu,
    reshape,
    softmax,
    transpose,
)

__all__ = [
    "GRUParams",
    "Tape",
    "TapeRecord",
    "Tensor",
    "activation",
    "backward",
    "concat",
    "conv1d",
    "frobenius_clamp",
    "gelu",
    "grad_check",
    "group_norm",
    "gru_sequence",
    "layer_norm",
    "matmul",
    "narrow",
    "no_grad",
    "relu",
    "reshape",
    "softmax",
    "transpose",
]

__version__ = "0.1.0"
