"""Dense tensors with tape-based reverse-mode differentiation.

Every operation the denoiser needs is a fused numpy forward plus a
hand-derived backward. Creating an op output records a ``TapeRecord``
whose closure captures the intermediates the backward needs; ``backward``
replays the records in reverse topological order and accumulates
gradients into ``requires_grad`` leaves.

float64 is the default dtype so finite-difference verification has
headroom; float32 inputs are kept as float32 for training speed.
Tensors are treated as immutable once created (gradient accumulation and
the single-writer optimizer aside), so independent computations are safe
to run from parallel threads.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, RankError, SequenceTooShortError, ShapeError

DEFAULT_DTYPE = np.float64

_FLOAT_DTYPES = (np.float32, np.float64)

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables tape recording (thread-local)."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in _FLOAT_DTYPES:
        return arr
    return arr.astype(DEFAULT_DTYPE)


class Tensor:
    """A dense nd-array plus optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_record")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._record: Optional[TapeRecord] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise RankError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar; scalars become constants of the same dtype
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


@dataclass
class TapeRecord:
    """One recorded operation: id, input refs and a backward closure.

    The closure captures the saved intermediates at forward time and maps
    the output gradient to one gradient (or None) per parent.
    """

    op: str
    parents: tuple
    backward: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered operation records reachable from one output tensor.

    Records appear in topological order, so replaying them reversed visits
    every node after all of its consumers. ``backward`` below performs that
    replay; ``Tape.trace`` exists for inspection and tests.
    """

    def __init__(self, records: list):
        self.records = records

    @classmethod
    def trace(cls, output: "Tensor") -> "Tape":
        return cls([t._record for t in _topo_order(output) if t._record is not None])

    def __len__(self) -> int:
        return len(self.records)


def make_op(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    """Create an op output, recording it on the tape when grads are live."""
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._record = TapeRecord(op, tuple(parents), backward_fn)
    return out


def _topo_order(root: Tensor) -> list:
    order: list = []
    seen: set = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._record is not None:
            for p in node._record.parents:
                if id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(out: Tensor) -> None:
    """Accumulate d(out)/d(leaf) into every requires_grad leaf.

    Repeated calls accumulate additively. ``out`` must hold one element.
    """
    if out.data.size != 1:
        raise RankError(f"backward needs a scalar output, got shape {out.shape}")
    if not out.requires_grad:
        return
    order = _topo_order(out)
    flowing = {id(out): np.ones_like(out.data)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        rec = node._record
        if rec is None:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            continue
        for parent, pg in zip(rec.parents, rec.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            held = flowing.get(id(parent))
            flowing[id(parent)] = pg if held is None else held + pg
    return None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _coerce(a, b)
    b = _coerce(b, a)
    data = a.data + b.data
    a_shape, b_shape = a.data.shape, b.data.shape

    def bwd(g):
        return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

    return make_op(data, (a, b), "add", bwd)


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _coerce(a, b)
    b = _coerce(b, a)
    data = a.data - b.data
    a_shape, b_shape = a.data.shape, b.data.shape

    def bwd(g):
        return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

    return make_op(data, (a, b), "sub", bwd)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _coerce(a, b)
    b = _coerce(b, a)
    data = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return make_op(data, (a, b), "mul", bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        return (-g,)

    return make_op(-a.data, (a,), "neg", bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch-dim broadcasting (operands rank >= 2)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    data = ad @ bd

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return make_op(data, (a, b), "matmul", bwd)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inverse),)

    return make_op(np.transpose(x.data, axes), (x,), "transpose", bwd)


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.data.shape

    def bwd(g):
        return (g.reshape(orig),)

    return make_op(x.data.reshape(shape), (x,), "reshape", bwd)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [p.data.shape[axis] for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_op(data, tuple(parts), "concat", bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries from ``start`` along ``axis``."""
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(
            f"narrow [{start}:{start + length}) exceeds axis {axis} of shape {x.shape}"
        )
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    full_shape = x.data.shape

    def bwd(g):
        gx = np.zeros(full_shape, dtype=g.dtype)
        gx[index] = g
        return (gx,)

    return make_op(x.data[index], (x,), "narrow", bwd)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.data.shape

    def bwd(g):
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(data, (x,), "sum", bwd)


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.data.shape[a] for a in axes]))
    data = x.data.mean(axis=axis, keepdims=keepdims)
    shape = x.data.shape

    def bwd(g):
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape) / count,)

    return make_op(data, (x,), "mean", bwd)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    data = np.where(mask, x.data, 0.0)

    def bwd(g):
        return (g * mask,)

    return make_op(data, (x,), "relu", bwd)


def log(x: Tensor) -> Tensor:
    """Natural log; defined for strictly positive inputs."""
    xd = x.data

    def bwd(g):
        return (g / xd,)

    return make_op(np.log(xd), (x,), "log", bwd)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation.

    0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))

    Runs on the widest tensors in the model (the 4d feed-forward layer),
    so the arithmetic is staged in-place on two buffers.
    """
    xd = x.data
    inner = xd * xd
    inner *= _GELU_A
    inner += 1.0
    inner *= xd
    inner *= _GELU_C
    np.tanh(inner, out=inner)
    data = inner + 1.0
    data *= xd
    data *= 0.5

    def bwd(g):
        # 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 a x^2), t = saved tanh
        local = xd * xd
        local *= 3.0 * _GELU_A
        local += 1.0
        local *= _GELU_C * 0.5
        local *= xd
        sech2 = inner * inner
        np.subtract(1.0, sech2, out=sech2)
        local *= sech2
        np.add(inner, 1.0, out=sech2)
        sech2 *= 0.5
        local += sech2
        local *= g
        return (local,)

    return make_op(data, (x,), "gelu", bwd)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    raise ConfigError(f"unknown activation kind {kind!r} (expected 'relu' or 'gelu')")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Probability vectors along ``axis``, stabilized by max-subtraction."""
    data = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(data, out=data)
    data /= data.sum(axis=axis, keepdims=True)

    def bwd(g):
        gx = g * data
        dot = gx.sum(axis=axis, keepdims=True)
        gx -= dot * data
        return (gx,)

    return make_op(data, (x,), "softmax", bwd)


# ---------------------------------------------------------------------------
# normalization


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last (feature) axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ConfigError("layer_norm eps must be > 0")
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xhat = x.data - mu
    var = (xhat * xhat).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat *= inv_std
    data = gamma.data * xhat
    data += beta.data
    gd = gamma.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        g_gamma = (g * xhat).sum(axis=lead) if lead else g * xhat
        g_beta = g.sum(axis=lead) if lead else g.copy()
        gh = g * gd
        gx = inv_std * (
            gh
            - gh.mean(axis=-1, keepdims=True)
            - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, g_gamma.reshape(gamma.data.shape), g_beta.reshape(beta.data.shape)

    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine must be shape ({d},), got {gamma.shape}/{beta.shape}")
    return make_op(data, (x, gamma, beta), "layer_norm", bwd)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize channel groups over (channels in group x positions).

    Accepts [C, S] or [N, C, S]; gamma/beta are per-channel.
    """
    if x.ndim == 2:
        return reshape(
            group_norm(reshape(x, (1,) + x.shape), groups, gamma, beta, eps), x.shape
        )
    if x.ndim != 3:
        raise ShapeError(f"group_norm expects [C,S] or [N,C,S], got {x.shape}")
    n, c, s = x.shape
    if c % groups != 0:
        raise ConfigError(f"channel count {c} is not divisible by groups={groups}")
    if eps <= 0:
        raise ConfigError("group_norm eps must be > 0")
    gsize = c // groups
    xg = x.data.reshape(n, groups, gsize * s)
    mu = xg.mean(axis=-1, keepdims=True)
    xhat = xg - mu
    var = (xhat * xhat).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat *= inv_std
    xhat = xhat.reshape(n, c, s)
    data = gamma.data.reshape(1, c, 1) * xhat
    data += beta.data.reshape(1, c, 1)
    gd = gamma.data

    def bwd(g):
        g_gamma = (g * xhat).sum(axis=(0, 2))
        g_beta = g.sum(axis=(0, 2))
        gh = (g * gd.reshape(1, c, 1)).reshape(n, groups, gsize * s)
        xh = xhat.reshape(n, groups, gsize * s)
        gx = inv_std * (
            gh
            - gh.mean(axis=-1, keepdims=True)
            - xh * (gh * xh).mean(axis=-1, keepdims=True)
        )
        return gx.reshape(n, c, s), g_gamma, g_beta

    return make_op(data, (x, gamma, beta), "group_norm", bwd)


# ---------------------------------------------------------------------------
# convolution


def conv1d(
    x: Tensor,
    kernels: Tensor,
    stride: int = 1,
    padding: str = "valid",
    bias: Optional[Tensor] = None,
) -> Tensor:
    """1-D convolution (cross-correlation) over the last axis.

    x: [c_in, n] or [batch, c_in, n]; kernels: [c_out, c_in, w].
    valid mode: n_out = (n - w) // stride + 1, requires n >= w.
    same mode: stride must be 1, output length equals input length.
    """
    if x.ndim == 2:
        out = conv1d(reshape(x, (1,) + x.shape), kernels, stride=stride, padding=padding, bias=bias)
        return reshape(out, out.shape[1:])
    if x.ndim != 3 or kernels.ndim != 3:
        raise ShapeError(f"conv1d expects x [B,c_in,n] and kernels [c_out,c_in,w], got {x.shape}, {kernels.shape}")
    b, c_in, n = x.shape
    c_out, kc_in, w = kernels.shape
    if kc_in != c_in:
        raise ShapeError(f"conv1d channel mismatch: x has {c_in}, kernels expect {kc_in}")
    if stride < 1:
        raise ConfigError(f"conv1d stride must be >= 1, got {stride}")
    if padding == "same":
        if stride != 1:
            raise ConfigError("same-padding conv1d requires stride 1")
        left = (w - 1) // 2
        right = w - 1 - left
        xp = np.pad(x.data, ((0, 0), (0, 0), (left, right)))
    elif padding == "valid":
        if n < w:
            raise SequenceTooShortError(f"conv1d valid mode needs n >= w, got n={n}, w={w}")
        xp = x.data
    else:
        raise ConfigError(f"conv1d padding must be 'valid' or 'same', got {padding!r}")

    np_len = xp.shape[-1]
    n_out = (np_len - w) // stride + 1
    starts = stride * np.arange(n_out)
    # patches[b, c, j, t] = xp[b, c, j*stride + t] as a strided view;
    # one copy lands it in the matmul-friendly [B, n_out, c_in*w] layout
    s0, s1, s2 = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp, shape=(b, c_in, n_out, w), strides=(s0, s1, s2 * stride, s2), writeable=False
    )
    pmat = patches.transpose(0, 2, 1, 3).reshape(b, n_out, c_in * w)
    kmat = kernels.data.reshape(c_out, c_in * w)
    out = pmat @ kmat.T                          # [B, n_out, c_out]
    data = out.transpose(0, 2, 1)                # [B, c_out, n_out]
    if bias is not None:
        data = data + bias.data.reshape(1, c_out, 1)
    pad_spec = (left, right) if padding == "same" else (0, 0)

    def bwd(g):
        gout = g.transpose(0, 2, 1)              # [B, n_out, c_out]
        g_k = np.tensordot(gout, pmat, axes=([0, 1], [0, 1])).reshape(c_out, c_in, w)
        gp = (gout @ kmat).reshape(b, n_out, c_in, w).transpose(0, 2, 1, 3)
        gxp = np.zeros_like(xp)
        for t in range(w):                       # per-tap targets are unique
            gxp[:, :, starts + t] += gp[:, :, :, t]
        l, r = pad_spec
        gx = gxp[:, :, l : np_len - r] if (l or r) else gxp
        grads = [gx, g_k]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return make_op(data, parents, "conv1d", bwd)


# ---------------------------------------------------------------------------
# gated recurrent unit


@dataclass
class GRUParams:
    """Cho-style GRU cell parameters, gate column order (z, r, n).

    w_x: [d_in, 3H], w_h: [H, 3H], b: [3H]. The candidate uses the reset
    gate on the previous state before its matmul:
        z = sigma(x w_xz + h w_hz + b_z)
        r = sigma(x w_xr + h w_hr + b_r)
        n = tanh(x w_xn + (r * h) w_hn + b_n)
        h' = (1 - z) * h + z * n
    """

    w_x: Tensor
    w_h: Tensor
    b: Tensor

    @property
    def hidden(self) -> int:
        return self.w_h.shape[0]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))


def gru_sequence(x: Tensor, params: GRUParams, h0: Optional[Tensor] = None) -> Tensor:
    """Run the GRU over the time axis; one hidden state per step.

    x: [T, d_in] or [B, T, d_in]; returns matching [.., T, H].
    Backward is hand-rolled backprop-through-time over the saved gates.
    """
    squeeze = x.ndim == 2
    if squeeze:
        out = gru_sequence(reshape(x, (1,) + x.shape), params, h0)
        return reshape(out, out.shape[1:])
    if x.ndim != 3:
        raise ShapeError(f"gru_sequence expects [T,d] or [B,T,d], got {x.shape}")
    bsz, steps, d_in = x.shape
    hid = params.hidden
    if params.w_x.shape != (d_in, 3 * hid):
        raise ShapeError(f"gru w_x must be [{d_in},{3 * hid}], got {params.w_x.shape}")
    w_x, w_h, b = params.w_x.data, params.w_h.data, params.b.data
    w_h_zr, w_h_n = w_h[:, : 2 * hid], w_h[:, 2 * hid :]

    h0_data = np.zeros((bsz, hid), dtype=x.dtype) if h0 is None else np.broadcast_to(
        h0.data, (bsz, hid)
    ).astype(x.dtype, copy=False)

    gx = x.data.reshape(bsz * steps, d_in) @ w_x
    gx = gx.reshape(bsz, steps, 3 * hid) + b

    hs = np.empty((steps + 1, bsz, hid), dtype=x.dtype)
    zs = np.empty((steps, bsz, hid), dtype=x.dtype)
    rs = np.empty_like(zs)
    ns = np.empty_like(zs)
    hs[0] = h0_data
    h = h0_data
    for t in range(steps):
        zr = _sigmoid(gx[:, t, : 2 * hid] + h @ w_h_zr)  # both gates in one matmul
        z, r = zr[:, :hid], zr[:, hid:]
        n = np.tanh(gx[:, t, 2 * hid :] + (r * h) @ w_h_n)
        h_new = n - h
        h_new *= z
        h_new += h
        zs[t], rs[t], ns[t], hs[t + 1] = z, r, n, h_new
        h = h_new
    data = hs[1:].transpose(1, 0, 2)  # [B, T, H]

    xd = x.data

    def bwd(g):
        dgx = np.empty((bsz, steps, 3 * hid), dtype=g.dtype)
        dw_h = np.zeros_like(w_h)
        dw_h_zr, dw_h_n = dw_h[:, : 2 * hid], dw_h[:, 2 * hid :]
        dh = np.zeros((bsz, hid), dtype=g.dtype)
        for t in range(steps - 1, -1, -1):
            z, r, n, h_prev = zs[t], rs[t], ns[t], hs[t]
            dh += g[:, t, :]
            dn = dh * z
            dz = dh * (n - h_prev)
            dh = dh * (1.0 - z)
            dan = dn * (1.0 - n * n)
            drh = dan @ w_h_n.T
            dr = drh * h_prev
            dh += drh * r
            dzr = dgx[:, t, : 2 * hid]
            dzr[:, :hid] = dz * z * (1.0 - z)
            dzr[:, hid:] = dr * r * (1.0 - r)
            dh += dzr @ w_h_zr.T
            dw_h_zr += h_prev.T @ dzr
            dw_h_n += (r * h_prev).T @ dan
            dgx[:, t, 2 * hid :] = dan
        flat = dgx.reshape(bsz * steps, 3 * hid)
        dx = (flat @ w_x.T).reshape(bsz, steps, d_in)
        dw_x = xd.reshape(bsz * steps, d_in).T @ flat
        db = flat.sum(axis=0)
        grads = [dx, dw_x, dw_h, db]
        if h0 is not None:
            grads.append(_unbroadcast(dh, h0.data.shape))
        return tuple(grads)

    parents = [x, params.w_x, params.w_h, params.b]
    if h0 is not None:
        parents.append(h0)
    return make_op(data, tuple(parents), "gru_sequence", bwd)


# ---------------------------------------------------------------------------
# norm clamping (per-matrix Frobenius)


def frobenius_clamp(x: Tensor) -> Tensor:
    """Scale each trailing [m, n] matrix by 1/max(1, ||X||_F).

    Leaves inputs with norm <= 1 untouched, so the output norm never
    exceeds 1 and the direction is preserved.
    """
    if x.ndim < 2:
        raise ShapeError(f"frobenius_clamp expects rank >= 2, got {x.shape}")
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=(-2, -1), keepdims=True))
    scale = np.maximum(1.0, norm)
    data = xd / scale

    def bwd(g):
        gx = g / scale
        active = norm > 1.0
        if np.any(active):
            # only matrices past the clamp need the direction correction;
            # the selector lives on the tiny per-matrix coefficient
            dot = (g * xd).sum(axis=(-2, -1), keepdims=True)
            coef = np.where(active, dot / (norm * norm * scale), 0.0)
            gx -= xd * coef
        return (gx,)

    return make_op(data, (x,), "frobenius_clamp", bwd)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def grad_check(
    f: Callable[[], Tensor],
    params,
    step: float = 1e-5,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    min_magnitude: float = 0.0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds a scalar computation from the current values of
    ``params`` each call. Error per coordinate is
    |analytic - numeric| / max(1e-12, |analytic| + |numeric|). When
    ``max_coords`` is set, that many coordinates per parameter are sampled
    (seeded by ``rng``) instead of sweeping all of them.

    Coordinates where both magnitudes fall below ``min_magnitude`` are
    skipped: a near-zero true derivative cannot be resolved relatively by
    central differences at a fixed step, only its noise can.
    """
    if isinstance(params, Tensor):
        params = [params]
    params = list(params)
    for p in params:
        p.grad = None
    out = f()
    if out.size != 1:
        raise RankError("grad_check needs a scalar-valued computation")
    backward(out)
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]

    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            n = flat.size
            if max_coords is not None and n > max_coords:
                if rng is None:
                    rng = np.random.default_rng(0)
                coords = rng.choice(n, size=max_coords, replace=False)
            else:
                coords = range(n)
            a_flat = a.reshape(-1)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + step
                up = f().item()
                flat[i] = orig - step
                down = f().item()
                flat[i] = orig
                numeric = (up - down) / (2.0 * step)
                magnitude = abs(a_flat[i]) + abs(numeric)
                if magnitude < min_magnitude:
                    continue
                err = abs(a_flat[i] - numeric) / max(1e-12, magnitude)
                if err > worst:
                    worst = err
    return worst
