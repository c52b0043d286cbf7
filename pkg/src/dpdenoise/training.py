"""Objective, optimizer, schedule, training loop, synthetic paired data.

Training is plain MSE between the clean waveform and the model estimate,
minimized with Adam under a warmup-then-plateau learning-rate policy.
Everything is seeded so a (seed, dataset, config) triple reproduces the
run bit-for-bit on the same numpy build.
"""

from __future__ import annotations

import contextlib
import gc
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None


@contextlib.contextmanager
def _training_runtime():
    """Single-threaded BLAS plus paused cyclic GC for the step loop.

    The model's matrices are small enough that BLAS threading costs more
    than it buys, and the computation graphs are acyclic, so reference
    counting reclaims them without collector sweeps.
    """
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        if threadpool_limits is not None:
            with threadpool_limits(limits=1):
                yield
        else:
            yield
    finally:
        if was_enabled:
            gc.enable()
        gc.collect()

from .errors import ConfigError, ShapeError, UndefinedMetricError
from .model import ModelConfig, ModelWeights, forward
from .tensor import Tensor, backward, no_grad

SDR_CLAMP_DB = 100.0


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    max_lr: float = 2.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 50
    decay_factor: float = 0.5
    patience: int = 2
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.max_lr <= 0:
            raise ConfigError("max_lr must be > 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")


@dataclass
class PairedBatch:
    noisy: Tensor   # [B, 1, L]
    clean: Tensor   # [B, 1, L]


@dataclass
class Metrics:
    mse: float
    sdr_db: float


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float
    val_sdr_db: float
    lr: float

    def csv_row(self) -> str:
        return f"{self.epoch},{self.train_mse:.10g},{self.val_mse:.10g},{self.val_sdr_db:.6g},{self.lr:.10g}"


# ---------------------------------------------------------------------------
# objective and metric


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all elements (differentiable)."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    return (diff * diff).mean()


def sdr(clean: np.ndarray, estimate: np.ndarray) -> float:
    """Signal-to-distortion ratio in dB, clamped to +-100.

    10 log10(|x|^2 / |x - xhat|^2); an exact match hits the +100 clamp.
    """
    clean = np.asarray(clean, dtype=np.float64).reshape(-1)
    estimate = np.asarray(estimate, dtype=np.float64).reshape(-1)
    if clean.shape != estimate.shape:
        raise ShapeError(f"sdr lengths differ: {clean.shape} vs {estimate.shape}")
    signal = float(clean @ clean)
    if signal == 0.0:
        raise UndefinedMetricError("sdr is undefined for a silent clean signal")
    err = clean - estimate
    noise = float(err @ err)
    if noise == 0.0:
        return SDR_CLAMP_DB
    value = 10.0 * math.log10(signal / noise)
    return float(np.clip(value, -SDR_CLAMP_DB, SDR_CLAMP_DB))


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def for_params(cls, params: list) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def adam_step(
    params: list,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update over parameters with .grad set."""
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = p.data - update.astype(p.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# learning-rate policy


class LrSchedule:
    """Linear warmup to max_lr, then halve after ``patience`` flat epochs.

    ``lr(step)`` covers the warmup; ``note_validation`` feeds the plateau
    detector once per epoch and scales subsequent rates down by
    ``decay_factor`` whenever the validation loss has not improved for
    ``patience`` consecutive epochs.
    """

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.scale = 1.0
        self._best = math.inf
        self._flat_epochs = 0

    def lr(self, step: int) -> float:
        warm = self.cfg.warmup_steps
        ramp = 1.0 if warm <= 0 else min(1.0, step / warm)
        return self.cfg.max_lr * ramp * self.scale

    def note_validation(self, val_loss: float) -> None:
        if val_loss < self._best:
            self._best = val_loss
            self._flat_epochs = 0
            return
        self._flat_epochs += 1
        if self._flat_epochs >= self.cfg.patience:
            self.scale *= self.cfg.decay_factor
            self._flat_epochs = 0


def lr_schedule(step: int, cfg: TrainConfig, scale: float = 1.0) -> float:
    """Warmup-phase learning rate at an optimizer step (scale: plateau factor)."""
    warm = cfg.warmup_steps
    ramp = 1.0 if warm <= 0 else min(1.0, step / warm)
    return cfg.max_lr * ramp * scale


# ---------------------------------------------------------------------------
# synthetic paired dataset


@dataclass
class SyntheticSpec:
    n_clips: int = 100
    length: int = 2000
    sample_rate: int = 16000
    snr_db: float = 0.0            # math.inf: no noise at all
    clean_kind: str = "tone-mix"   # sine | chirp | tone-mix
    noise_kind: str = "white"      # white | pink
    seed: int = 0
    freq_lo: float = 200.0
    freq_hi: float = 1200.0
    peak: float = 0.6

    def __post_init__(self):
        if self.n_clips < 1 or self.length < 2:
            raise ConfigError("need n_clips >= 1 and length >= 2")
        if self.clean_kind not in ("sine", "chirp", "tone-mix"):
            raise ConfigError(f"unknown clean_kind {self.clean_kind!r}")
        if self.noise_kind not in ("white", "pink"):
            raise ConfigError(f"unknown noise_kind {self.noise_kind!r}")


@dataclass
class PairedDataset:
    noisy: np.ndarray   # [n, L]
    clean: np.ndarray   # [n, L]
    sample_rate: int

    def __len__(self) -> int:
        return self.noisy.shape[0]


def _clean_clip(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(spec.length) / spec.sample_rate
    if spec.clean_kind == "sine":
        freqs, amps = [rng.uniform(spec.freq_lo, spec.freq_hi)], [1.0]
    elif spec.clean_kind == "tone-mix":
        n = int(rng.integers(2, 5))
        freqs = rng.uniform(spec.freq_lo, spec.freq_hi, size=n)
        amps = rng.uniform(0.4, 1.0, size=n)
    else:  # chirp: linear sweep from f0 to f1 over the clip
        f0 = rng.uniform(spec.freq_lo, spec.freq_hi)
        f1 = rng.uniform(spec.freq_lo, spec.freq_hi)
        duration = spec.length / spec.sample_rate
        phase = 2.0 * np.pi * (f0 * t + (f1 - f0) * t * t / (2.0 * duration))
        x = np.sin(phase + rng.uniform(0.0, 2.0 * np.pi))
        return spec.peak * x / np.abs(x).max()
    x = np.zeros(spec.length)
    for f, a in zip(freqs, amps):
        x += a * np.sin(2.0 * np.pi * f * t + rng.uniform(0.0, 2.0 * np.pi))
    return spec.peak * x / np.abs(x).max()


def _noise_clip(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    white = rng.normal(size=spec.length)
    if spec.noise_kind == "white":
        return white
    # pink: shape the white spectrum by 1/sqrt(f)
    spectrum = np.fft.rfft(white)
    f = np.fft.rfftfreq(spec.length)
    weights = np.zeros_like(f)
    weights[1:] = 1.0 / np.sqrt(f[1:])
    shaped = np.fft.irfft(spectrum * weights, n=spec.length)
    return shaped / shaped.std()


def make_synthetic_dataset(spec: SyntheticSpec) -> PairedDataset:
    """Clean clips plus additive noise scaled to the exact requested SNR.

    If a mixture would leave [-1, 1], the clean/noisy pair is rescaled
    jointly, which preserves the SNR.
    """
    rng = np.random.default_rng(spec.seed)
    clean = np.empty((spec.n_clips, spec.length))
    noisy = np.empty_like(clean)
    for i in range(spec.n_clips):
        x = _clean_clip(spec, rng)
        if math.isinf(spec.snr_db) and spec.snr_db > 0:
            y = x.copy()
        else:
            eps = _noise_clip(spec, rng)
            gain = (np.linalg.norm(x) / np.linalg.norm(eps)) * 10.0 ** (-spec.snr_db / 20.0)
            y = x + gain * eps
        top = np.abs(y).max()
        if top > 1.0:
            x = x / top
            y = y / top
        clean[i] = x
        noisy[i] = y
    return PairedDataset(noisy=noisy, clean=clean, sample_rate=spec.sample_rate)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    history: list
    train_indices: np.ndarray
    val_indices: np.ndarray

    @property
    def loss_history(self) -> list:
        return [r.train_mse for r in self.history]


def split_dataset(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic train/validation index split (validation >= 1 clip)."""
    order = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(val_fraction * n))) if n > 1 else 0
    return order[n_val:], order[:n_val]


def _stack_batch(dataset: PairedDataset, indices: np.ndarray, dtype) -> PairedBatch:
    lengths = [dataset.noisy[i].shape[0] for i in indices]
    width = max(lengths)
    noisy = np.zeros((len(indices), 1, width), dtype=dtype)
    clean = np.zeros_like(noisy)
    for row, i in enumerate(indices):
        noisy[row, 0, : lengths[row]] = dataset.noisy[i]
        clean[row, 0, : lengths[row]] = dataset.clean[i]
    return PairedBatch(noisy=Tensor(noisy), clean=Tensor(clean))


def evaluate(
    dataset: PairedDataset,
    indices: np.ndarray,
    weights: ModelWeights,
    cfg: ModelConfig,
    batch_size: int = 8,
) -> Metrics:
    """Mean per-clip MSE and SDR of the model output on the given clips.

    Same-length clips are evaluated in batches; metrics stay per-clip.
    """
    if len(indices) == 0:
        return Metrics(mse=math.nan, sdr_db=math.nan)
    mses, sdrs = [], []
    dtype = cfg.np_dtype()
    with no_grad():
        for lo in range(0, len(indices), batch_size):
            chosen = indices[lo : lo + batch_size]
            lengths = {dataset.noisy[i].shape[0] for i in chosen}
            if len(lengths) == 1:
                noisy = np.stack([dataset.noisy[i] for i in chosen])[:, None, :]
                ests = forward(Tensor(noisy.astype(dtype)), weights, cfg).data[:, 0, :]
            else:
                ests = [
                    forward(
                        Tensor(dataset.noisy[i].reshape(1, -1).astype(dtype)), weights, cfg
                    ).data.reshape(-1)
                    for i in chosen
                ]
            for est, i in zip(ests, chosen):
                clean = dataset.clean[i]
                mses.append(float(np.mean((est - clean) ** 2)))
                sdrs.append(sdr(clean, est))
    return Metrics(mse=float(np.mean(mses)), sdr_db=float(np.mean(sdrs)))


def train(
    weights: ModelWeights,
    dataset: PairedDataset,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    csv_path: Optional[str] = None,
    progress: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainResult:
    """Shuffled mini-batch MSE training; returns per-epoch history.

    Clips inside a batch are zero-padded to the longest one. The history
    is also emitted as CSV rows "epoch,train_mse,val_mse,val_sdr_db,lr"
    when ``csv_path`` is given.
    """
    if len(dataset) == 0:
        raise ConfigError("training needs a non-empty dataset")
    train_idx, val_idx = split_dataset(len(dataset), cfg.val_fraction, cfg.seed)
    if len(train_idx) == 0:
        train_idx, val_idx = val_idx, train_idx
    params = [t for _, t in weights.named_parameters()]
    state = AdamState.for_params(params)
    schedule = LrSchedule(cfg)
    shuffle_rng = np.random.default_rng(cfg.seed + 1)
    dtype = model_cfg.np_dtype()

    history: list = []
    step = 0
    lr = schedule.lr(0)
    with _training_runtime():
        for epoch in range(1, cfg.epochs + 1):
            order = shuffle_rng.permutation(len(train_idx))
            epoch_losses = []
            for lo in range(0, len(order), cfg.batch_size):
                chosen = train_idx[order[lo : lo + cfg.batch_size]]
                batch = _stack_batch(dataset, chosen, dtype)
                weights.zero_grad()
                loss = mse_loss(forward(batch.noisy, weights, model_cfg), batch.clean)
                backward(loss)
                lr = schedule.lr(step)
                adam_step(params, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
                step += 1
                epoch_losses.append(loss.item())
            val = evaluate(dataset, val_idx, weights, model_cfg)
            record = EpochRecord(
                epoch=epoch,
                train_mse=float(np.mean(epoch_losses)),
                val_mse=val.mse,
                val_sdr_db=val.sdr_db,
                lr=lr,
            )
            history.append(record)
            if progress is not None:
                progress(record)
            if not math.isnan(val.mse):
                schedule.note_validation(val.mse)
    if csv_path is not None:
        from .config import write_text_atomic

        rows = ["epoch,train_mse,val_mse,val_sdr_db,lr"]
        rows += [r.csv_row() for r in history]
        write_text_atomic(csv_path, "\n".join(rows) + "\n")
    return TrainResult(history=history, train_indices=train_idx, val_indices=val_idx)
