"""Train a small denoiser on synthetic tones and listen to the numbers.

Generates tone mixtures in white noise at 0 dB SNR, trains for a few
minutes of CPU time, and reports the SDR of the denoised validation
clips against the noisy input. Writes before/after WAV files next to
this script so you can play them.
"""

import os

import numpy as np

from dpdenoise.model import ModelConfig, init_weights, forward
from dpdenoise.tensor import Tensor, no_grad
from dpdenoise.training import (
    SyntheticSpec,
    TrainConfig,
    make_synthetic_dataset,
    sdr,
    train,
)
from dpdenoise.wavfile import AudioClip, write_wav

HERE = os.path.dirname(os.path.abspath(__file__))

spec = SyntheticSpec(
    n_clips=48, length=2000, sample_rate=16000, snr_db=0.0,
    clean_kind="tone-mix", noise_kind="white", seed=1,
)
dataset = make_synthetic_dataset(spec)

cfg = ModelConfig(d=32, heads=4, n_blocks=2, chunk_len=16, max_chunks=128,
                  seed=0, dtype="float32")
weights = init_weights(cfg)

print("training on", len(dataset), "clips of", spec.length, "samples ...")
result = train(
    weights, dataset, cfg,
    TrainConfig(epochs=12, batch_size=8, max_lr=2.5e-4, warmup_steps=20, seed=2),
    progress=lambda r: print(
        f"  epoch {r.epoch:2d}  train mse {r.train_mse:.5f}  val sdr {r.val_sdr_db:5.2f} dB"
    ),
)

val = result.val_indices
noisy_sdr = np.mean([sdr(dataset.clean[i], dataset.noisy[i]) for i in val])
print(f"\nnoisy input SDR     -> {noisy_sdr:5.2f} dB")
print(f"denoised output SDR -> {result.history[-1].val_sdr_db:5.2f} dB")

# write one validation example for listening
i = int(val[0])
with no_grad():
    est = forward(
        Tensor(dataset.noisy[i].reshape(1, -1).astype(np.float32)), weights, cfg
    ).data.reshape(-1)
for name, samples in (
    ("clean", dataset.clean[i]),
    ("noisy", dataset.noisy[i]),
    ("denoised", np.clip(est, -1.0, 1.0)),
):
    path = os.path.join(HERE, f"demo_{name}.wav")
    write_wav(AudioClip(samples, spec.sample_rate), path)
    print("wrote", path)
