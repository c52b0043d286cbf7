"""PCM-16 mono WAV reading and writing.

The RIFF parser is hand-rolled so malformed files can be diagnosed with a
byte offset and truncated files never yield a partial clip. Integer
sample s maps to s / 32768; writing clamps to [-1, 1 - 1/32768] before
quantizing, so a read-back differs from the original by at most 1/32768
per sample.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, WavFormatError

SCALE = 32768.0


@dataclass
class AudioClip:
    samples: np.ndarray  # float64 in [-1, 1]
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.samples.size == 0:
            raise ConfigError("an audio clip must contain at least one sample")
        if not np.all(np.isfinite(self.samples)):
            raise ConfigError("audio samples must be finite")
        if self.sample_rate < 1:
            raise ConfigError(f"sample rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def read_wav(path: str, downmix: bool = False) -> AudioClip:
    """Parse a PCM-16 WAV file; stereo is rejected unless ``downmix``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise WavFormatError("file too short for a RIFF header", 0)
    if blob[0:4] != b"RIFF":
        raise WavFormatError("missing RIFF magic", 0)
    if blob[8:12] != b"WAVE":
        raise WavFormatError("missing WAVE form type", 8)

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(blob):
        cid = blob[pos : pos + 4]
        (size,) = struct.unpack_from("<I", blob, pos + 4)
        body_start = pos + 8
        if body_start + size > len(blob):
            raise WavFormatError(f"chunk {cid!r} declares {size} bytes past end of file", pos + 4)
        body = blob[body_start : body_start + size]
        if cid == b"fmt ":
            if size < 16:
                raise WavFormatError("fmt chunk shorter than 16 bytes", pos + 4)
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            data = (body, body_start)
        pos = body_start + size + (size & 1)  # chunks are word-aligned

    if fmt is None:
        raise WavFormatError("no fmt chunk found", len(blob))
    audio_format, channels, sample_rate, _byte_rate, _block_align, bits = fmt
    if audio_format != 1:
        raise WavFormatError(f"unsupported encoding {audio_format} (PCM only)", 12)
    if bits != 16:
        raise WavFormatError(f"unsupported bit depth {bits} (16-bit only)", 12)
    if channels not in (1, 2):
        raise WavFormatError(f"unsupported channel count {channels}", 12)
    if channels == 2 and not downmix:
        raise WavFormatError("stereo input (pass downmix to average channels)", 12)
    if data is None:
        raise WavFormatError("no data chunk found", len(blob))

    body, offset = data
    if len(body) % (2 * channels) != 0:
        raise WavFormatError("data chunk is not a whole number of frames", offset)
    ints = np.frombuffer(body, dtype="<i2").astype(np.float64)
    if channels == 2:
        ints = ints.reshape(-1, 2).mean(axis=1)
    return AudioClip(samples=ints / SCALE, sample_rate=sample_rate)


def write_wav(clip: AudioClip, path: str) -> None:
    """Write PCM-16 mono; the file is replaced atomically."""
    x = np.clip(clip.samples, -1.0, 1.0 - 1.0 / SCALE)
    ints = np.round(x * SCALE).astype("<i2")
    body = ints.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(body)) + b"WAVE"
    header += b"fmt " + struct.pack(
        "<IHHIIHH", 16, 1, 1, clip.sample_rate, clip.sample_rate * 2, 2, 16
    )
    header += b"data" + struct.pack("<I", len(body))
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(header + body)
    os.replace(tmp, path)
