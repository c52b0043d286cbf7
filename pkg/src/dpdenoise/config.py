"""Flat key=value config text, and mappings to the typed config objects.

The format is one ``key=value`` pair per line with ``#`` comments; values
are plain strings until a consumer types them. parse(serialize(parse(t)))
is the identity.
"""

from __future__ import annotations

import math
import os
from typing import Mapping

from .errors import ConfigError
from .model import ModelConfig
from .training import SyntheticSpec, TrainConfig


def parse_config_text(text: str) -> dict:
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value.strip()
    return out


def serialize_config(mapping: Mapping[str, str]) -> str:
    return "".join(f"{k}={v}\n" for k, v in mapping.items())


def load_config(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def write_text_atomic(path: str, text: str) -> None:
    """Write through a temp file and rename, so readers never see halves."""
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _take(mapping: Mapping[str, str], key: str, cast, default):
    if key not in mapping:
        return default
    raw = mapping[key]
    try:
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def _chunk_len(raw: str):
    return "auto" if raw == "auto" else int(raw)


def model_config_from_mapping(m: Mapping[str, str]) -> ModelConfig:
    base = ModelConfig()
    return ModelConfig(
        d=_take(m, "d", int, base.d),
        heads=_take(m, "heads", int, base.heads),
        n_blocks=_take(m, "n_blocks", int, base.n_blocks),
        chunk_len=_take(m, "chunk_len", _chunk_len, base.chunk_len),
        hop=_take(m, "hop", int, 0),
        encoder_kernel=_take(m, "encoder_kernel", int, base.encoder_kernel),
        activation=_take(m, "activation", str, base.activation),
        max_chunks=_take(m, "max_chunks", int, base.max_chunks),
        gn_groups=_take(m, "gn_groups", int, base.gn_groups),
        seed=_take(m, "seed", int, base.seed),
        dtype=_take(m, "dtype", str, base.dtype),
    )


def model_config_to_mapping(cfg: ModelConfig) -> dict:
    return {
        "d": str(cfg.d),
        "heads": str(cfg.heads),
        "n_blocks": str(cfg.n_blocks),
        "chunk_len": str(cfg.chunk_len),
        "hop": str(cfg.hop),
        "encoder_kernel": str(cfg.encoder_kernel),
        "activation": cfg.activation,
        "max_chunks": str(cfg.max_chunks),
        "gn_groups": str(cfg.gn_groups),
        "seed": str(cfg.seed),
        "dtype": cfg.dtype,
    }


def train_config_from_mapping(m: Mapping[str, str]) -> TrainConfig:
    base = TrainConfig()
    return TrainConfig(
        epochs=_take(m, "epochs", int, base.epochs),
        batch_size=_take(m, "batch_size", int, base.batch_size),
        max_lr=_take(m, "max_lr", float, base.max_lr),
        beta1=_take(m, "beta1", float, base.beta1),
        beta2=_take(m, "beta2", float, base.beta2),
        eps=_take(m, "eps", float, base.eps),
        warmup_steps=_take(m, "warmup_steps", int, base.warmup_steps),
        decay_factor=_take(m, "decay_factor", float, base.decay_factor),
        patience=_take(m, "patience", int, base.patience),
        val_fraction=_take(m, "val_fraction", float, base.val_fraction),
        seed=_take(m, "train_seed", int, base.seed),
    )


def _snr(raw: str) -> float:
    if raw.lower() in ("inf", "+inf", "infinity"):
        return math.inf
    return float(raw)


def synthetic_spec_from_mapping(m: Mapping[str, str], prefix: str = "data_") -> SyntheticSpec:
    base = SyntheticSpec()

    def key(name):
        return prefix + name

    return SyntheticSpec(
        n_clips=_take(m, key("n_clips"), int, base.n_clips),
        length=_take(m, key("length"), int, base.length),
        sample_rate=_take(m, key("sample_rate"), int, base.sample_rate),
        snr_db=_take(m, key("snr_db"), _snr, base.snr_db),
        clean_kind=_take(m, key("clean_kind"), str, base.clean_kind),
        noise_kind=_take(m, key("noise_kind"), str, base.noise_kind),
        seed=_take(m, key("seed"), int, base.seed),
        freq_lo=_take(m, key("freq_lo"), float, base.freq_lo),
        freq_hi=_take(m, key("freq_hi"), float, base.freq_hi),
        peak=_take(m, key("peak"), float, base.peak),
    )
