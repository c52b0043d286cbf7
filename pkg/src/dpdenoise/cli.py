"""Command-line entry points.

Subcommands: train, denoise, eval, gradcheck, bench-attn, synth, ablate.
Every failure path prints a one-line diagnostic and exits nonzero; no
command ever dumps a traceback at the user.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import replace

import numpy as np

from .attention import AttentionConfig, attention_logit_counts, init_attention_weights, mce_msa
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    load_config,
    write_text_atomic,
    model_config_from_mapping,
    synthetic_spec_from_mapping,
    train_config_from_mapping,
)
from .model import init_weights, forward
from .tensor import Tensor, no_grad
from .training import make_synthetic_dataset, sdr, train
from .verification import run_gradient_suite
from .wavfile import AudioClip, read_wav, write_wav


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpdenoise",
        description="Dual-phase chunked transformer audio denoiser",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a synthetic dataset described by the config")
    p.add_argument("--config", required=True, help="flat key=value config file")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--metrics", help="CSV history output path (default: <out>.csv)")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("denoise", help="denoise one WAV file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--downmix", action="store_true", help="average stereo to mono")

    p = sub.add_parser("eval", help="print MSE and SDR of a denoised clip")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--clean", required=True)
    p.add_argument("--noisy", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference checks for every op")
    p.add_argument("--full", action="store_true", help="include the end-to-end micro model")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("bench-attn", help="compare full vs compressed attention")
    p.add_argument("--len", dest="length", type=int, required=True)
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--repeats", type=int, default=3)

    p = sub.add_parser("synth", help="write synthetic clean/noisy WAV pairs")
    p.add_argument("--spec", required=True, help="config file with data_* keys")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("ablate", help="axis-wise sweep over heads and chunk sizes")
    p.add_argument("--config", required=True, help="base config (model+train+data keys)")
    p.add_argument("--heads", default="", help="comma list, e.g. 6,8,12,16")
    p.add_argument("--chunks", default="", help="comma list, e.g. 500,1000,2000")
    p.add_argument("--out", required=True, help="CSV results path")
    p.add_argument("--quiet", action="store_true")
    return parser


def _load_model(path: str):
    cfg, weights, _ = load_checkpoint(path)
    return cfg, weights


def _clip_to_batch(clip: AudioClip, dtype) -> Tensor:
    return Tensor(clip.samples.reshape(1, -1).astype(dtype))


def _denoise_clip(clip: AudioClip, cfg, weights) -> AudioClip:
    with no_grad():
        est = forward(_clip_to_batch(clip, cfg.np_dtype()), weights, cfg).data.reshape(-1)
    return AudioClip(samples=np.clip(est, -1.0, 1.0), sample_rate=clip.sample_rate)


def _cmd_train(args) -> int:
    mapping = load_config(args.config)
    spec = synthetic_spec_from_mapping(mapping)
    dataset = make_synthetic_dataset(spec)
    model_cfg = model_config_from_mapping(mapping).resolved(spec.length)
    train_cfg = train_config_from_mapping(mapping)
    weights = init_weights(model_cfg)
    csv_path = args.metrics or (args.out + ".csv")

    def report(rec):
        if not args.quiet:
            print(
                f"epoch {rec.epoch:4d}  train_mse {rec.train_mse:.6g}  "
                f"val_mse {rec.val_mse:.6g}  val_sdr {rec.val_sdr_db:.2f} dB  lr {rec.lr:.3g}"
            )

    train(weights, dataset, model_cfg, train_cfg, csv_path=csv_path, progress=report)
    save_checkpoint(args.out, model_cfg, weights)
    if not args.quiet:
        print(f"saved checkpoint to {args.out}; history to {csv_path}")
    return 0


def _cmd_denoise(args) -> int:
    cfg, weights = _load_model(args.ckpt)
    clip = read_wav(args.inp, downmix=args.downmix)
    write_wav(_denoise_clip(clip, cfg, weights), args.out)
    print(f"wrote {args.out} ({clip.samples.size} samples at {clip.sample_rate} Hz)")
    return 0


def _cmd_eval(args) -> int:
    cfg, weights = _load_model(args.ckpt)
    clean = read_wav(args.clean)
    noisy = read_wav(args.noisy)
    if clean.samples.size != noisy.samples.size:
        print("error: clean and noisy clips differ in length", file=sys.stderr)
        return 2
    if clean.sample_rate != noisy.sample_rate:
        print("error: clean and noisy sample rates differ (resampling unsupported)", file=sys.stderr)
        return 2
    est = _denoise_clip(noisy, cfg, weights)
    mse = float(np.mean((est.samples - clean.samples) ** 2))
    print(f"mse={mse:.8g}")
    print(f"sdr_db={sdr(clean.samples, est.samples):.4f}")
    print(f"noisy_sdr_db={sdr(clean.samples, noisy.samples):.4f}")
    return 0


def _cmd_gradcheck(args) -> int:
    failed = False

    def report(res):
        nonlocal failed
        status = "ok" if res.ok else "FAIL"
        print(f"{res.name:24s} max_rel_err {res.max_err:.3e}  {status}")
        failed = failed or not res.ok

    run_gradient_suite(full=args.full, seed=args.seed, report=report)
    print("gradcheck:", "FAIL" if failed else "all ok")
    return 1 if failed else 0


def _cmd_bench_attn(args) -> int:
    length, d, heads = args.length, args.d, args.heads
    cfg_fast = AttentionConfig(d=d, heads=heads)
    cfg_full = AttentionConfig(d=d, heads=heads, compress=False)
    full_count, comp_count = attention_logit_counts(length, cfg_fast)
    print(f"sequence length        {length}")
    print(f"full logits / head     {full_count}")
    print(f"compressed / head      {comp_count}")
    print(f"ratio                  {comp_count / full_count:.4f}")
    rng = np.random.default_rng(0)
    y = Tensor(rng.normal(size=(length, d)))
    for label, cfg in (("full", cfg_full), ("compressed", cfg_fast)):
        w = init_attention_weights(cfg, length, rng)
        with no_grad():
            mce_msa(y, w, cfg)  # warm caches before timing
            t0 = time.perf_counter()
            for _ in range(args.repeats):
                mce_msa(y, w, cfg)
            dt = (time.perf_counter() - t0) / args.repeats
        print(f"{label:10s} forward    {dt * 1e3:.2f} ms")
    return 0


def _cmd_synth(args) -> int:
    spec = synthetic_spec_from_mapping(load_config(args.spec))
    dataset = make_synthetic_dataset(spec)
    os.makedirs(args.out_dir, exist_ok=True)
    for i in range(len(dataset)):
        write_wav(
            AudioClip(dataset.clean[i], spec.sample_rate),
            os.path.join(args.out_dir, f"clean_{i:04d}.wav"),
        )
        write_wav(
            AudioClip(dataset.noisy[i], spec.sample_rate),
            os.path.join(args.out_dir, f"noisy_{i:04d}.wav"),
        )
    print(f"wrote {len(dataset)} clip pairs to {args.out_dir}")
    return 0


def _parse_int_list(raw: str) -> list:
    return [int(v) for v in raw.split(",") if v.strip()] if raw.strip() else []


def _cmd_ablate(args) -> int:
    mapping = load_config(args.config)
    spec = synthetic_spec_from_mapping(mapping)
    dataset = make_synthetic_dataset(spec)
    base_model = model_config_from_mapping(mapping).resolved(spec.length)
    train_cfg = train_config_from_mapping(mapping)
    heads_axis = _parse_int_list(args.heads)
    chunk_axis = _parse_int_list(args.chunks)
    runs = [("heads", h, replace(base_model, heads=h)) for h in heads_axis]
    runs += [
        ("chunks", k, replace(base_model, chunk_len=k, hop=k, max_chunks=max(
            base_model.max_chunks, -(-spec.length // k) + 1)))
        for k in chunk_axis
    ]
    if not runs:
        print("error: nothing to sweep (pass --heads and/or --chunks)", file=sys.stderr)
        return 2
    rows = ["axis,value,train_mse,val_mse,val_sdr_db"]
    for axis, value, model_cfg in runs:
        weights = init_weights(model_cfg)
        result = train(weights, dataset, model_cfg, train_cfg)
        last = result.history[-1]
        rows.append(
            f"{axis},{value},{last.train_mse:.10g},{last.val_mse:.10g},{last.val_sdr_db:.6g}"
        )
        if not args.quiet:
            print(rows[-1])
    write_text_atomic(args.out, "\n".join(rows) + "\n")
    if not args.quiet:
        print(f"wrote sweep results to {args.out}")
    return 0


_HANDLERS = {
    "train": _cmd_train,
    "denoise": _cmd_denoise,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "bench-attn": _cmd_bench_attn,
    "synth": _cmd_synth,
    "ablate": _cmd_ablate,
}


def run_command(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles --help and usage errors
        return int(exc.code or 0)
    try:
        return _HANDLERS[args.command](args)
    except FileNotFoundError as exc:
        print(f"error: no such file: {exc.filename}", file=sys.stderr)
        return 2
    except Exception as exc:  # diagnosed, never a traceback
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
