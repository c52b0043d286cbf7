"""Acceptance suite: one test per criterion, one printed verdict line each.

Run with ``pytest tests/test_acceptance.py -v -s``. Criterion 7 trains the
desk-scale model for 50 epochs and takes the longest (minutes, not hours);
everything else finishes in well under a minute apiece.
"""

import math
import time

import numpy as np

from dpdenoise import Tensor
from dpdenoise.attention import (
    AttentionConfig,
    AttentionTrace,
    attention_logit_counts,
    init_attention_weights,
    mce_msa,
)
from dpdenoise.cli import run_command
from dpdenoise.model import ModelConfig, forward, init_weights
from dpdenoise.segmentation import ChunkConfig, auto_chunk_lengths, overlap_add, segment
from dpdenoise.training import (
    SyntheticSpec,
    TrainConfig,
    make_synthetic_dataset,
    sdr,
    train,
)
from dpdenoise.verification import run_gradient_suite

from oracles import mce_msa_loops


def verdict(num: int, label: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    extra = f" ({detail})" if detail else ""
    print(f"ACCEPTANCE {num} {label}: {status}{extra}")
    assert ok, f"criterion {num} failed: {label} {extra}"


def test_criterion_1_gradient_suite():
    t0 = time.time()
    results = run_gradient_suite(full=True, seed=0)
    elapsed = time.time() - t0
    worst = max(r.max_err for r in results)
    ok = all(r.ok for r in results) and worst < 1e-4 and elapsed < 300.0
    verdict(1, "gradient suite", ok, f"worst {worst:.2e}, {elapsed:.0f}s")


def test_criterion_2_attention_bounds():
    cfg = AttentionConfig(d=8, heads=2)
    rng = np.random.default_rng(2024)
    w = init_attention_weights(cfg, 16, rng, std=0.4)
    worst_a, worst_p = 0.0, -math.inf
    for _ in range(1000):
        w.bias.data = 0.4 * rng.normal(size=w.bias.shape)
        y = Tensor(rng.normal(scale=1.5, size=(9, 8)))
        trace = AttentionTrace()
        mce_msa(y, w, cfg, trace)
        for a, feat in zip(trace.explainable, trace.features):
            a_norm = float(np.sqrt((a * a).sum()))
            worst_a = max(worst_a, a_norm)
        # the value bound needs the per-head compressed values; recompute
        from dpdenoise.attention import compress_kv, project_heads

        for (q, k, v), a, feat in zip(project_heads(y, w), trace.explainable, trace.features):
            _, v_c = compress_kv(k, v, w, cfg)
            p_norm = float(np.sqrt((feat**2).sum()))
            v_norm = float(np.sqrt((v_c.data**2).sum()))
            worst_p = max(worst_p, p_norm - v_norm)
    ok = worst_a <= 1.0 + 1e-9 and worst_p <= 1e-9
    verdict(2, "attention bounds", ok, f"max|A|={worst_a:.12f}, max(|P|-|Vc|)={worst_p:.2e}")


def test_criterion_3_oracle_equivalence():
    cfg = AttentionConfig(d=4, heads=2)
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(5000 + seed)
        w = init_attention_weights(cfg, 8, rng, std=0.35)
        w.bias.data = 0.35 * rng.normal(size=w.bias.shape)
        y = Tensor(rng.normal(size=(6, 4)))
        got = mce_msa(y, w, cfg).data
        plain = {
            "wq": [t.data for t in w.wq],
            "wk": [t.data for t in w.wk],
            "wv": [t.data for t in w.wv],
            "kernel_k": w.kernel_k.data,
            "kernel_v": w.kernel_v.data,
            "bias": w.bias.data,
            "wo": w.wo.data,
            "wo_b": w.wo_b.data,
        }
        worst = max(worst, float(np.abs(got - mce_msa_loops(y.data, plain)).max()))
    verdict(3, "oracle equivalence", worst < 1e-10, f"max abs diff {worst:.2e}")


def test_criterion_4_segmentation_round_trip():
    rng = np.random.default_rng(77)
    worst = 0.0
    saw_indivisible = False
    for _ in range(100):
        length = int(rng.integers(1, 400))
        k = int(rng.integers(1, 50))
        saw_indivisible = saw_indivisible or (length % k != 0)
        cfg = ChunkConfig(k)
        x = Tensor(rng.normal(size=(3, length)))
        back = overlap_add(segment(x, cfg), cfg)
        worst = max(worst, float(np.abs(back.data - x.data).max()))
    ok = worst <= 1e-15 and saw_indivisible
    verdict(4, "segmentation round trip", ok, f"max err {worst:.1e}")


def test_criterion_5_sublinearity():
    ok = True
    details = []
    for length in (10**3, 10**4, 10**5, 10**6):
        k, m = auto_chunk_lengths(length)
        bound = 3.0 * math.sqrt(length)
        details.append(f"L={length}: max(K,M)={max(k, m)} <= {bound:.0f}")
        ok = ok and max(k, m) <= bound
    verdict(5, "sublinearity", ok, "; ".join(details))


def test_criterion_6_compression_ratio():
    cfg = AttentionConfig(d=8, heads=2)
    full, comp = attention_logit_counts(300, cfg)
    ratio = comp / full
    verdict(6, "compression ratio", abs(ratio - 0.33) <= 0.02, f"ratio {ratio:.4f}")


DESK_SPEC = SyntheticSpec(
    n_clips=200, length=2000, sample_rate=16000, snr_db=0.0,
    clean_kind="tone-mix", noise_kind="white", seed=11,
)
DESK_MODEL = dict(d=32, heads=4, n_blocks=2, chunk_len=16, max_chunks=128, seed=7, dtype="float32")
DESK_TRAIN = dict(epochs=50, batch_size=8, max_lr=2.5e-4, warmup_steps=50,
                  patience=2, val_fraction=0.1, seed=3)


def test_criterion_7_desk_scale_denoising():
    t0 = time.time()
    ds = make_synthetic_dataset(DESK_SPEC)
    cfg = ModelConfig(**DESK_MODEL)
    w = init_weights(cfg)
    result = train(w, ds, cfg, TrainConfig(**DESK_TRAIN))
    elapsed = time.time() - t0
    noisy_sdr = float(np.mean([sdr(ds.clean[i], ds.noisy[i]) for i in result.val_indices]))
    final = result.history[-1]
    gain = final.val_sdr_db - noisy_sdr
    mse_ratio = final.train_mse / result.history[0].train_mse
    ok = gain >= 5.0 and mse_ratio < 0.5 and elapsed < 1800.0
    verdict(
        7,
        "desk-scale denoising",
        ok,
        f"SDR gain {gain:.2f} dB (noisy {noisy_sdr:.2f} -> {final.val_sdr_db:.2f}), "
        f"MSE ratio {mse_ratio:.3f}, {elapsed:.0f}s",
    )


def test_criterion_8_determinism():
    # every criterion above is seeded; this re-runs each moving part twice
    # and demands bit equality (the full 50-epoch run is built from the
    # same pieces at larger scale)
    ok = True

    ds_a = make_synthetic_dataset(SyntheticSpec(n_clips=6, length=500, snr_db=0.0, seed=21))
    ds_b = make_synthetic_dataset(SyntheticSpec(n_clips=6, length=500, snr_db=0.0, seed=21))
    ok = ok and np.array_equal(ds_a.noisy, ds_b.noisy) and np.array_equal(ds_a.clean, ds_b.clean)

    cfg = ModelConfig(d=16, heads=4, n_blocks=2, chunk_len=10, max_chunks=64, seed=5, dtype="float32")
    runs = []
    for _ in range(2):
        w = init_weights(cfg)
        res = train(w, ds_a, cfg, TrainConfig(epochs=3, batch_size=4, warmup_steps=5, seed=9))
        runs.append(
            (
                [r.train_mse for r in res.history],
                [r.val_sdr_db for r in res.history],
                [t.data.copy() for _, t in w.named_parameters()],
            )
        )
    ok = ok and runs[0][0] == runs[1][0] and runs[0][1] == runs[1][1]
    ok = ok and all(np.array_equal(a, b) for a, b in zip(runs[0][2], runs[1][2]))

    w = init_weights(cfg)
    x = Tensor(ds_a.noisy[:2, None, :].astype(np.float32))
    ok = ok and np.array_equal(forward(x, w, cfg).data, forward(x, w, cfg).data)

    suite_a = [r.max_err for r in run_gradient_suite(full=False, seed=4)]
    suite_b = [r.max_err for r in run_gradient_suite(full=False, seed=4)]
    ok = ok and suite_a == suite_b

    verdict(8, "determinism", ok)


def test_criterion_9_ablation_harness(tmp_path):
    base = tmp_path / "ablate.cfg"
    base.write_text(
        "d=48\nheads=8\nn_blocks=1\nchunk_len=500\nmax_chunks=8\nseed=0\ndtype=float32\n"
        "epochs=1\nbatch_size=2\nmax_lr=2.5e-4\nwarmup_steps=0\nval_fraction=0.5\ntrain_seed=0\n"
        "data_n_clips=2\ndata_length=2000\ndata_snr_db=0\ndata_seed=0\n"
    )
    out = tmp_path / "sweep.csv"
    code = run_command(
        [
            "ablate", "--config", str(base),
            "--heads", "6,8,12,16",
            "--chunks", "500,1000,2000",
            "--out", str(out), "--quiet",
        ]
    )
    lines = out.read_text().strip().splitlines() if out.exists() else []
    ok = code == 0 and lines and lines[0] == "axis,value,train_mse,val_mse,val_sdr_db"
    rows = [line.split(",") for line in lines[1:]]
    ok = ok and [(r[0], r[1]) for r in rows] == [
        ("heads", "6"), ("heads", "8"), ("heads", "12"), ("heads", "16"),
        ("chunks", "500"), ("chunks", "1000"), ("chunks", "2000"),
    ]
    ok = ok and all(math.isfinite(float(v)) for r in rows for v in r[2:])
    verdict(9, "ablation harness", ok, f"{len(rows)} sweep rows")
