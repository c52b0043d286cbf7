"""Finite-difference verification suite for every differentiable operation.

Each check draws random instances, compares the tape gradients against
central differences and reports the worst relative error. The full-model
check redraws the weights at order-one scale first: backward correctness
does not depend on weight magnitude, but at the 0.02 init the deepest
gradients fall below what central differences can resolve.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .attention import AttentionConfig, explainable_attention, init_attention_weights, mce_msa
from .block import BlockConfig, dual_phase, ffn, init_block_weights, init_phase_weights, transformer_sublayers
from .model import ModelConfig, ModelWeights, forward, init_weights
from .segmentation import ChunkConfig, overlap_add, segment
from .tensor import (
    GRUParams,
    Tensor,
    conv1d,
    frobenius_clamp,
    gelu,
    grad_check,
    group_norm,
    gru_sequence,
    layer_norm,
    matmul,
    relu,
    softmax,
)
from .training import mse_loss

GRAD_TOL = 1e-4
INSTANCES = 10
# coordinates below this magnitude cannot be resolved relatively by central
# differences at step 1e-5; they are skipped rather than compared to noise
RESOLVE_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    max_err: float
    tol: float = GRAD_TOL

    @property
    def ok(self) -> bool:
        return self.max_err < self.tol


def randomize_for_gradcheck(w: ModelWeights, rng: np.random.Generator, std: float = 0.3) -> None:
    """Redraw all parameters at order-one scale (norm gains stay near 1)."""
    for name, t in w.named_parameters():
        if "gamma" in name:
            t.data = 1.0 + std * rng.normal(size=t.shape)
        else:
            t.data = std * rng.normal(size=t.shape)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return (out * Tensor(w)).sum()


def _gc(f, params, **kw):
    return grad_check(f, params, min_magnitude=RESOLVE_FLOOR, **kw)


def _check(name: str, instance: Callable[[np.random.Generator], float], seed: int) -> CheckResult:
    worst = 0.0
    for i in range(INSTANCES):
        rng = np.random.default_rng(seed * 1000 + i)
        worst = max(worst, instance(rng))
    return CheckResult(name, worst)


def _param(rng, *shape, scale=0.6):
    return Tensor(scale * rng.normal(size=shape), requires_grad=True)


def _away_from_zero(x: np.ndarray, margin: float = 0.25) -> np.ndarray:
    return np.where(np.abs(x) < margin, x + np.sign(x + 1e-9) * margin, x)


def _op_checks() -> list:
    checks = []

    def matmul_case(rng):
        a, b = _param(rng, 4, 3), _param(rng, 3, 5)
        w = rng.normal(size=(4, 5))
        return _gc(lambda: _weighted(matmul(a, b), w), [a, b])

    checks.append(("matmul", matmul_case))

    def softmax_case(rng):
        x = _param(rng, 3, 6, scale=1.5)
        w = rng.normal(size=(3, 6))
        return _gc(lambda: _weighted(softmax(x, axis=-1), w), x)

    checks.append(("softmax", softmax_case))

    def layer_norm_case(rng):
        x, g, b = _param(rng, 4, 5), _param(rng, 5), _param(rng, 5)
        w = rng.normal(size=(4, 5))
        return _gc(lambda: _weighted(layer_norm(x, g, b), w), [x, g, b])

    checks.append(("layer_norm", layer_norm_case))

    def group_norm_case(rng):
        x, g, b = _param(rng, 2, 6, 4), _param(rng, 6), _param(rng, 6)
        w = rng.normal(size=(2, 6, 4))
        return _gc(lambda: _weighted(group_norm(x, 3, g, b), w), [x, g, b])

    checks.append(("group_norm", group_norm_case))

    def conv_valid_case(rng):
        x, k, b = _param(rng, 2, 10), _param(rng, 3, 2, 3), _param(rng, 3)
        w = rng.normal(size=(3, 3))
        return _gc(lambda: _weighted(conv1d(x, k, stride=3, bias=b), w), [x, k, b])

    checks.append(("conv1d_valid", conv_valid_case))

    def conv_same_case(rng):
        x, k = _param(rng, 2, 7), _param(rng, 3, 2, 3)
        w = rng.normal(size=(3, 7))
        return _gc(lambda: _weighted(conv1d(x, k, padding="same"), w), [x, k])

    checks.append(("conv1d_same", conv_same_case))

    def gru_case(rng):
        p = GRUParams(_param(rng, 3, 9), _param(rng, 3, 9), _param(rng, 9))
        x = _param(rng, 4, 3)
        h0 = _param(rng, 3)
        w = rng.normal(size=(4, 3))
        return _gc(
            lambda: _weighted(gru_sequence(x, p, h0=h0), w), [x, p.w_x, p.w_h, p.b, h0]
        )

    checks.append(("gru_sequence", gru_case))

    def relu_case(rng):
        x = Tensor(_away_from_zero(rng.normal(size=10)), requires_grad=True)
        w = rng.normal(size=10)
        return _gc(lambda: _weighted(relu(x), w), x)

    checks.append(("relu", relu_case))

    def gelu_case(rng):
        x = _param(rng, 10)
        w = rng.normal(size=10)
        return _gc(lambda: _weighted(gelu(x), w), x)

    checks.append(("gelu", gelu_case))

    def clamp_case(rng):
        x = _param(rng, 4, 4, scale=1.2)
        w = rng.normal(size=(4, 4))
        return _gc(lambda: _weighted(frobenius_clamp(x), w), x)

    checks.append(("frobenius_clamp", clamp_case))

    def segment_case(rng):
        x = _param(rng, 2, 11)
        cfg = ChunkConfig(4, hop=3)
        w = rng.normal(size=(2, 4, 4))
        return _gc(lambda: _weighted(segment(x, cfg).data, w), x)

    checks.append(("segment", segment_case))

    def overlap_add_case(rng):
        x = _param(rng, 2, 11)
        cfg = ChunkConfig(4, hop=3)
        w = rng.normal(size=(2, 11))
        return _gc(lambda: _weighted(overlap_add(segment(x, cfg), cfg), w), x)

    checks.append(("overlap_add", overlap_add_case))

    def explainable_case(rng):
        acfg = AttentionConfig(d=4, heads=1)
        aw = init_attention_weights(acfg, 8, rng, std=0.4)
        aw.bias.data = 0.3 * rng.normal(size=aw.bias.shape)
        q, kc, vc = _param(rng, 5, 4), _param(rng, 2, 4), _param(rng, 2, 4)
        w = rng.normal(size=(5, 4))
        return _gc(
            lambda: _weighted(explainable_attention(q, kc, vc, aw.bias), w),
            [q, kc, vc, aw.bias],
        )

    checks.append(("explainable_attention", explainable_case))

    def mce_case(rng):
        acfg = AttentionConfig(d=4, heads=2)
        aw = init_attention_weights(acfg, 8, rng, std=0.4)
        aw.bias.data = 0.3 * rng.normal(size=aw.bias.shape)
        y = _param(rng, 7, 4)
        w = rng.normal(size=(7, 4))
        params = [y, *aw.wq, *aw.wk, *aw.wv, aw.kernel_k, aw.kernel_v, aw.bias, aw.wo, aw.wo_b]
        return _gc(lambda: _weighted(mce_msa(y, aw, acfg), w), params)

    checks.append(("mce_msa", mce_case))

    def ffn_case(rng):
        bcfg = BlockConfig(d=4, heads=2)
        pw = init_phase_weights(bcfg, 8, rng, std=0.4)
        z = _param(rng, 5, 4)
        w = rng.normal(size=(5, 4))
        params = [z, pw.gru.w_x, pw.gru.w_h, pw.gru.b, pw.w1, pw.b1, pw.w2, pw.b2]
        return _gc(lambda: _weighted(ffn(z, pw, "gelu"), w), params)

    checks.append(("ffn", ffn_case))

    def sublayer_case(rng):
        bcfg = BlockConfig(d=4, heads=2)
        pw = init_phase_weights(bcfg, 8, rng, std=0.4)
        z = _param(rng, 6, 4)
        w = rng.normal(size=(6, 4))
        params = [z, pw.ln1_gamma, pw.ln1_beta, pw.ln2_gamma, pw.ln2_beta, pw.w1, pw.w2]
        return _gc(
            lambda: _weighted(transformer_sublayers(z, pw, bcfg), w),
            params,
            max_coords=24,
            rng=rng,
        )

    checks.append(("transformer_sublayers", sublayer_case))

    def dual_phase_case(rng):
        bcfg = BlockConfig(d=4, heads=2)
        bw = init_block_weights(bcfg, 8, 8, rng, std=0.4)
        x = _param(rng, 4, 6, 6)
        w = rng.normal(size=(4, 6, 6))
        params = [x, bw.local.attn.wq[0], bw.local.gru.w_x, bw.global_.attn.wv[1],
                  bw.local.gn_gamma, bw.global_.gn_beta, bw.global_.w2]
        return _gc(
            lambda: _weighted(dual_phase(x, bw, bcfg), w), params, max_coords=16, rng=rng
        )

    checks.append(("dual_phase", dual_phase_case))

    def mse_case(rng):
        a, b = _param(rng, 3, 7), _param(rng, 3, 7)
        return _gc(lambda: mse_loss(a, b), [a, b])

    checks.append(("mse_loss", mse_case))

    return checks


def full_model_check(seed: int = 0, instances: int = INSTANCES) -> CheckResult:
    """End-to-end loss gradient vs central differences on the micro model.

    d=8, two blocks, K=6, L=32 (six chunks keeps both attention phases
    away from the single-compressed-key degeneracy, where true-zero
    gradients make relative error meaningless). Coordinates are sampled.
    """
    cfg = ModelConfig(d=8, heads=2, n_blocks=2, chunk_len=6, max_chunks=6, seed=seed)
    worst = 0.0
    for i in range(instances):
        rng = np.random.default_rng(seed * 7919 + i)
        w = init_weights(cfg, seed=seed + i)
        randomize_for_gradcheck(w, rng)
        noisy = Tensor(0.3 * rng.normal(size=(1, 32)))
        clean = Tensor(0.3 * rng.normal(size=(1, 32)))
        params = [t for _, t in w.named_parameters()]

        def f():
            return mse_loss(forward(noisy, w, cfg), clean)

        worst = max(worst, _gc(f, params, max_coords=3, rng=rng))
    return CheckResult("full_model_loss", worst)


def run_gradient_suite(
    full: bool = True,
    seed: int = 0,
    report: Optional[Callable[[CheckResult], None]] = None,
) -> list:
    """Run every op check (plus the micro-model check when ``full``)."""
    results = []
    for idx, (name, case) in enumerate(_op_checks()):
        res = _check(name, case, seed=seed * 131 + idx + 1)
        results.append(res)
        if report is not None:
            report(res)
    if full:
        res = full_model_check(seed=seed, instances=INSTANCES)
        results.append(res)
        if report is not None:
            report(res)
    return results
