"""Block sublayers and dual-phase orchestration."""

import numpy as np

from dpdenoise import Tensor, backward, grad_check, layer_norm
from dpdenoise.block import (
    BlockConfig,
    dual_phase,
    ffn,
    init_block_weights,
    init_phase_weights,
    transformer_sublayers,
)


def make_cfg(d=4, heads=2, **kw):
    return BlockConfig(d=d, heads=heads, **kw)


def make_phase(cfg, seed, max_len=16, std=0.3):
    return init_phase_weights(cfg, max_len, np.random.default_rng(seed), std)


def zero_phase(w):
    for t in (
        *w.attn.wq, *w.attn.wk, *w.attn.wv,
        w.attn.kernel_k, w.attn.kernel_v, w.attn.bias, w.attn.wo, w.attn.wo_b,
        w.gru.w_x, w.gru.w_h, w.gru.b, w.w1, w.b1, w.w2, w.b2,
    ):
        t.data = np.zeros_like(t.data)


def iter_phase_tensors(w):
    yield from w.attn.wq
    yield from w.attn.wk
    yield from w.attn.wv
    yield w.attn.kernel_k
    yield w.attn.kernel_v
    yield w.attn.bias
    yield w.attn.wo
    yield w.attn.wo_b
    yield w.gru.w_x
    yield w.gru.w_h
    yield w.gru.b
    yield w.w1
    yield w.b1
    yield w.w2
    yield w.b2
    yield w.ln1_gamma
    yield w.ln1_beta
    yield w.ln2_gamma
    yield w.ln2_beta
    yield w.gn_gamma
    yield w.gn_beta


# ---------------------------------------------------------------------------
# ffn


def test_ffn_zero_params_zero_output():
    cfg = make_cfg()
    w = make_phase(cfg, 0)
    zero_phase(w)
    out = ffn(Tensor(np.random.default_rng(1).normal(size=(5, 4))), w, "gelu")
    np.testing.assert_array_equal(out.data, np.zeros((5, 4)))


def test_ffn_shape_and_width():
    cfg = make_cfg()
    w = make_phase(cfg, 2)
    assert w.w1.shape == (4, 16)  # inner width 4*d
    out = ffn(Tensor(np.random.default_rng(3).normal(size=(7, 4))), w, "gelu")
    assert out.shape == (7, 4)


def test_ffn_gradients():
    cfg = make_cfg()
    w = make_phase(cfg, 4)
    rng = np.random.default_rng(5)
    z = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    target = Tensor(rng.normal(size=(5, 4)))
    params = [z, w.gru.w_x, w.gru.w_h, w.gru.b, w.w1, w.b1, w.w2, w.b2]

    def f():
        d = ffn(z, w, "gelu") - target
        return (d * d).sum()

    assert grad_check(f, params) < 1e-4


# ---------------------------------------------------------------------------
# sublayers


def test_sublayers_reduce_to_layer_norm_with_zero_weights():
    cfg = make_cfg(d=4, heads=2, ln_eps=1e-12)
    w = make_phase(cfg, 6)
    zero_phase(w)
    rng = np.random.default_rng(7)
    z = Tensor(rng.normal(size=(5, 4), scale=2.0))
    out = transformer_sublayers(z, w, cfg)
    ln = layer_norm(z, w.ln1_gamma, w.ln1_beta, cfg.ln_eps)
    np.testing.assert_allclose(out.data, ln.data, atol=1e-9)


def test_sublayers_shape():
    cfg = make_cfg(d=8, heads=2)
    w = make_phase(cfg, 8)
    z = Tensor(np.random.default_rng(9).normal(size=(7, 8)))
    assert transformer_sublayers(z, w, cfg).shape == (7, 8)


def test_sublayers_gradients():
    # sequence length 6 keeps two compressed keys, so every weight matters
    cfg = make_cfg(d=4, heads=2)
    w = make_phase(cfg, 10)
    rng = np.random.default_rng(11)
    z = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    target = Tensor(rng.normal(size=(6, 4)))
    params = [z] + list(iter_phase_tensors(w))

    def f():
        d = transformer_sublayers(z, w, cfg) - target
        return (d * d).sum()

    assert grad_check(f, params, max_coords=20, rng=np.random.default_rng(0)) < 1e-4


def test_sublayers_batch_permutation_equivariance_is_exact():
    # each batch item is processed independently, so reordering commutes bitwise
    cfg = make_cfg(d=4, heads=2)
    w = make_phase(cfg, 12)
    rng = np.random.default_rng(13)
    z = rng.normal(size=(6, 5, 4))
    out = transformer_sublayers(Tensor(z), w, cfg).data
    for _ in range(20):
        perm = rng.permutation(6)
        out_perm = transformer_sublayers(Tensor(z[perm]), w, cfg).data
        np.testing.assert_array_equal(out_perm, out[perm])


# ---------------------------------------------------------------------------
# dual phase


def test_dual_phase_shape_preserved():
    cfg = make_cfg(d=4, heads=2)
    bw = init_block_weights(cfg, 16, 16, np.random.default_rng(14), std=0.3)
    x = Tensor(np.random.default_rng(15).normal(size=(4, 10, 6)))
    assert dual_phase(x, bw, cfg).shape == (4, 10, 6)


def test_dual_phase_single_chunk_finite():
    cfg = make_cfg(d=4, heads=2)
    bw = init_block_weights(cfg, 16, 16, np.random.default_rng(16), std=0.3)
    x = Tensor(np.random.default_rng(17).normal(size=(4, 5, 1)))
    out = dual_phase(x, bw, cfg)
    assert out.shape == (4, 5, 1)
    assert np.all(np.isfinite(out.data))


def test_dual_phase_chunk_permutation_equivariance_with_global_zeroed():
    cfg = make_cfg(d=4, heads=2)
    bw = init_block_weights(cfg, 16, 16, np.random.default_rng(18), std=0.3)
    zero_phase(bw.global_)
    rng = np.random.default_rng(19)
    x = rng.normal(size=(4, 6, 8))
    out = dual_phase(Tensor(x), bw, cfg).data
    for _ in range(20):
        perm = rng.permutation(8)
        out_perm = dual_phase(Tensor(x[:, :, perm]), bw, cfg).data
        np.testing.assert_allclose(out_perm, out[:, :, perm], atol=1e-12)


def test_dual_phase_intra_index_permutation_equivariance_with_local_zeroed():
    cfg = make_cfg(d=4, heads=2)
    bw = init_block_weights(cfg, 16, 16, np.random.default_rng(20), std=0.3)
    zero_phase(bw.local)
    rng = np.random.default_rng(21)
    x = rng.normal(size=(4, 6, 8))
    out = dual_phase(Tensor(x), bw, cfg).data
    for _ in range(20):
        perm = rng.permutation(6)
        out_perm = dual_phase(Tensor(x[:, perm, :]), bw, cfg).data
        np.testing.assert_allclose(out_perm, out[:, perm, :], atol=1e-12)


def test_stacked_blocks_preserve_shape():
    cfg = make_cfg(d=4, heads=2)
    rng = np.random.default_rng(22)
    blocks = [init_block_weights(cfg, 16, 16, rng, std=0.2) for _ in range(3)]
    x = Tensor(rng.normal(size=(4, 7, 5)))
    for bw in blocks:
        x = dual_phase(x, bw, cfg)
    assert x.shape == (4, 7, 5)
    assert np.all(np.isfinite(x.data))


def test_all_block_parameters_receive_gradients():
    # both phases need >= 2 compressed keys, else softmax is constant and
    # query/key paths correctly get zero gradient
    cfg = make_cfg(d=4, heads=2)
    bw = init_block_weights(cfg, 16, 16, np.random.default_rng(23), std=0.3)
    x = Tensor(np.random.default_rng(24).normal(size=(4, 7, 6)), requires_grad=True)
    out = dual_phase(x, bw, cfg)
    backward((out * out).sum())
    for phase in (bw.local, bw.global_):
        for t in iter_phase_tensors(phase):
            assert t.grad is not None and np.any(t.grad != 0.0), t


def test_dual_phase_batched_matches_unbatched():
    cfg = make_cfg(d=4, heads=2)
    bw = init_block_weights(cfg, 16, 16, np.random.default_rng(25), std=0.3)
    rng = np.random.default_rng(26)
    xs = rng.normal(size=(3, 4, 5, 6))
    batched = dual_phase(Tensor(xs), bw, cfg).data
    for i in range(3):
        single = dual_phase(Tensor(xs[i]), bw, cfg).data
        np.testing.assert_allclose(batched[i], single, atol=1e-12)
