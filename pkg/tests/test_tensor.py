"""Tensor engine tests: hand values, finite-difference oracles, tape semantics."""

import numpy as np
import pytest

from dpdenoise import (
    GRUParams,
    Tape,
    Tensor,
    activation,
    backward,
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
from dpdenoise.errors import ConfigError, RankError, SequenceTooShortError, ShapeError
from dpdenoise.tensor import make_op


def randt(rng, *shape, scale=1.0):
    return Tensor(scale * rng.normal(size=shape), requires_grad=True)


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    x = Tensor(np.array([[2.0, -1.0], [0.5, 3.0]]))
    out = matmul(Tensor(np.eye(2)), x)
    np.testing.assert_array_equal(out.data, x.data)


def test_matmul_hand_value():
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    b = Tensor(np.array([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_grad_matches_finite_differences():
    rng = np.random.default_rng(7)
    a = randt(rng, 3, 4)
    b = randt(rng, 4, 5)
    err = grad_check(lambda: matmul(a, b).sum(), [a, b])
    assert err < 1e-6


def test_matmul_shape_mismatch_names_both_shapes():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros((2, 3)))
    with pytest.raises(ShapeError) as e:
        matmul(a, b)
    assert "(2, 3)" in str(e.value)


def test_matmul_batch_broadcasting_grads():
    rng = np.random.default_rng(8)
    a = randt(rng, 5, 1, 3, 4)
    b = randt(rng, 2, 4, 2)
    w = rng.normal(size=(5, 2, 3, 2))
    err = grad_check(lambda: (matmul(a, b) * Tensor(w)).sum(), [a, b])
    assert err < 1e-6


# ---------------------------------------------------------------------------
# softmax


def test_softmax_symmetry():
    out = softmax(Tensor(np.array([0.0, 0.0])), axis=-1)
    np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-15)


def test_softmax_analytic():
    out = softmax(Tensor(np.array([0.0, np.log(3.0)])), axis=-1)
    np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-15)


def test_softmax_rows_sum_to_one_sweep():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        x = Tensor(rng.normal(scale=5.0, size=(3, 7)))
        out = softmax(x, axis=-1).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(out > 0.0) and np.all(out < 1.0)


def test_softmax_grad():
    rng = np.random.default_rng(12)
    x = randt(rng, 4, 6)
    w = rng.normal(size=(4, 6))
    err = grad_check(lambda: (softmax(x, axis=-1) * Tensor(w)).sum(), x)
    assert err < 1e-6


# ---------------------------------------------------------------------------
# layer / group norm


def test_layer_norm_constant_input_is_zero():
    x = Tensor(np.full((3, 5), 4.2))
    g, b = Tensor(np.ones(5)), Tensor(np.zeros(5))
    out = layer_norm(x, g, b)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_layer_norm_already_normalized():
    x = Tensor(np.array([[1.0, -1.0]]))
    out = layer_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-15)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-9)


def test_layer_norm_idempotent_sweep():
    rng = np.random.default_rng(13)
    g, b = Tensor(np.ones(8)), Tensor(np.zeros(8))
    for _ in range(20):
        x = Tensor(rng.normal(size=(4, 8), scale=3.0))
        once = layer_norm(x, g, b, eps=1e-12)
        twice = layer_norm(once, g, b, eps=1e-12)
        np.testing.assert_allclose(twice.data, once.data, atol=1e-9)


def test_layer_norm_moments():
    rng = np.random.default_rng(14)
    x = Tensor(rng.normal(size=(6, 9), scale=2.0))
    out = layer_norm(x, Tensor(np.ones(9)), Tensor(np.zeros(9)), eps=1e-8).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-9
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-6)


def test_layer_norm_grad():
    rng = np.random.default_rng(15)
    x = randt(rng, 3, 6)
    g = randt(rng, 6)
    b = randt(rng, 6)
    w = rng.normal(size=(3, 6))
    err = grad_check(lambda: (layer_norm(x, g, b) * Tensor(w)).sum(), [x, g, b])
    assert err < 1e-5


def test_group_norm_constant_is_zero():
    x = Tensor(np.full((4, 10), 2.0))
    out = group_norm(x, 2, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_group_norm_single_group_is_joint_norm():
    rng = np.random.default_rng(16)
    xd = rng.normal(size=(1, 4, 10), scale=2.0)
    out = group_norm(Tensor(xd), 1, Tensor(np.ones(4)), Tensor(np.zeros(4)), eps=1e-12).data
    manual = (xd - xd.mean()) / np.sqrt(xd.var() + 1e-12)
    np.testing.assert_allclose(out, manual, atol=1e-12)


def test_group_norm_indivisible_channels_rejected():
    with pytest.raises(ConfigError):
        group_norm(Tensor(np.zeros((5, 3))), 2, Tensor(np.ones(5)), Tensor(np.zeros(5)))


def test_group_norm_grad():
    rng = np.random.default_rng(17)
    x = randt(rng, 2, 6, 5)
    g = randt(rng, 6)
    b = randt(rng, 6)
    w = rng.normal(size=(2, 6, 5))
    err = grad_check(lambda: (group_norm(x, 3, g, b) * Tensor(w)).sum(), [x, g, b])
    assert err < 1e-5


# ---------------------------------------------------------------------------
# conv1d


def test_conv1d_length_formula():
    x = Tensor(np.zeros((1, 9)))
    k = Tensor(np.zeros((1, 1, 3)))
    assert conv1d(x, k, stride=3).shape == (1, 3)


def test_conv1d_frame_sums():
    x = Tensor(np.arange(1.0, 10.0).reshape(1, 9))
    k = Tensor(np.ones((1, 1, 3)))
    np.testing.assert_array_equal(conv1d(x, k, stride=3).data, [[6.0, 15.0, 24.0]])


def test_conv1d_too_short_rejected():
    with pytest.raises(SequenceTooShortError):
        conv1d(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 1, 3))))


def test_conv1d_same_padding_preserves_length():
    rng = np.random.default_rng(18)
    x = Tensor(rng.normal(size=(2, 11)))
    k = Tensor(rng.normal(size=(4, 2, 3)))
    assert conv1d(x, k, padding="same").shape == (4, 11)


def test_conv1d_valid_length_formula_sweep():
    rng = np.random.default_rng(19)
    for _ in range(50):
        w = int(rng.integers(1, 6))
        n = int(rng.integers(w, 40))
        stride = int(rng.integers(1, 5))
        x = Tensor(rng.normal(size=(1, n)))
        k = Tensor(rng.normal(size=(1, 1, w)))
        assert conv1d(x, k, stride=stride).shape[-1] == (n - w) // stride + 1


def test_conv1d_grads():
    rng = np.random.default_rng(20)
    x = randt(rng, 2, 3, 10)
    k = randt(rng, 4, 3, 3)
    b = randt(rng, 4)
    w = rng.normal(size=(2, 4, 3))
    err = grad_check(lambda: (conv1d(x, k, stride=3, bias=b) * Tensor(w)).sum(), [x, k, b])
    assert err < 1e-5


def test_conv1d_same_padding_grads():
    rng = np.random.default_rng(21)
    x = randt(rng, 1, 2, 7)
    k = randt(rng, 3, 2, 3)
    w = rng.normal(size=(1, 3, 7))
    err = grad_check(lambda: (conv1d(x, k, padding="same") * Tensor(w)).sum(), [x, k])
    assert err < 1e-5


# ---------------------------------------------------------------------------
# GRU


def _gru_params(rng, d_in, hid, zero=False):
    def mk(*shape):
        data = np.zeros(shape) if zero else rng.normal(size=shape, scale=0.5)
        return Tensor(data, requires_grad=True)

    return GRUParams(mk(d_in, 3 * hid), mk(hid, 3 * hid), mk(3 * hid))


def test_gru_all_zero_params_give_zero_output():
    rng = np.random.default_rng(22)
    p = _gru_params(rng, 3, 4, zero=True)
    x = Tensor(rng.normal(size=(5, 3)))
    out = gru_sequence(x, p)
    np.testing.assert_array_equal(out.data, np.zeros((5, 4)))


def test_gru_single_step_matches_cell():
    rng = np.random.default_rng(23)
    p = _gru_params(rng, 3, 4)
    x = rng.normal(size=(1, 3))
    h0 = rng.normal(size=(4,))
    out = gru_sequence(Tensor(x), p, h0=Tensor(h0)).data[0]

    def sigmoid(v):
        return 1.0 / (1.0 + np.exp(-v))

    gx = x[0] @ p.w_x.data + p.b.data
    z = sigmoid(gx[:4] + h0 @ p.w_h.data[:, :4])
    r = sigmoid(gx[4:8] + h0 @ p.w_h.data[:, 4:8])
    n = np.tanh(gx[8:] + (r * h0) @ p.w_h.data[:, 8:])
    expected = (1.0 - z) * h0 + z * n
    np.testing.assert_allclose(out, expected, atol=1e-14)


def test_gru_backprop_through_time():
    rng = np.random.default_rng(24)
    p = _gru_params(rng, 3, 3)
    x = randt(rng, 4, 3)
    h0 = randt(rng, 3)
    w = rng.normal(size=(4, 3))

    def f():
        return (gru_sequence(x, p, h0=h0) * Tensor(w)).sum()

    err = grad_check(f, [x, p.w_x, p.w_h, p.b, h0])
    assert err < 1e-4


def test_gru_batched_matches_per_sequence():
    rng = np.random.default_rng(25)
    p = _gru_params(rng, 2, 3)
    xs = rng.normal(size=(4, 6, 2))
    batched = gru_sequence(Tensor(xs), p).data
    for i in range(4):
        single = gru_sequence(Tensor(xs[i]), p).data
        np.testing.assert_allclose(batched[i], single, atol=1e-14)


# ---------------------------------------------------------------------------
# activations


def test_relu_values():
    out = relu(Tensor(np.array([-1.0, 0.0, 2.0])))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_gelu_zero():
    assert gelu(Tensor(np.array([0.0]))).data[0] == 0.0


def test_activation_grads_away_from_kink():
    rng = np.random.default_rng(26)
    base = rng.normal(size=12)
    base = np.where(np.abs(base) < 0.2, base + np.sign(base + 0.1) * 0.3, base)
    for kind in ("relu", "gelu"):
        x = Tensor(base.copy(), requires_grad=True)
        w = rng.normal(size=12)
        err = grad_check(lambda: (activation(x, kind) * Tensor(w)).sum(), x)
        assert err < 1e-6, kind


def test_activation_unknown_kind():
    with pytest.raises(ConfigError):
        activation(Tensor(np.zeros(2)), "swish")


# ---------------------------------------------------------------------------
# frobenius clamp


def test_frobenius_clamp_small_inputs_pass_through():
    x = Tensor(np.array([[0.1, 0.2], [0.0, 0.1]]))
    np.testing.assert_array_equal(frobenius_clamp(x).data, x.data)


def test_frobenius_clamp_bounds_norm():
    rng = np.random.default_rng(27)
    for _ in range(100):
        x = Tensor(rng.normal(size=(4, 5), scale=3.0))
        out = frobenius_clamp(x).data
        assert np.sqrt((out**2).sum()) <= 1.0 + 1e-12


def test_frobenius_clamp_grads_both_branches():
    rng = np.random.default_rng(28)
    w = rng.normal(size=(3, 3))
    big = Tensor(rng.normal(size=(3, 3), scale=4.0), requires_grad=True)
    err = grad_check(lambda: (frobenius_clamp(big) * Tensor(w)).sum(), big)
    assert err < 1e-6
    small = Tensor(rng.normal(size=(3, 3), scale=0.05), requires_grad=True)
    err = grad_check(lambda: (frobenius_clamp(small) * Tensor(w)).sum(), small)
    assert err < 1e-6


# ---------------------------------------------------------------------------
# backward semantics


def test_backward_square():
    x = Tensor(np.array([3.0]), requires_grad=True)
    backward((x * x).sum())
    np.testing.assert_allclose(x.grad, [6.0])


def test_backward_accumulates_over_calls():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = (x * x).sum()
    backward(y)
    backward(y)
    np.testing.assert_allclose(x.grad, [12.0])


def test_backward_rejects_non_scalar():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(RankError):
        backward(x + x)


def test_tape_records_in_topological_order():
    x = Tensor(np.ones(3), requires_grad=True)
    y = ((x * 2.0) + x).sum()
    tape = Tape.trace(y)
    assert [r.op for r in tape.records] == ["mul", "add", "sum"]
    seen = set()
    for rec in tape.records:
        for p in rec.parents:
            assert p._record is None or id(p._record) in seen
        seen.add(id(rec))


# ---------------------------------------------------------------------------
# grad_check itself


def test_independent_graphs_in_parallel_threads():
    import threading

    results = {}

    def worker(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(20, 20)), requires_grad=True)
        for _ in range(5):
            backward((matmul(x, x) * matmul(x, x)).sum())
        results[seed] = x.grad.copy()

    threads = [threading.Thread(target=worker, args=(s,)) for s in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    # serial recomputation must match what the threads produced
    for seed, grad in results.items():
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(20, 20)), requires_grad=True)
        for _ in range(5):
            backward((matmul(x, x) * matmul(x, x)).sum())
        np.testing.assert_array_equal(grad, x.grad)


def test_grad_check_exact_for_linear():
    rng = np.random.default_rng(29)
    x = randt(rng, 5)
    w = rng.normal(size=5)
    err = grad_check(lambda: (x * Tensor(w)).sum(), x)
    assert err < 1e-10


def test_grad_check_softmax_cross_entropy_chain():
    from dpdenoise.tensor import log

    rng = np.random.default_rng(30)
    x = randt(rng, 8)
    target = np.abs(rng.normal(size=8))
    target /= target.sum()

    def f():
        return -(Tensor(target) * log(softmax(x, axis=-1))).sum()

    assert grad_check(f, x) < 1e-6


def test_grad_check_flags_corrupted_backward():
    x = Tensor(np.array([1.3, -0.4, 2.0]), requires_grad=True)

    def broken_square(t):
        def bwd(g):
            return (g * 3.0 * t.data,)  # wrong: should be 2x

        return make_op(t.data**2, (t,), "broken_square", bwd)

    err = grad_check(lambda: broken_square(x).sum(), x)
    assert err > 1e-2


def test_every_differentiable_op_random_sweep():
    # ten random instances per op family at 64-bit
    rng = np.random.default_rng(31)
    for i in range(10):
        a = randt(rng, 4, 3)
        b = randt(rng, 3, 4)
        w = rng.normal(size=(4, 4))
        assert grad_check(lambda: (matmul(a, b) * Tensor(w)).sum(), [a, b]) < 1e-4
        x = randt(rng, 2, 5)
        w2 = Tensor(rng.normal(size=(2, 5)))
        assert grad_check(lambda: (softmax(x) * w2).sum(), x) < 1e-4
        g, bb = randt(rng, 5), randt(rng, 5)
        w3 = Tensor(rng.normal(size=(2, 5)))
        assert grad_check(lambda: (layer_norm(x, g, bb) * w3).sum(), [x, g, bb]) < 1e-4
