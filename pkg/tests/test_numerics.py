from __future__ import annotations

import math

import numpy as np
import pytest

from cdspike.numerics import (
    Adam,
    AdamState,
    CheckpointError,
    NumericsError,
    SurrogateSpec,
    Tensor,
    adam_step,
    affine,
    avg_pool2d,
    check_gradients,
    concat,
    conv2d,
    cross_entropy_logits,
    flop_counter,
    gelu,
    index_select,
    layer_norm,
    load_checkpoint,
    matmul,
    mean,
    no_grad,
    parameter,
    relu,
    save_checkpoint,
    sigmoid,
    softmax,
    softplus,
    spike,
    surrogate_factor,
    tsum,
)
from cdspike.numerics.spike import SpikeRecord, smooth_spikes


def p64(rng, *shape, name=None):
    return parameter(rng.normal(size=shape), name=name, dtype=np.float64)


def c64(rng, *shape):
    return Tensor(rng.normal(size=shape).astype(np.float64))


# ---------------------------------------------------------------------------
# gradient checks, one per primitive


def test_grad_add_mul_with_broadcasting():
    rng = np.random.default_rng(0)
    a = p64(rng, 3, 1, 4, name="a")
    b = p64(rng, 5, 1, name="b")
    m = c64(rng, 3, 5, 4)
    rep = check_gradients(lambda: ((a + b) * m + a * 2.0).sum(), [a, b])
    assert rep.ok, rep


def test_grad_subtraction_and_negation():
    rng = np.random.default_rng(1)
    a = p64(rng, 4, name="a")
    b = p64(rng, 4, name="b")
    rep = check_gradients(lambda: ((a - b) * (-a)).sum(), [a, b])
    assert rep.ok, rep


def test_grad_matmul_batched():
    rng = np.random.default_rng(2)
    a = p64(rng, 2, 3, 4, name="a")
    b = p64(rng, 4, 5, name="b")
    m = c64(rng, 2, 3, 5)
    rep = check_gradients(lambda: (matmul(a, b) * m).sum(), [a, b])
    assert rep.ok, rep


def test_grad_affine_with_bias():
    rng = np.random.default_rng(3)
    x = c64(rng, 2, 3, 4)
    w = p64(rng, 4, 6, name="w")
    b = p64(rng, 6, name="b")
    m = c64(rng, 2, 3, 6)
    rep = check_gradients(lambda: (affine(x, w, b) * m).sum(), [w, b])
    assert rep.ok, rep


def test_grad_conv2d_stride_padding_bias():
    rng = np.random.default_rng(4)
    x = p64(rng, 2, 3, 7, 8, name="x")
    w = p64(rng, 4, 3, 3, 3, name="w")
    b = p64(rng, 4, name="b")
    m = c64(rng, 2, 4, 4, 4)
    rep = check_gradients(
        lambda: (conv2d(x, w, b, stride=2, padding=1) * m).sum(),
        [x, w, b], sample=60)
    assert rep.ok, rep


def test_grad_activations():
    rng = np.random.default_rng(5)
    # keep relu inputs away from the kink
    base = rng.normal(size=(3, 5))
    base[np.abs(base) < 0.1] += 0.3
    x1 = parameter(base, name="x1", dtype=np.float64)
    m = c64(rng, 3, 5)
    rep = check_gradients(lambda: (relu(x1) * m).sum(), [x1])
    assert rep.ok, rep
    for fn in (gelu, sigmoid, softplus):
        x = p64(rng, 3, 5, name=fn.__name__)
        rep = check_gradients(lambda: (fn(x) * m).sum(), [x])
        assert rep.ok, (fn.__name__, rep)


def test_grad_softmax_and_layer_norm():
    rng = np.random.default_rng(6)
    x = p64(rng, 4, 7, name="x")
    m = c64(rng, 4, 7)
    rep = check_gradients(lambda: (softmax(x) * m).sum(), [x])
    assert rep.ok, rep

    g = p64(rng, 7, name="g")
    b = p64(rng, 7, name="b")
    xs = p64(rng, 4, 7, name="xs")
    rep = check_gradients(lambda: (layer_norm(xs, g, b) * m).sum(), [xs, g, b])
    assert rep.ok, rep


def test_grad_reductions_and_shapes():
    rng = np.random.default_rng(7)
    x = p64(rng, 2, 3, 4, name="x")
    m = c64(rng, 3, 2)

    def case():
        y = x.permute(1, 0, 2).reshape(3, 8)[:, 1:5]
        return (mean(y, axis=1, keepdims=False).reshape(3, 1)
                * m.reshape(3, 2)).sum() + tsum(y) * 0.25

    rep = check_gradients(case, [x])
    assert rep.ok, rep


def test_grad_concat_index_select_pool():
    rng = np.random.default_rng(8)
    a = p64(rng, 2, 3, name="a")
    b = p64(rng, 2, 3, name="b")
    idx = np.array([0, 2, 2, 1])
    m = c64(rng, 4, 3)
    rep = check_gradients(
        lambda: (index_select(concat([a, b], axis=0), 0, idx) * m).sum(),
        [a, b])
    assert rep.ok, rep

    x = p64(rng, 1, 2, 4, 4, name="x")
    mp = c64(rng, 1, 2, 2, 2)
    rep = check_gradients(lambda: (avg_pool2d(x, 2) * mp).sum(), [x])
    assert rep.ok, rep


def test_grad_cross_entropy():
    rng = np.random.default_rng(9)
    logits = p64(rng, 6, 4, name="logits")
    labels = np.array([0, 1, 2, 3, 1, 2])
    rep = check_gradients(lambda: cross_entropy_logits(logits, labels),
                          [logits])
    assert rep.ok, rep


def test_cross_entropy_value_matches_logsumexp():
    rng = np.random.default_rng(10)
    z = rng.normal(size=(5, 3)).astype(np.float64)
    labels = np.array([0, 2, 1, 1, 0])
    loss = cross_entropy_logits(Tensor(z), labels).item()
    want = np.mean([math.log(np.exp(z[i]).sum()) - z[i, labels[i]]
                    for i in range(5)])
    assert abs(loss - want) < 1e-12


def test_gradcheck_rejects_float32_and_nonscalar():
    rng = np.random.default_rng(11)
    p32 = parameter(rng.normal(size=(2,)).astype(np.float32), name="p")
    with pytest.raises(NumericsError, match="float64"):
        check_gradients(lambda: p32.sum(), [p32])
    p = p64(rng, 2, name="p")
    with pytest.raises(NumericsError, match="scalar"):
        check_gradients(lambda: p * 1.0, [p])


def test_gradcheck_catches_a_wrong_gradient():
    # a deliberately broken op: forward x^2, backward claims d/dx = 1
    from cdspike.numerics.tensor import make_op

    def bad_square(x):
        def backward(g):
            x.accumulate_grad(g)
        return make_op(x.data ** 2, (x,), backward, "bad_square")

    x = parameter(np.array([1.5, -0.7]), name="x", dtype=np.float64)
    rep = check_gradients(lambda: bad_square(x).sum(), [x])
    assert not rep.ok


# ---------------------------------------------------------------------------
# spikes


def test_spike_forward_is_a_hard_step_with_h0_firing():
    x = Tensor(np.array([-1.0, -1e-9, 0.0, 1e-9, 2.0], dtype=np.float32))
    out = spike(x)
    np.testing.assert_array_equal(out.data, [0, 0, 1, 1, 1])


def test_spike_backward_uses_the_arctan_surrogate():
    rng = np.random.default_rng(12)
    xs = rng.uniform(-3, 3, size=10_000)
    for gamma in (1.0, 40.0, 100.0):
        got = surrogate_factor(xs, gamma)
        want = (1.0 / math.pi) * gamma / (1.0 + (gamma * xs) ** 2)
        assert np.abs(got - want).max() < 1e-6
    x = Tensor(xs, requires_grad=True)
    y = spike(x, SurrogateSpec(gamma=40.0))
    y.backward(np.ones_like(xs))
    want = (1.0 / math.pi) * 40.0 / (1.0 + (40.0 * xs) ** 2)
    assert np.abs(x.grad - want).max() < 1e-6


def test_smooth_spikes_relaxation_is_differentiable():
    rng = np.random.default_rng(13)
    x = p64(rng, 20, name="x")
    with smooth_spikes():
        rep = check_gradients(
            lambda: (spike(x, SurrogateSpec(gamma=4.0)) * 1.0).sum(), [x])
    assert rep.ok, rep


def test_spike_record_counts_by_tag():
    x = Tensor(np.array([1.0, -1.0, 2.0, -2.0], dtype=np.float32))
    with SpikeRecord() as rec:
        spike(x, tag="a")
        spike(x, tag="a")
        spike(x, tag="b")
    assert rec.counts == {"a": 4, "b": 2}
    assert rec.sizes == {"a": 8, "b": 4}
    assert rec.total == 6
    assert rec.rate() == 0.5
    assert rec.rate("b") == 0.5


def test_smooth_mode_does_not_record_spikes():
    x = Tensor(np.ones(4, dtype=np.float32))
    with SpikeRecord() as rec, smooth_spikes():
        spike(x)
    assert rec.total == 0


def test_surrogate_spec_rejects_nonpositive_gamma():
    with pytest.raises(ValueError):
        SurrogateSpec(gamma=0.0)


# ---------------------------------------------------------------------------
# Adam


def test_adam_step_matches_a_hand_computation():
    lr, b1, b2, eps, wd = 0.1, 0.9, 0.999, 1e-3, 0.0
    p = np.array([1.0, -2.0])
    g = np.array([0.5, 0.25])
    st = AdamState(m=np.zeros(2), v=np.zeros(2))
    got1 = adam_step(p, g, st, 1, lr, b1, b2, eps, wd)
    m = 0.1 * g
    v = 0.001 * g * g
    want1 = p - lr * (m / 0.1) / (np.sqrt(v / 0.001) + eps)
    np.testing.assert_allclose(got1, want1, rtol=0, atol=1e-15)

    g2 = np.array([-0.1, 0.3])
    got2 = adam_step(got1, g2, st, 2, lr, b1, b2, eps, wd)
    m = b1 * m + 0.1 * g2
    v = b2 * v + 0.001 * g2 * g2
    want2 = got1 - lr * (m / (1 - b1 ** 2)) / (np.sqrt(v / (1 - b2 ** 2)) + eps)
    np.testing.assert_allclose(got2, want2, rtol=0, atol=1e-15)


def test_adam_weight_decay_is_l2_on_the_gradient():
    p = np.array([2.0])
    st = AdamState(m=np.zeros(1), v=np.zeros(1))
    stwd = AdamState(m=np.zeros(1), v=np.zeros(1))
    plain = adam_step(p, np.array([0.5]), st, 1, 0.1, 0.9, 0.999, 1e-3, 0.0)
    decayed = adam_step(p, np.array([0.5]), stwd, 1, 0.1, 0.9, 0.999, 1e-3, 0.1)
    manual = adam_step(p, np.array([0.5 + 0.1 * 2.0]),
                       AdamState(m=np.zeros(1), v=np.zeros(1)),
                       1, 0.1, 0.9, 0.999, 1e-3, 0.0)
    assert decayed != pytest.approx(plain.tolist())
    np.testing.assert_allclose(decayed, manual, rtol=0, atol=0)


def test_adam_optimizer_runs_to_a_minimum():
    p = parameter(np.array([3.0, -4.0]), name="p")
    opt = Adam([p], lr=0.2, weight_decay=0.0)
    for _ in range(400):
        opt.zero_grad()
        loss = (p * p).sum()
        loss.backward()
        opt.step()
    assert np.abs(p.data).max() < 1e-2


def test_adam_skips_gradless_params_and_validates():
    p = parameter(np.array([1.0]), name="p")
    q = parameter(np.array([2.0]), name="q")
    opt = Adam([p, q], lr=0.5, weight_decay=0.0)
    p.grad = np.array([1.0], dtype=np.float32)
    opt.step()
    assert p.data[0] != 1.0 and q.data[0] == 2.0

    frozen = parameter(np.array([1.0]))
    frozen.requires_grad = False
    with pytest.raises(NumericsError):
        Adam([frozen])
    with pytest.raises(NumericsError):
        Adam([p], betas=(1.0, 0.999))


def test_adam_keeps_scalar_parameter_shapes():
    p = parameter(np.asarray(0.5), name="p")
    x = Tensor(np.ones((3, 3), dtype=np.float32))
    opt = Adam([p], lr=0.1)
    (p * x).sum().backward()
    opt.step()
    assert p.data.shape == ()


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_preserves_values_and_shapes(tmp_path):
    rng = np.random.default_rng(14)
    state = {
        "w": rng.normal(size=(3, 4)).astype(np.float32),
        "scalar": np.asarray(0.75, dtype=np.float32),
        "empty_name_ok": np.zeros((2, 0, 3), dtype=np.float32),
    }
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, state)
    back = load_checkpoint(path)
    assert list(back) == list(state)
    for k in state:
        assert back[k].shape == state[k].shape
        np.testing.assert_array_equal(back[k], state[k])


def test_checkpoint_accepts_tensors_and_casts(tmp_path):
    p = parameter(np.array([1.5, 2.5], dtype=np.float64), name="p")
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, {"p": p})
    back = load_checkpoint(path)
    assert back["p"].dtype == np.float32
    np.testing.assert_array_equal(back["p"], [1.5, 2.5])


def test_checkpoint_corruption_is_detected(tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, {"w": np.ones((2, 2), dtype=np.float32)})
    blob = path.read_bytes()

    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="CKP1"):
        load_checkpoint(bad)

    bad.write_bytes(blob[:len(blob) - 3])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(bad)

    bad.write_bytes(blob + b"\x00\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(bad)


# ---------------------------------------------------------------------------
# operation cost accounting


def test_flop_rules_per_operation():
    a = Tensor(np.ones((2, 3), dtype=np.float32))
    b = Tensor(np.ones((2, 3), dtype=np.float32))

    with flop_counter() as fc:
        a + b
    assert fc.total == 6
    with flop_counter() as fc:
        a * b
    assert fc.total == 6
    with flop_counter() as fc:
        a - b  # lowered to an add plus a scalar multiply
    assert fc.total == 12

    with flop_counter() as fc:
        matmul(Tensor(np.ones((2, 3), dtype=np.float32)),
               Tensor(np.ones((3, 4), dtype=np.float32)))
    assert fc.total == 2 * 2 * 3 * 4

    x = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
    w = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
    with flop_counter() as fc:
        conv2d(x, w)  # a single multiply-accumulate
    assert fc.total == 2

    xb = Tensor(np.ones((5, 4), dtype=np.float32))
    wb = Tensor(np.ones((4, 6), dtype=np.float32))
    bias = Tensor(np.zeros(6, dtype=np.float32))
    with flop_counter() as fc:
        affine(xb, wb)
    without_bias = fc.total
    with flop_counter() as fc:
        affine(xb, wb, bias)
    assert fc.total == without_bias == 2 * 5 * 4 * 6  # bias is folded

    t = Tensor(np.ones((2, 5), dtype=np.float32))
    for fn, per_elem in ((relu, 1), (gelu, 1), (sigmoid, 1), (softplus, 1),
                         (softmax, 5)):
        with flop_counter() as fc:
            fn(t)
        assert fc.total == per_elem * 10, fn.__name__

    g = Tensor(np.ones(5, dtype=np.float32))
    be = Tensor(np.zeros(5, dtype=np.float32))
    with flop_counter() as fc:
        layer_norm(Tensor(np.ones((2, 5), dtype=np.float32)), g, be)
    assert fc.total == 8 * 10

    with flop_counter() as fc:
        mean(t)  # reads all inputs, writes one output
    assert fc.total == 10 + 1
    with flop_counter() as fc:
        tsum(t)
    assert fc.total == 10

    with flop_counter() as fc:
        avg_pool2d(Tensor(np.ones((1, 1, 4, 4), dtype=np.float32)), 2)
    assert fc.total == 16 + 4


def test_shape_ops_and_spikes_are_free():
    t = Tensor(np.ones((4, 6), dtype=np.float32))
    with flop_counter() as fc:
        t.reshape(6, 4).permute(1, 0)[1:3]
        index_select(t, 0, np.array([0, 1]))
        spike(Tensor(np.ones(100, dtype=np.float32)))
    assert fc.total == 0


def test_flop_counter_tags_and_nesting():
    t = Tensor(np.ones((2, 2), dtype=np.float32))
    w = Tensor(np.ones((2, 2), dtype=np.float32))
    with flop_counter() as outer:
        affine(t, w, tag="blk.fc")
        with flop_counter() as inner:
            affine(t, w, tag="blk.fc")
    assert inner.total == 16
    assert outer.total == 32  # outer context sees nested work too
    assert outer.tagged("blk") == 32


# ---------------------------------------------------------------------------
# engine behavior


def test_no_grad_blocks_graph_construction():
    p = parameter(np.array([1.0]), name="p")
    with no_grad():
        y = (p * 2.0).sum()
    assert not y.requires_grad
    y.backward()  # no graph: a no-op that must not touch p
    assert p.grad is None
    # outside the context the graph records again
    z = (p * 2.0).sum()
    z.backward()
    assert p.grad is not None


def test_debug_nan_flags_nonfinite_results():
    from cdspike.numerics import set_debug_nan
    x = Tensor(np.array([1.0, 0.0], dtype=np.float32))
    set_debug_nan(True)
    try:
        with np.errstate(invalid="ignore"), \
                pytest.raises(NumericsError, match="non-finite"):
            x * np.float32(np.inf)
    finally:
        set_debug_nan(False)


def test_dtype_and_shape_validation():
    a = Tensor(np.ones(3, dtype=np.float32))
    b = Tensor(np.ones(3, dtype=np.float64))
    with pytest.raises(NumericsError, match="dtype"):
        a + b
    with pytest.raises(NumericsError, match="division"):
        a / b
    with pytest.raises(NumericsError, match="matmul"):
        matmul(a, b)
    assert Tensor(np.arange(3)).dtype == np.float32  # ints are lifted
    with pytest.raises(NumericsError):
        Tensor(np.ones((2, 2))).item()


def test_backward_accumulates_over_shared_subgraphs():
    p = parameter(np.array([2.0]), name="p")
    y = p * 3.0
    out = (y + y).sum()
    out.backward()
    np.testing.assert_allclose(p.grad, [6.0])
