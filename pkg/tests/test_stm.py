from __future__ import annotations

import numpy as np
import pytest

from cdspike.numerics import SurrogateSpec, Tensor, check_gradients, no_grad
from cdspike.numerics.spike import smooth_spikes
from cdspike.stm import (
    ConvLifLayer,
    LifState,
    Stm,
    StmConfig,
    StmError,
    StmRunRecord,
    V_TH_FLOOR,
    dense_equivalent_synops,
    init_state,
    lif_step,
    membrane_update_ops,
    spike_stats,
    write_event_trace,
)


def scalar_layer(lam=0.9, vth=1.0, w=1.0, dynamic=False):
    layer = ConvLifLayer(1, 1, 1, lambda_init=lam, v_th_init=vth,
                         dynamic=dynamic, rng=np.random.default_rng(0))
    layer.w.data[:] = w
    return layer


def drive(value):
    return Tensor(np.full((1, 1, 1, 1), value, dtype=np.float32))


def run_steps(layer, x_value, steps):
    state = init_state(layer, 1, 1, 1)
    us, os_ = [], []
    with no_grad():
        for _ in range(steps):
            state, o = lif_step(layer, state, drive(x_value), SurrogateSpec())
            us.append(state.u.item())
            os_.append(o.item())
    return us, os_


def test_hand_traced_integrate_fire_reset():
    us, os_ = run_steps(scalar_layer(), 0.5, 4)
    np.testing.assert_allclose(us, [0.5, 0.95, 1.355, 0.7195], atol=1e-6)
    assert os_ == [0.0, 0.0, 1.0, 0.0]


def test_firing_condition_is_u_greater_equal_v_th():
    layer = scalar_layer()
    vth = float(layer.v_th().data)
    _, above = run_steps(layer, vth + 1e-4, 1)
    _, below = run_steps(layer, vth - 1e-4, 1)
    assert above[0] == 1.0 and below[0] == 0.0


def test_reset_is_by_subtraction_not_to_zero():
    # lam 0.5, v_th 1, drive 1.2: fire, recover subthreshold, fire again
    us, os_ = run_steps(scalar_layer(lam=0.5), 1.2, 3)
    assert os_ == [1.0, 0.0, 1.0]
    # u1 = 1.2 + 0.5*1.2 - 1 = 0.8 keeps the excess; u2 = 1.2 + 0.4 = 1.6
    np.testing.assert_allclose(us, [1.2, 0.8, 1.6], atol=1e-6)


def test_subthreshold_membrane_follows_the_geometric_sum():
    lam, d = 0.9, 0.05
    us, os_ = run_steps(scalar_layer(lam=lam), d, 30)
    assert all(o == 0.0 for o in os_)  # limit d/(1-lam) = 0.5 < v_th
    want = [d * (1 - lam ** t) / (1 - lam) for t in range(1, 31)]
    np.testing.assert_allclose(us, want, atol=1e-5)


def test_leak_reparameterization_stays_in_range():
    layer = scalar_layer(dynamic=True)
    for raw in (-10.0, -1.0, 0.0, 1.0, 10.0):
        layer.lam_raw.data = np.asarray(raw, dtype=np.float32)
        layer.vth_raw.data = np.asarray(raw, dtype=np.float32)
        lam = float(layer.lam().data)
        vth = float(layer.v_th().data)
        assert 0.0 < lam < 1.0
        assert vth > V_TH_FLOOR


def test_initial_values_round_trip_the_reparameterization():
    layer = scalar_layer(lam=0.73, vth=1.4)
    assert abs(float(layer.lam().data) - 0.73) < 1e-6
    assert abs(float(layer.v_th().data) - 1.4) < 1e-6


def test_huge_thresholds_survive_the_reparameterization():
    # the exact softplus inverse overflows expm1 up there; init must not
    layer = scalar_layer(vth=1e6)
    assert float(layer.v_th().data) == pytest.approx(1e6, rel=1e-6)
    layer = scalar_layer(vth=40.0)
    assert float(layer.v_th().data) == pytest.approx(40.0, rel=1e-6)


def test_fixed_params_receive_no_gradient():
    layer = scalar_layer(dynamic=False)
    state = init_state(layer, 1, 1, 1)
    state, o = lif_step(layer, state, drive(0.7), SurrogateSpec())
    state.u.sum().backward()
    assert layer.w.grad is not None
    assert layer.lam_raw.grad is None and layer.vth_raw.grad is None
    assert not layer.lam_raw.requires_grad


def test_dynamic_params_gradcheck_through_a_sequence():
    rng = np.random.default_rng(1)
    stm = Stm(StmConfig(depth=2, channels=(3, 2), gamma=3.0),
              in_channels=2, rng=rng, dtype=np.float64)
    frames = [Tensor(rng.normal(size=(1, 2, 4, 4)).astype(np.float64))
              for _ in range(3)]
    weights = [Tensor(rng.normal(size=(1, 2, 4, 4)).astype(np.float64))
               for _ in range(3)]

    def loss():
        outs = stm.forward(frames)
        acc = (outs[0] * weights[0]).sum()
        for o, m in zip(outs[1:], weights[1:]):
            acc = acc + (o * m).sum()
        return acc

    with smooth_spikes():
        rep = check_gradients(loss, stm.params(), sample=40,
                              rng=np.random.default_rng(2))
    assert rep.ok, rep


def test_forward_returns_membrane_not_spikes():
    rng = np.random.default_rng(3)
    stm = Stm(StmConfig(depth=1, channels=(4,)), in_channels=3, rng=rng)
    frames = [Tensor(rng.normal(size=(2, 3, 6, 6)).astype(np.float32))
              for _ in range(4)]
    with no_grad():
        outs = stm.forward(frames)
    assert len(outs) == 4
    assert outs[0].shape == (2, 4, 6, 6)
    vals = np.unique(outs[-1].data)
    assert not set(np.round(vals, 6)).issubset({0.0, 1.0})


def test_sequences_do_not_leak_state():
    rng = np.random.default_rng(4)
    stm = Stm(StmConfig(), in_channels=2, rng=rng)
    frames = [Tensor(rng.normal(size=(1, 2, 5, 5)).astype(np.float32))
              for _ in range(3)]
    with no_grad():
        first = stm.forward(frames)
        second = stm.forward(frames)
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a.data, b.data)


def test_run_record_layers_and_synops_accounting():
    rng = np.random.default_rng(5)
    cfg = StmConfig(depth=3, channels=(4, 5, 6), kernel=3)
    stm = Stm(cfg, in_channels=2, rng=rng, name="br")
    frames = [Tensor((3.0 * rng.normal(size=(2, 2, 8, 8))).astype(np.float32))
              for _ in range(5)]
    rec = StmRunRecord()
    with no_grad():
        stm.forward(frames, record=rec)

    assert rec.layer_tags == ["br.l0", "br.l1", "br.l2"]
    assert rec.layer_kernel == [3, 3, 3]
    assert rec.layer_cout == [4, 5, 6]
    # every layer sees T * N * Cout * H * W neuron-timesteps
    assert rec.layer_unit_steps == [5 * 2 * c * 64 for c in (4, 5, 6)]

    stats = spike_stats(rec)
    assert stats.total_spikes == sum(rec.layer_spikes)
    assert 0.0 <= stats.spike_rate <= 1.0
    # spike-fed layers only: l1 fed by l0's spikes, l2 by l1's
    want = (("br.l1", rec.layer_spikes[0] * 9 * 5),
            ("br.l2", rec.layer_spikes[1] * 9 * 6))
    assert stats.per_layer_synops == want
    assert stats.synops_total == want[0][1] + want[1][1]
    assert stats.synops_total <= dense_equivalent_synops(rec)
    assert membrane_update_ops(rec) == 2 * sum(rec.layer_unit_steps)


def test_spiking_is_sparse_relative_to_dense():
    rng = np.random.default_rng(6)
    stm = Stm(StmConfig(), in_channels=3, rng=rng)
    frames = [Tensor(rng.normal(size=(1, 3, 8, 8)).astype(np.float32))
              for _ in range(6)]
    rec = StmRunRecord()
    with no_grad():
        stm.forward(frames, record=rec)
    stats = spike_stats(rec)
    dense = dense_equivalent_synops(rec)
    assert dense > 0
    assert stats.synops_total < dense


def test_record_merge_concatenates_branches():
    a = StmRunRecord()
    a.register_layer("x.l0", 3, 4)
    a.note(0, 0, 10, 100)
    b = StmRunRecord()
    b.register_layer("y.l0", 3, 2)
    b.note(0, 0, 7, 50)
    a.merge(b)
    assert a.layer_tags == ["x.l0", "y.l0"]
    assert a.layer_spikes == [10, 7]
    assert a.layer_unit_steps == [100, 50]
    assert len(a.events) == 2


def test_smooth_mode_skips_recording():
    rng = np.random.default_rng(7)
    stm = Stm(StmConfig(depth=1, channels=(2,)), in_channels=1, rng=rng)
    frames = [Tensor(rng.normal(size=(1, 1, 4, 4)).astype(np.float32))]
    rec = StmRunRecord()
    with no_grad(), smooth_spikes():
        stm.forward(frames, record=rec)
    assert rec.layer_tags == [] and rec.events == []


def test_event_trace_csv(tmp_path):
    rng = np.random.default_rng(8)
    stm = Stm(StmConfig(depth=1, channels=(2,)), in_channels=1, rng=rng,
              name="m")
    frames = [Tensor(rng.normal(size=(1, 1, 4, 4)).astype(np.float32))
              for _ in range(2)]
    rec = StmRunRecord()
    with no_grad():
        stm.forward(frames, record=rec)
    path = tmp_path / "trace.csv"
    write_event_trace(rec, path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "timestep,layer,spike_count"
    assert len(lines) == 3
    assert lines[1].startswith("0,m.l0,")


def test_config_validation():
    with pytest.raises(StmError, match="depth"):
        StmConfig(depth=0, channels=())
    with pytest.raises(StmError, match="channel widths"):
        StmConfig(depth=2, channels=(4,))
    with pytest.raises(StmError, match="odd"):
        StmConfig(kernel=4)
    with pytest.raises(StmError, match="lambda_init"):
        StmConfig(lambda_init=1.0)
    with pytest.raises(StmError, match="v_th_init"):
        StmConfig(v_th_init=0.0)


def test_forward_validates_inputs():
    rng = np.random.default_rng(9)
    stm = Stm(StmConfig(depth=1, channels=(2,)), in_channels=3, rng=rng)
    with pytest.raises(StmError, match="empty"):
        stm.forward([])
    with pytest.raises(StmError, match="expected"):
        stm.forward([Tensor(np.zeros((1, 2, 4, 4), dtype=np.float32))])
    good = Tensor(np.zeros((1, 3, 4, 4), dtype=np.float32))
    drifted = Tensor(np.zeros((1, 3, 5, 4), dtype=np.float32))
    with pytest.raises(StmError, match="drifted"):
        stm.forward([good, drifted])


def test_lif_step_validates_channels():
    layer = scalar_layer()
    state = init_state(layer, 1, 1, 1)
    bad = Tensor(np.zeros((1, 2, 1, 1), dtype=np.float32))
    with pytest.raises(StmError, match="channels"):
        lif_step(layer, state, bad, SurrogateSpec())
