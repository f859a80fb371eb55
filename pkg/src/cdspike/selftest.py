"""Built-in oracle suites: quick independent checks of every layer.

Each check recomputes an expected answer by a route separate from the
implementation under test (brute force, closed form, hand-derived
values, or an instrumented recount) and compares.  Runs in seconds.
"""

from __future__ import annotations

import math

import numpy as np

from .accumulate import accumulate_gop, accumulate_naive, reconstruct_from_accumulated
from .codec import decode_gop, decode_stream, encode_video, read_cvc1, write_cvc1
from .codec import RawVideo
from .costmodel import count_flops, reproduce_table1
from .network import MODALITY_CHANNELS, Model, ModelConfig
from .numerics import (
    SurrogateSpec,
    Tensor,
    check_gradients,
    conv2d,
    flop_counter,
    layer_norm,
    no_grad,
    parameter,
    softmax,
    spike,
    surrogate_factor,
)
from .stm import ConvLifLayer, LifState, StmConfig, StmRunRecord, lif_step, spike_stats


def _random_video(rng, frames=13, h=24, w=24) -> RawVideo:
    data = rng.integers(0, 256, size=(frames, h, w, 3), dtype=np.uint8)
    return RawVideo(frames=data, fps=12.0)


def check_codec_roundtrip() -> tuple:
    rng = np.random.default_rng(11)
    for _ in range(2):
        video = _random_video(rng)
        stream = encode_video(video, block_size=8, radius=2)
        if not np.array_equal(decode_stream(stream).frames, video.frames):
            return False, "decoded frames differ from the source"
        if not np.array_equal(
                decode_stream(read_cvc1(write_cvc1(stream))).frames,
                video.frames):
            return False, "container round trip altered the stream"
    return True, "2 random videos, decode(encode(v)) == v, container stable"


def check_accumulation() -> tuple:
    rng = np.random.default_rng(12)
    video = _random_video(rng, frames=12, h=16, w=16)
    stream = encode_video(video, block_size=8, radius=2)
    gop = stream.gops[0]
    fast = accumulate_gop(gop)
    frames = decode_gop(gop)
    for t in range(1, len(gop.p_frames) + 1):
        naive = accumulate_naive(gop, t)
        acc = fast[t - 1]
        if not (np.array_equal(naive.pi, acc.pi)
                and np.array_equal(naive.delta, acc.delta)):
            return False, f"fast accumulation diverges from naive at t={t}"
        rec = reconstruct_from_accumulated(gop.i_frame, acc)
        if not np.array_equal(rec, frames[t]):
            return False, f"reconstruction differs from decoder at t={t}"
    return True, "naive == feed-forward at all t; reconstruction exact"


def check_lif_trace() -> tuple:
    layer = ConvLifLayer(1, 1, 1, lambda_init=0.9, v_th_init=1.0,
                         dynamic=False, rng=np.random.default_rng(0))
    layer.w.data[:] = 1.0
    state = LifState(u=Tensor(np.zeros((1, 1, 1, 1), dtype=np.float32)),
                     o=Tensor(np.zeros((1, 1, 1, 1), dtype=np.float32)))
    x = Tensor(np.full((1, 1, 1, 1), 0.5, dtype=np.float32))
    want_u = [0.5, 0.95, 1.355, 0.7195]
    want_o = [0.0, 0.0, 1.0, 0.0]
    with no_grad():
        for t in range(4):
            state, o = lif_step(layer, state, x, SurrogateSpec())
            if abs(state.u.item() - want_u[t]) > 1e-6 or o.item() != want_o[t]:
                return False, (f"t={t}: u={state.u.item():.6f} "
                               f"o={o.item()} != ({want_u[t]}, {want_o[t]})")
    return True, "hand trace u=(0.5,0.95,1.355,0.7195), o=(0,0,1,0)"


def check_surrogate() -> tuple:
    rng = np.random.default_rng(13)
    xs = rng.uniform(-2, 2, size=2000).astype(np.float64)
    gamma = 100.0
    got = surrogate_factor(xs, gamma)
    want = (1.0 / math.pi) * gamma / (1.0 + (gamma * xs) ** 2)
    err = np.max(np.abs(got - want))
    if err > 1e-6:
        return False, f"surrogate factor max error {err:.2e}"
    x = Tensor(xs, requires_grad=True)
    y = spike(x, SurrogateSpec(gamma=gamma))
    y.backward(np.ones_like(xs))
    err2 = np.max(np.abs(x.grad - want))
    if err2 > 1e-6:
        return False, f"spike backward max error {err2:.2e}"
    return True, "closed-form surrogate matches to 1e-6 on 2000 points"


def check_gradients_sample() -> tuple:
    rng = np.random.default_rng(14)
    xc = Tensor(rng.normal(size=(2, 3, 6, 6)))
    mc = Tensor(rng.normal(size=(2, 2, 6, 6)))
    w = parameter(rng.normal(size=(2, 3, 3, 3)), name="w", dtype=np.float64)
    rep = check_gradients(lambda: (conv2d(xc, w, padding=1) * mc).sum(),
                          [w], rng=np.random.default_rng(140))
    if not rep.ok:
        return False, f"conv2d gradcheck failed: {rep.failures[:2]}"

    g = parameter(rng.normal(size=(5,)), name="g", dtype=np.float64)
    b = parameter(rng.normal(size=(5,)), name="b", dtype=np.float64)
    xl = Tensor(rng.normal(size=(4, 5)))
    ml = Tensor(rng.normal(size=(4, 5)))
    rep2 = check_gradients(lambda: (layer_norm(xl, g, b) * ml).sum(),
                           [g, b], rng=np.random.default_rng(150))
    if not rep2.ok:
        return False, f"layer_norm gradcheck failed: {rep2.failures[:2]}"

    w3 = parameter(rng.normal(size=(3, 4)), name="w3", dtype=np.float64)
    xsm = Tensor(rng.normal(size=(2, 3)))
    msm = Tensor(rng.normal(size=(2, 4)))
    rep3 = check_gradients(lambda: (softmax(xsm @ w3) * msm).sum(),
                           [w3], rng=np.random.default_rng(160))
    if not rep3.ok:
        return False, f"softmax gradcheck failed: {rep3.failures[:2]}"
    return True, "conv2d, layer_norm, softmax match central differences"


def check_table1() -> tuple:
    rows = reproduce_table1()
    named = {r["name"]: r for r in rows}
    for name in ("VidTr", "ALT-L/14", "CoViAR"):
        if named[name]["pct_error"] > 1.0:
            return False, f"{name} reproduces at {named[name]['pct_error']:.2f}%"
    ours = named["Ours"]
    if not (0.693 <= ours["estimated_j"] <= 0.734 and ours["pct_error"] < 6.0):
        return False, f"Ours row estimate {ours['estimated_j']:.4f} J out of band"
    n_tight = sum(r["pct_error"] <= 1.0 for r in rows if r["name"] != "Ours")
    if n_tight < 9:
        return False, f"only {n_tight} published rows within 1%"
    if not all(r["within_rounding_window"] for r in rows if r["name"] != "Ours"):
        return False, "a published row is inconsistent with FLOPs rounding"
    return True, f"{n_tight}/11 rows within 1%, all consistent with rounding"


def check_flop_reconciliation() -> tuple:
    cfg = ModelConfig(input_hw=(16, 16), patch=4, d=16, depth=1, heads=2,
                      segments=2, classes=3,
                      stm=StmConfig(channels=(4, 4)))
    rng = np.random.default_rng(17)
    model = Model(cfg, rng)
    batch = {m: rng.normal(size=(1, 2, MODALITY_CHANNELS[m], 16, 16))
             .astype(np.float32) for m in cfg.active_modalities}
    rec = StmRunRecord()
    with no_grad(), flop_counter() as fc:
        model.forward(batch, record=rec)
    bd = count_flops(cfg, batch=1, record=rec)
    if fc.total != bd.instrumented_total:
        return False, (f"instrumented {fc.total} != analytic "
                       f"{bd.instrumented_total}")
    stats = spike_stats(rec)
    recount = 0
    for li in range(len(rec.layer_tags)):
        if rec.layer_tags[li].endswith(".l0"):
            continue
        recount += (rec.layer_spikes[li - 1] * rec.layer_kernel[li] ** 2
                    * rec.layer_cout[li])
    if stats.synops_total != recount:
        return False, "spike_stats synops disagree with direct recount"
    return True, "analytic walk == instrumented counter; synops recount equal"


CHECKS = (
    ("codec round trip", check_codec_roundtrip),
    ("motion accumulation", check_accumulation),
    ("LIF hand trace", check_lif_trace),
    ("surrogate gradient", check_surrogate),
    ("gradient checks", check_gradients_sample),
    ("energy table reproduction", check_table1),
    ("FLOP reconciliation", check_flop_reconciliation),
)


def run_all() -> tuple:
    """Run all oracle suites; returns (all passed, report lines)."""
    lines = []
    all_ok = True
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as e:          # a crashed check is a failed check
            ok, detail = False, f"raised {type(e).__name__}: {e}"
        all_ok &= ok
        lines.append(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    lines.append("selftest: " + ("all suites green" if all_ok else "FAILURES"))
    return all_ok, lines
