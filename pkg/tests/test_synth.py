from __future__ import annotations

import numpy as np
import pytest

from cdspike.accumulate import accumulate_gop
from cdspike.codec import encode_video
from cdspike.synth import (
    MOTION_CLASSES,
    SynthError,
    SynthSpec,
    appearance_matrix,
    make_oscillation_pair,
    make_static_video,
    make_video,
    synth_dataset,
)


def tiny_spec(**kw):
    base = dict(videos_per_class=4, frames=6)
    base.update(kw)
    return SynthSpec(**base)


def test_generation_is_deterministic():
    spec = tiny_spec()
    a = synth_dataset(spec, seed=11)
    b = synth_dataset(spec, seed=11)
    assert len(a.videos) == 20
    for va, vb in zip(a.videos, b.videos):
        np.testing.assert_array_equal(va.video.frames, vb.video.frames)
        assert va.label == vb.label
    np.testing.assert_array_equal(a.train_ix, b.train_ix)
    np.testing.assert_array_equal(a.val_ix, b.val_ix)


def test_different_seeds_give_different_videos():
    spec = tiny_spec()
    a = synth_dataset(spec, seed=1)
    b = synth_dataset(spec, seed=2)
    assert any((va.video.frames != vb.video.frames).any()
               for va, vb in zip(a.videos, b.videos))


def test_labels_follow_canonical_class_blocks():
    spec = tiny_spec()
    ds = synth_dataset(spec, seed=3)
    labels = ds.labels()
    assert labels.shape == (20,)
    for i, v in enumerate(ds.videos):
        assert v.label == i // 4
        assert v.class_name == MOTION_CLASSES[v.label]
    assert np.bincount(labels).tolist() == [4] * 5


def test_split_is_stratified_and_disjoint():
    spec = tiny_spec(videos_per_class=10)
    ds = synth_dataset(spec, seed=4)
    labels = ds.labels()
    assert len(set(ds.train_ix) & set(ds.val_ix)) == 0
    assert sorted(np.concatenate([ds.train_ix, ds.val_ix])) == list(range(50))
    val_counts = np.bincount(labels[ds.val_ix], minlength=5)
    assert val_counts.tolist() == [2] * 5  # 20% of 10 per class


def test_appearance_is_uncorrelated_with_labels():
    # wide-N run so chance correlation sits well under the bound
    spec = SynthSpec(videos_per_class=200, frames=2)
    ds = synth_dataset(spec, seed=0)
    feats = appearance_matrix(ds.videos)
    labels = ds.labels()
    assert feats.shape == (1000, 9)
    worst = 0.0
    for c in range(5):
        ind = (labels == c).astype(np.float64)
        for j in range(feats.shape[1]):
            worst = max(worst, abs(np.corrcoef(feats[:, j], ind)[0, 1]))
    assert worst < 0.1


def test_frames_are_uint8_with_a_visible_object():
    lv = make_video(tiny_spec(), class_ix=2, seed=5, index=0)
    assert lv.video.frames.dtype == np.uint8
    assert lv.video.frames.shape == (6, 32, 32, 3)
    assert lv.mask.shape == (6, 32, 32)
    assert lv.mask.max() > 0.5


def test_background_is_static_off_the_object():
    lv = make_video(tiny_spec(), class_ix=0, seed=6, index=1)
    # blob coverage decays smoothly, so demand exactness only where it is
    # numerically zero and allow quantization flips in the far tail
    far = lv.mask.max(axis=0) < 1e-6
    tail = lv.mask.max(axis=0) < 1e-4
    assert far.sum() > 100
    ref = lv.video.frames[0].astype(np.int16)
    for t in range(1, 6):
        frame = lv.video.frames[t].astype(np.int16)
        np.testing.assert_array_equal(frame[far], ref[far])
        assert np.abs(frame[tail] - ref[tail]).max() <= 1


def test_translate_right_accumulates_positive_horizontal_flow():
    spec = SynthSpec(videos_per_class=1, frames=12)
    lv = make_video(spec, class_ix=0, seed=5, index=0)
    stream = encode_video(lv.video, block_size=8, gop_size=12, radius=3)
    acc = accumulate_gop(stream.gops[0])[9]
    on = lv.mask[acc.t] > 0.3
    assert acc.pi[..., 0][on].mean() > 5.0
    assert abs(acc.pi[..., 1][on].mean()) < 1.0


def test_mirror_phase_pair_has_opposite_vertical_flow():
    spec = SynthSpec(videos_per_class=1, frames=12)
    a, b = make_oscillation_pair(spec, seed=3)
    assert a.appearance["noise_seed"] == b.appearance["noise_seed"]
    np.testing.assert_array_equal(a.video.frames[0], b.video.frames[0])
    acc_a = accumulate_gop(encode_video(a.video, block_size=8, gop_size=12,
                                        radius=3).gops[0])
    acc_b = accumulate_gop(encode_video(b.video, block_size=8, gop_size=12,
                                        radius=3).gops[0])
    for t in (3, 5, 7):
        pa = acc_a[t - 1].pi[..., 1][a.mask[t] > 0.3].mean()
        pb = acc_b[t - 1].pi[..., 1][b.mask[t] > 0.3].mean()
        assert pa > 0.5 and pb < -0.5, t


def test_varied_appearance_pair_shares_the_motion_program():
    a, b = make_oscillation_pair(tiny_spec(), seed=8, mirrored=False,
                                 vary_appearance=True)
    assert a.motion == b.motion
    assert (a.appearance["color"] != b.appearance["color"]).any()
    assert (a.video.frames != b.video.frames).any()


def test_static_video_has_identical_frames():
    sv = make_static_video(tiny_spec(), seed=4)
    for t in range(1, 6):
        np.testing.assert_array_equal(sv.video.frames[t], sv.video.frames[0])


def test_spec_validation():
    with pytest.raises(SynthError, match="unknown motion"):
        SynthSpec(classes=("warp",))
    with pytest.raises(SynthError, match="at least one"):
        SynthSpec(classes=())
    with pytest.raises(SynthError, match="16x16"):
        SynthSpec(height=8)
    with pytest.raises(SynthError, match=">= 2 frames"):
        SynthSpec(frames=1)
    with pytest.raises(SynthError, match="val_fraction"):
        SynthSpec(val_fraction=1.5)
    with pytest.raises(SynthError, match="oscillate_vertical"):
        make_oscillation_pair(SynthSpec(classes=("orbit",)), seed=0)
