from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdspike.codec import (
    CodecError,
    CompressedStream,
    MotionField,
    ParseError,
    RawVideo,
    decode_gop,
    decode_stream,
    encode_video,
    load_cvc1,
    match_all_blocks,
    motion_compensate,
    read_cvc1,
    save_cvc1,
    write_cvc1,
)


def brute_force_match(ref, target, block_size, radius):
    """Per-block exhaustive SAD search written as plain loops.

    Candidates ordered by (|dx|+|dy|, dy, dx); the first minimum wins.
    """
    h, w = ref.shape[:2]
    ref_i = ref.astype(np.int64)
    tgt_i = target.astype(np.int64)
    cands = sorted(
        ((dx, dy) for dy in range(-radius, radius + 1)
         for dx in range(-radius, radius + 1)),
        key=lambda c: (abs(c[0]) + abs(c[1]), c[1], c[0]))
    bh = -(-h // block_size)
    bw = -(-w // block_size)
    mv = np.zeros((bh, bw, 2), dtype=np.int16)
    sad = np.zeros((bh, bw), dtype=np.int64)
    for br in range(bh):
        for bc in range(bw):
            r0, r1 = br * block_size, min((br + 1) * block_size, h)
            c0, c1 = bc * block_size, min((bc + 1) * block_size, w)
            best = None
            for dx, dy in cands:
                rows = np.clip(np.arange(r0, r1) - dy, 0, h - 1)
                cols = np.clip(np.arange(c0, c1) - dx, 0, w - 1)
                pred = ref_i[rows[:, None], cols[None, :]]
                s = int(np.abs(tgt_i[r0:r1, c0:c1] - pred).sum())
                if best is None or s < best[0]:
                    best = (s, dx, dy)
            sad[br, bc] = best[0]
            mv[br, bc] = (best[1], best[2])
    return mv, sad


def random_video(rng, frames=5, h=16, w=16):
    data = rng.integers(0, 256, size=(frames, h, w, 3), dtype=np.uint8)
    return RawVideo(frames=data, fps=12.0)


def moving_square_video(frames=8, h=24, w=24, step=2):
    """A bright square translating right over a dark background."""
    out = np.full((frames, h, w, 3), 30, dtype=np.uint8)
    for t in range(frames):
        x = 2 + step * t
        out[t, 8:16, x:x + 6] = (200, 160, 90)
    return RawVideo(frames=out, fps=12.0)


def test_match_all_blocks_agrees_with_brute_force():
    rng = np.random.default_rng(0)
    for trial in range(4):
        ref = rng.integers(0, 256, size=(12, 20, 3), dtype=np.uint8)
        target = rng.integers(0, 256, size=(12, 20, 3), dtype=np.uint8)
        mv, sad = match_all_blocks(ref, target, block_size=4, radius=2)
        mv_ref, sad_ref = brute_force_match(ref, target, 4, 2)
        np.testing.assert_array_equal(mv, mv_ref)
        np.testing.assert_array_equal(sad, sad_ref)


def test_match_recovers_a_pure_translation():
    rng = np.random.default_rng(1)
    ref = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
    # target pulls pixels from (r - 3, c - 2) of ref, so (dx, dy) = (2, 3)
    target = ref[np.clip(np.arange(32) - 3, 0, 31)[:, None],
                 np.clip(np.arange(32) - 2, 0, 31)[None, :]]
    mv, sad = match_all_blocks(ref, target, block_size=8, radius=4)
    inner = mv[1:-1, 1:-1]
    assert (inner[..., 0] == 2).all() and (inner[..., 1] == 3).all()
    assert (sad[1:-1, 1:-1] == 0).all()


def test_identical_frames_pick_the_zero_vector():
    rng = np.random.default_rng(2)
    frame = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
    mv, sad = match_all_blocks(frame, frame, block_size=4, radius=3)
    assert (mv == 0).all() and (sad == 0).all()


def test_uniform_frames_tie_break_to_zero():
    ref = np.full((16, 16, 3), 77, dtype=np.uint8)
    mv, _ = match_all_blocks(ref, ref, block_size=8, radius=2)
    assert (mv == 0).all()


def test_motion_field_expand_is_blockwise_constant():
    mv = np.array([[[1, -2], [3, 4]], [[0, 0], [-5, 6]]], dtype=np.int16)
    field = MotionField(block_mv=mv, block_size=4)
    full = field.expand(8, 8)
    assert full.shape == (8, 8, 2)
    for br in range(2):
        for bc in range(2):
            blk = full[br * 4:(br + 1) * 4, bc * 4:(bc + 1) * 4]
            assert (blk == mv[br, bc]).all()


def test_expand_covers_a_partial_edge_block():
    mv = np.zeros((2, 2, 2), dtype=np.int16)
    mv[1, 1] = (7, -7)
    full = MotionField(block_mv=mv, block_size=4).expand(7, 6)
    assert full.shape == (7, 6, 2)
    assert (full[4:, 4:] == (7, -7)).all()


def test_motion_compensate_matches_clamped_indexing():
    rng = np.random.default_rng(3)
    ref = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
    mv = np.full((2, 2, 2), (2, -1), dtype=np.int16)
    pred = motion_compensate(ref, MotionField(block_mv=mv, block_size=4))
    rows = np.clip(np.arange(8) + 1, 0, 7)
    cols = np.clip(np.arange(8) - 2, 0, 7)
    np.testing.assert_array_equal(pred, ref[rows[:, None], cols[None, :]])


def test_encode_decode_roundtrip_random():
    rng = np.random.default_rng(4)
    video = random_video(rng, frames=7, h=16, w=20)
    stream = encode_video(video, block_size=4, gop_size=3, radius=2)
    out = decode_stream(stream)
    np.testing.assert_array_equal(out.frames, video.frames)


def test_encode_decode_roundtrip_structured():
    video = moving_square_video()
    stream = encode_video(video, block_size=8, gop_size=4, radius=3)
    np.testing.assert_array_equal(decode_stream(stream).frames, video.frames)
    # the translation should be captured by motion, not residuals: the
    # square moves 2 px/frame within the search radius
    p = stream.gops[0].p_frames[0]
    assert np.abs(p.motion.block_mv).max() > 0


def test_gop_structure_and_locate():
    rng = np.random.default_rng(5)
    video = random_video(rng, frames=26, h=8, w=8)
    stream = encode_video(video, block_size=4, gop_size=12, radius=1)
    assert [len(g.p_frames) for g in stream.gops] == [11, 11, 1]
    assert stream.locate(0) == (0, 0)
    assert stream.locate(11) == (0, 11)
    assert stream.locate(12) == (1, 0)
    assert stream.locate(25) == (2, 1)
    with pytest.raises(CodecError):
        stream.locate(26)
    with pytest.raises(CodecError):
        stream.locate(-1)


def test_decode_gop_returns_every_frame():
    rng = np.random.default_rng(6)
    video = random_video(rng, frames=5, h=8, w=8)
    stream = encode_video(video, block_size=4, gop_size=5, radius=1)
    frames = decode_gop(stream.gops[0])
    np.testing.assert_array_equal(frames, video.frames)


def test_container_roundtrip_preserves_everything():
    rng = np.random.default_rng(7)
    video = random_video(rng, frames=9, h=12, w=16)
    stream = encode_video(video, block_size=4, gop_size=4, radius=2)
    back = read_cvc1(write_cvc1(stream))
    assert back.header == stream.header
    assert len(back.gops) == len(stream.gops)
    for g0, g1 in zip(stream.gops, back.gops):
        np.testing.assert_array_equal(g0.i_frame, g1.i_frame)
        for p0, p1 in zip(g0.p_frames, g1.p_frames):
            np.testing.assert_array_equal(p0.motion.block_mv, p1.motion.block_mv)
            assert p0.motion.block_size == p1.motion.block_size
            np.testing.assert_array_equal(p0.residual, p1.residual)
    np.testing.assert_array_equal(decode_stream(back).frames, video.frames)


def test_save_load_file_roundtrip(tmp_path):
    rng = np.random.default_rng(8)
    video = random_video(rng, frames=4, h=8, w=8)
    stream = encode_video(video, block_size=4, gop_size=4, radius=1)
    path = tmp_path / "clip.cvc1"
    save_cvc1(path, stream)
    np.testing.assert_array_equal(decode_stream(load_cvc1(path)).frames,
                                  video.frames)


def test_golden_container_bytes():
    """Frozen container bytes for a fixed input; guards the wire format."""
    rng = np.random.default_rng(99)
    video = random_video(rng, frames=3, h=8, w=8)
    blob = write_cvc1(encode_video(video, block_size=4, gop_size=3, radius=1))
    with open("tests/data/golden_8x8.cvc1", "rb") as fh:
        golden = fh.read()
    assert blob == golden
    np.testing.assert_array_equal(decode_stream(read_cvc1(golden)).frames,
                                  video.frames)


def test_truncation_errors_name_the_section():
    rng = np.random.default_rng(9)
    video = random_video(rng, frames=4, h=8, w=8)
    blob = write_cvc1(encode_video(video, block_size=4, gop_size=4, radius=1))

    with pytest.raises(ParseError, match="magic"):
        read_cvc1(blob[:2])
    with pytest.raises(ParseError, match="header"):
        read_cvc1(blob[:6])
    with pytest.raises(ParseError, match="I-frame of GOP 0"):
        read_cvc1(blob[:20])
    # cut inside the first P-frame's motion vectors
    with pytest.raises(ParseError, match="GOP 0 P-frame 0"):
        read_cvc1(blob[:14 + 8 * 8 * 3 + 3])
    with pytest.raises(ParseError, match="trailing"):
        read_cvc1(blob + b"\x00")
    with pytest.raises(ParseError, match="magic"):
        read_cvc1(b"AVI0" + blob[4:])


def test_rawvideo_validation():
    with pytest.raises(CodecError, match="uint8"):
        RawVideo(frames=np.zeros((2, 4, 4, 3), dtype=np.float32))
    with pytest.raises(CodecError, match="shape"):
        RawVideo(frames=np.zeros((2, 4, 4), dtype=np.uint8))
    with pytest.raises(CodecError, match="at least one"):
        RawVideo(frames=np.zeros((0, 4, 4, 3), dtype=np.uint8))


def test_encode_rejects_bad_parameters():
    rng = np.random.default_rng(10)
    video = random_video(rng, frames=2, h=8, w=8)
    with pytest.raises(CodecError, match="smaller than block"):
        encode_video(video, block_size=16)
    with pytest.raises(CodecError, match="gop_size"):
        encode_video(video, block_size=4, gop_size=0)
    with pytest.raises(CodecError, match="radius"):
        encode_video(video, block_size=4, radius=200)


def test_decode_rejects_out_of_range_reconstruction():
    rng = np.random.default_rng(11)
    video = random_video(rng, frames=2, h=8, w=8)
    stream = encode_video(video, block_size=4, gop_size=2, radius=1)
    stream.gops[0].p_frames[0].residual[:] = 30000
    with pytest.raises(CodecError, match="uint8 range"):
        decode_gop(stream.gops[0])


def test_write_rejects_oversized_motion():
    rng = np.random.default_rng(12)
    video = random_video(rng, frames=2, h=8, w=8)
    stream = encode_video(video, block_size=4, gop_size=2, radius=1)
    stream.gops[0].p_frames[0].motion.block_mv[0, 0, 0] = 300
    with pytest.raises(CodecError, match="8-bit"):
        write_cvc1(stream)


@settings(max_examples=25, deadline=None)
@given(
    frames=st.integers(2, 6),
    h=st.integers(4, 14),
    w=st.integers(4, 14),
    gop=st.integers(1, 5),
    seed=st.integers(0, 2**32 - 1),
)
def test_roundtrip_property(frames, h, w, gop, seed):
    rng = np.random.default_rng(seed)
    data = rng.integers(0, 256, size=(frames, h, w, 3), dtype=np.uint8)
    video = RawVideo(frames=data)
    stream = encode_video(video, block_size=4, gop_size=gop, radius=2)
    assert all(np.abs(p.motion.block_mv).max(initial=0) <= 2
               for g in stream.gops for p in g.p_frames)
    np.testing.assert_array_equal(decode_stream(stream).frames, data)
    back = read_cvc1(write_cvc1(stream))
    np.testing.assert_array_equal(decode_stream(back).frames, data)
