"""Lossless toy block-matching video codec.

Frames are grouped into GOPs of one intra frame followed by predicted
frames. Each P-frame stores one integer motion vector per block (found by
exhaustive SAD search against the previous reconstructed frame) plus the
full-resolution signed residual, so decoding reproduces the input
byte-for-byte. The wire format is the "CVC1" container.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

DEFAULT_BLOCK_SIZE = 16
DEFAULT_GOP_SIZE = 12
DEFAULT_SEARCH_RADIUS = 7

MAGIC = b"CVC1"


class CodecError(ValueError):
    """Invalid input handed to the encoder or decoder."""


class ParseError(CodecError):
    """Malformed CVC1 byte stream; the message names the missing section."""


@dataclass
class RawVideo:
    """A stack of H x W x 3 uint8 frames plus a nominal frame rate."""

    frames: np.ndarray
    fps: float = 30.0

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 4 or f.shape[3] != 3:
            raise CodecError(f"expected (F,H,W,3) frames, got shape {f.shape}")
        if f.dtype != np.uint8:
            raise CodecError(f"frames must be uint8, got {f.dtype}")
        if f.shape[0] < 1:
            raise CodecError("need at least one frame")
        self.frames = f

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]


@dataclass
class MotionField:
    """Per-block integer displacements (dx, dy), one pair per macroblock.

    A vector (dx, dy) means the block's pixels came from the location
    (x - dx, y - dy) in the reference frame.
    """

    block_mv: np.ndarray  # (bh, bw, 2) int16
    block_size: int

    def expand(self, height: int, width: int) -> np.ndarray:
        """Per-pixel (H, W, 2) field; constant within each block."""
        b = self.block_size
        rows = np.minimum(np.arange(height) // b, self.block_mv.shape[0] - 1)
        cols = np.minimum(np.arange(width) // b, self.block_mv.shape[1] - 1)
        return self.block_mv[rows[:, None], cols[None, :]]


@dataclass
class PFrame:
    motion: MotionField
    residual: np.ndarray  # (H, W, 3) int16


@dataclass
class Gop:
    i_frame: np.ndarray  # (H, W, 3) uint8
    p_frames: list[PFrame] = field(default_factory=list)


@dataclass
class StreamHeader:
    height: int
    width: int
    block_size: int
    gop_size: int
    frame_count: int


@dataclass
class CompressedStream:
    header: StreamHeader
    gops: list[Gop]

    def locate(self, frame_index: int) -> tuple[int, int]:
        """Map a global frame index to (gop index, in-GOP offset)."""
        if not 0 <= frame_index < self.header.frame_count:
            raise CodecError(f"frame {frame_index} out of range")
        g = self.header.gop_size
        return frame_index // g, frame_index % g


def _block_grid(height: int, width: int, block_size: int) -> tuple[int, int]:
    return -(-height // block_size), -(-width // block_size)


def _candidate_order(radius: int) -> np.ndarray:
    """All displacements within the search window, zero vector first.

    Ordered by |dx|+|dy|, then dy, then dx; argmin over SADs in this order
    implements the deterministic tie-break.
    """
    cands = [
        (dx, dy)
        for dy in range(-radius, radius + 1)
        for dx in range(-radius, radius + 1)
    ]
    cands.sort(key=lambda c: (abs(c[0]) + abs(c[1]), c[1], c[0]))
    return np.asarray(cands, dtype=np.int64)


def _shift_clamped(frame: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """frame sampled at (r - dy, c - dx), coordinates clamped to the frame."""
    h, w = frame.shape[:2]
    rows = np.clip(np.arange(h) - dy, 0, h - 1)
    cols = np.clip(np.arange(w) - dx, 0, w - 1)
    return frame[rows[:, None], cols[None, :]]


def _block_sums(values: np.ndarray, block_size: int) -> np.ndarray:
    """Sum an (H, W) map over the (possibly clipped) block grid."""
    h, w = values.shape
    r_idx = np.arange(0, h, block_size)
    c_idx = np.arange(0, w, block_size)
    part = np.add.reduceat(values, r_idx, axis=0)
    return np.add.reduceat(part, c_idx, axis=1)


def match_all_blocks(
    ref: np.ndarray, target: np.ndarray, block_size: int, radius: int
) -> tuple[np.ndarray, np.ndarray]:
    """Exhaustive SAD search for every block at once.

    Returns (block_mv (bh,bw,2) int16, best SAD (bh,bw) int64).
    """
    if radius < 0:
        raise CodecError("radius must be >= 0")
    cands = _candidate_order(radius)
    ref_i = ref.astype(np.int32)
    tgt_i = target.astype(np.int32)
    bh, bw = _block_grid(ref.shape[0], ref.shape[1], block_size)
    sads = np.empty((len(cands), bh, bw), dtype=np.int64)
    for ci, (dx, dy) in enumerate(cands):
        diff = np.abs(tgt_i - _shift_clamped(ref_i, int(dx), int(dy))).sum(axis=2)
        sads[ci] = _block_sums(diff, block_size)
    best = sads.argmin(axis=0)  # first minimum wins -> tie-break by order
    mv = cands[best].astype(np.int16)
    best_sad = np.take_along_axis(sads, best[None], axis=0)[0]
    return mv, best_sad


def block_match(
    ref: np.ndarray,
    target: np.ndarray,
    block_row: int,
    block_col: int,
    block_size: int,
    radius: int,
) -> tuple[int, int]:
    """Best (dx, dy) for one block of `target` against `ref`.

    The block starting at (block_row, block_col) must lie inside the frame;
    clipped edge blocks are allowed. Reads outside the reference are
    clamped to the frame rectangle.
    """
    h, w = ref.shape[:2]
    if not (0 <= block_row < h and 0 <= block_col < w):
        raise CodecError("block position outside frame")
    mv, _ = match_all_blocks(ref, target, block_size, radius)
    return tuple(int(v) for v in mv[block_row // block_size, block_col // block_size])


def motion_compensate(ref: np.ndarray, motion: MotionField) -> np.ndarray:
    """Predict a frame by sampling `ref` at clamped, block-displaced positions."""
    h, w = ref.shape[:2]
    mv = motion.expand(h, w)
    rows = np.clip(np.arange(h)[:, None] - mv[..., 1], 0, h - 1)
    cols = np.clip(np.arange(w)[None, :] - mv[..., 0], 0, w - 1)
    return ref[rows, cols]


def encode_video(
    video: RawVideo,
    block_size: int = DEFAULT_BLOCK_SIZE,
    gop_size: int = DEFAULT_GOP_SIZE,
    radius: int = DEFAULT_SEARCH_RADIUS,
) -> CompressedStream:
    """Encode into GOPs of one I-frame plus motion/residual P-frames.

    Motion is estimated against the previous *reconstructed* frame (equal
    to the previous raw frame here, since the codec is lossless).
    """
    frames = video.frames
    h, w = video.height, video.width
    if min(h, w) < block_size:
        raise CodecError(f"frame {h}x{w} smaller than block size {block_size}")
    if gop_size < 1:
        raise CodecError("gop_size must be >= 1")
    if radius > 127:
        raise CodecError("radius must fit in signed 8-bit motion vectors")
    gops: list[Gop] = []
    recon_prev: np.ndarray | None = None
    for t in range(video.frame_count):
        target = frames[t]
        if t % gop_size == 0:
            gops.append(Gop(i_frame=target.copy()))
            recon_prev = target
            continue
        mv, _ = match_all_blocks(recon_prev, target, block_size, radius)
        motion = MotionField(block_mv=mv, block_size=block_size)
        pred = motion_compensate(recon_prev, motion)
        residual = target.astype(np.int16) - pred.astype(np.int16)
        gops[-1].p_frames.append(PFrame(motion=motion, residual=residual))
        recon_prev = (pred.astype(np.int16) + residual).astype(np.uint8)
    header = StreamHeader(h, w, block_size, gop_size, video.frame_count)
    return CompressedStream(header=header, gops=gops)


def decode_gop(gop: Gop) -> np.ndarray:
    """All frames of one GOP via the frame-to-frame reconstruction recurrence."""
    frames = [gop.i_frame]
    prev = gop.i_frame
    for p in gop.p_frames:
        pred = motion_compensate(prev, p.motion).astype(np.int32)
        recon = pred + p.residual
        if recon.min() < 0 or recon.max() > 255:
            raise CodecError("reconstruction left the uint8 range; stream not well formed")
        prev = recon.astype(np.uint8)
        frames.append(prev)
    return np.stack(frames)


def decode_stream(stream: CompressedStream) -> RawVideo:
    chunks = [decode_gop(g) for g in stream.gops]
    frames = np.concatenate(chunks, axis=0)
    if frames.shape[0] != stream.header.frame_count:
        raise CodecError(
            f"stream holds {frames.shape[0]} frames, header says {stream.header.frame_count}"
        )
    return RawVideo(frames=frames)


# ---------------------------------------------------------------------------
# CVC1 container


def write_cvc1(stream: CompressedStream) -> bytes:
    hd = stream.header
    bh, bw = _block_grid(hd.height, hd.width, hd.block_size)
    out = [
        MAGIC,
        struct.pack(
            "<HHBBI", hd.height, hd.width, hd.block_size, hd.gop_size, hd.frame_count
        ),
    ]
    for gop in stream.gops:
        out.append(np.ascontiguousarray(gop.i_frame).tobytes())
        for p in gop.p_frames:
            mv = p.motion.block_mv
            if np.abs(mv).max(initial=0) > 127:
                raise CodecError("motion vector exceeds signed 8-bit range")
            if mv.shape != (bh, bw, 2):
                raise CodecError("motion field shape does not match header")
            out.append(mv.astype("<i1").tobytes())
            out.append(p.residual.astype("<i2").tobytes())
    return b"".join(out)


def save_cvc1(path, stream: CompressedStream) -> None:
    with open(path, "wb") as fh:
        fh.write(write_cvc1(stream))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, section: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise ParseError(
                f"truncated stream in {section}: need {n} bytes at offset "
                f"{self.pos}, have {len(self.blob) - self.pos}"
            )
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk


def read_cvc1(blob: bytes) -> CompressedStream:
    rd = _Reader(blob)
    if rd.take(4, "magic") != MAGIC:
        raise ParseError("bad magic: not a CVC1 stream")
    h, w, bsz, gsz, fcount = struct.unpack("<HHBBI", rd.take(10, "header"))
    if bsz == 0 or gsz == 0 or fcount == 0:
        raise ParseError("header fields must be nonzero")
    header = StreamHeader(h, w, bsz, gsz, fcount)
    bh, bw = _block_grid(h, w, bsz)
    gops: list[Gop] = []
    remaining = fcount
    gi = 0
    while remaining > 0:
        i_raw = rd.take(h * w * 3, f"I-frame of GOP {gi}")
        i_frame = np.frombuffer(i_raw, dtype=np.uint8).reshape(h, w, 3).copy()
        gop = Gop(i_frame=i_frame)
        n_p = min(gsz - 1, remaining - 1)
        for pi in range(n_p):
            mv_raw = rd.take(bh * bw * 2, f"motion vectors of GOP {gi} P-frame {pi}")
            mv = (
                np.frombuffer(mv_raw, dtype="<i1")
                .reshape(bh, bw, 2)
                .astype(np.int16)
            )
            res_raw = rd.take(h * w * 3 * 2, f"residual of GOP {gi} P-frame {pi}")
            residual = (
                np.frombuffer(res_raw, dtype="<i2").reshape(h, w, 3).astype(np.int16)
            )
            gop.p_frames.append(
                PFrame(motion=MotionField(block_mv=mv, block_size=bsz), residual=residual)
            )
        gops.append(gop)
        remaining -= 1 + n_p
        gi += 1
    if rd.pos != len(blob):
        raise ParseError(f"{len(blob) - rd.pos} trailing bytes after last GOP")
    return CompressedStream(header=header, gops=gops)


def load_cvc1(path) -> CompressedStream:
    with open(path, "rb") as fh:
        return read_cvc1(fh.read())
