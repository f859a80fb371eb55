"""P-frame accumulation by motion-vector back-tracing.

Every pixel of a P-frame is traced back through the chain of block motion
vectors to the GOP's I-frame, giving an accumulated motion field and an
accumulated residual relative to that I-frame. Two implementations are
provided: an explicit right-to-left composition of the per-frame maps
(the oracle) and a single feed-forward pass that maintains running maps
in linear time. Both clamp traced coordinates to the frame rectangle at
every step, the same rule the codec uses, so the reconstruction identity
holds exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import Gop


class AccumulationError(ValueError):
    pass


@dataclass
class AccumulatedPFrames:
    """Accumulated motion (pi) and residual (delta) at timestep t.

    pi[r, c] is the displacement of pixel (r, c) relative to its traced
    position in the reference I-frame (index k); delta is the sum of the
    residuals picked up along the traced path, kept in widened integers.
    """

    pi: np.ndarray  # (H, W, 2) int32, (dx, dy)
    delta: np.ndarray  # (H, W, 3) int32
    t: int
    k: int = 0


def _pixel_motion(gop: Gop, t: int) -> np.ndarray:
    """Per-pixel (H, W, 2) motion of P-frame t (1-based within the GOP)."""
    h, w = gop.i_frame.shape[:2]
    return gop.p_frames[t - 1].motion.expand(h, w).astype(np.int32)


def _trace_step(coords: np.ndarray, mv: np.ndarray, h: int, w: int) -> np.ndarray:
    """One application of mu: coords - mv[coords], clamped to the frame."""
    cur_c = coords[..., 0]
    cur_r = coords[..., 1]
    step = mv[cur_r, cur_c]
    nxt_c = np.clip(cur_c - step[..., 0], 0, w - 1)
    nxt_r = np.clip(cur_r - step[..., 1], 0, h - 1)
    return np.stack([nxt_c, nxt_r], axis=-1)


def _identity_coords(h: int, w: int) -> np.ndarray:
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    return np.stack([cols, rows], axis=-1).astype(np.int32)


def backtrace(gop: Gop, t: int, j: int) -> np.ndarray:
    """Coordinates in frame j reached by tracing each pixel of frame t back.

    (H, W, 2) integer (col, row) pairs, every entry inside the frame.
    """
    h, w = gop.i_frame.shape[:2]
    coords = _identity_coords(h, w)
    for step_t in range(t, j, -1):
        coords = _trace_step(coords, _pixel_motion(gop, step_t), h, w)
    return coords


def accumulate_naive(gop: Gop, t: int) -> AccumulatedPFrames:
    """Accumulate by explicit composition of the per-frame back-trace maps.

    The residual sum gathers delta^(j) at the position traced back from
    frame t to frame j, for j between the I-frame and t-1, plus the
    frame's own residual.
    """
    n_p = len(gop.p_frames)
    if not 1 <= t <= n_p:
        raise AccumulationError(f"t={t} outside [1, {n_p}]")
    h, w = gop.i_frame.shape[:2]
    delta = gop.p_frames[t - 1].residual.astype(np.int32).copy()
    coords = _identity_coords(h, w)
    for j in range(t - 1, -1, -1):
        coords = _trace_step(coords, _pixel_motion(gop, j + 1), h, w)
        if j >= 1:
            delta += gop.p_frames[j - 1].residual.astype(np.int32)[
                coords[..., 1], coords[..., 0]
            ]
    ident = _identity_coords(h, w)
    pi = (ident - coords).astype(np.int32)
    return AccumulatedPFrames(pi=pi, delta=delta, t=t, k=0)


def accumulate_gop(
    gop: Gop, count_reads: bool = False
) -> list[AccumulatedPFrames] | tuple[list[AccumulatedPFrames], int]:
    """Accumulate every timestep of a GOP in one forward pass.

    Maintains running maps: at each t the new motion of a pixel is its own
    per-frame vector plus the running motion gathered at the position the
    vector points to, and likewise for residuals. Cost is O(T * H * W).
    With count_reads=True also returns the number of elementary array
    reads performed (for the linearity check).
    """
    h, w = gop.i_frame.shape[:2]
    out: list[AccumulatedPFrames] = []
    pi = np.zeros((h, w, 2), dtype=np.int32)
    delta = np.zeros((h, w, 3), dtype=np.int32)
    reads = 0
    row_ix = np.arange(h)[:, None]
    col_ix = np.arange(w)[None, :]
    for t in range(1, len(gop.p_frames) + 1):
        tau = _pixel_motion(gop, t)
        res = gop.p_frames[t - 1].residual.astype(np.int32)
        rows = np.clip(row_ix - tau[..., 1], 0, h - 1)
        cols = np.clip(col_ix - tau[..., 0], 0, w - 1)
        # effective one-step displacement: i - clamp(i - tau), which equals
        # tau away from the border and keeps the composed map in-frame
        eff = np.stack([col_ix - cols, row_ix - rows], axis=-1)
        pi = eff + pi[rows, cols]
        delta = res + delta[rows, cols]
        out.append(AccumulatedPFrames(pi=pi.copy(), delta=delta.copy(), t=t, k=0))
        # tau read + 2 gathers (pi, delta) + residual read, per pixel
        reads += 4 * h * w
    if count_reads:
        return out, reads
    return out


def reconstruct_from_accumulated(i_frame: np.ndarray, acc: AccumulatedPFrames) -> np.ndarray:
    """Rebuild frame t directly from the I-frame: I0 at (i - pi) plus delta."""
    h, w = i_frame.shape[:2]
    if acc.pi.shape[:2] != (h, w) or acc.delta.shape[:2] != (h, w):
        raise AccumulationError("accumulated maps do not match the I-frame shape")
    cols = np.arange(w)[None, :] - acc.pi[..., 0]
    rows = np.arange(h)[:, None] - acc.pi[..., 1]
    if rows.min() < 0 or rows.max() >= h or cols.min() < 0 or cols.max() >= w:
        raise AccumulationError("accumulated motion points outside the frame")
    recon = i_frame.astype(np.int32)[rows, cols] + acc.delta
    if recon.min() < 0 or recon.max() > 255:
        raise AccumulationError("reconstruction left the uint8 range")
    return recon.astype(np.uint8)
