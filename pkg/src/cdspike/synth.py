"""Synthetic motion-defined video generator.

Five classes that differ only in how a single soft object moves; its
color, size, the background gradient, and the background texture are
drawn from a random stream independent of the label, so appearance
carries no class information.  Backgrounds are static (no per-frame
sensor noise), which keeps block matching exact off the object and
makes the P-frame signal sparse the way real codecs produce it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codec import RawVideo

MOTION_CLASSES = ("translate_right", "oscillate_vertical", "orbit",
                  "expand_contract", "rotate")


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    """Shape of the generated dataset; classes are motion programs."""

    classes: tuple = MOTION_CLASSES
    videos_per_class: int = 200
    height: int = 32
    width: int = 32
    frames: int = 24
    fps: float = 12.0
    val_fraction: float = 0.2

    def __post_init__(self):
        if not self.classes:
            raise SynthError("need at least one motion class")
        unknown = [c for c in self.classes if c not in MOTION_CLASSES]
        if unknown:
            raise SynthError(f"unknown motion classes {unknown}; "
                             f"choose from {MOTION_CLASSES}")
        if self.height < 16 or self.width < 16:
            raise SynthError("frames must be at least 16x16")
        if self.frames < 2 or self.videos_per_class < 1:
            raise SynthError("need >= 2 frames and >= 1 video per class")
        if not 0.0 < self.val_fraction < 1.0:
            raise SynthError("val_fraction must lie in (0, 1)")
        for name in self.classes:
            need_h, need_w = _min_frame_size(name, self.frames)
            if self.height <= need_h or self.width <= need_w:
                raise SynthError(
                    f"{name!r} needs frames larger than {need_h}x{need_w} "
                    f"at {self.frames} frames; got {self.height}x{self.width}")


@dataclass
class LabeledVideo:
    video: RawVideo
    label: int
    class_name: str
    mask: np.ndarray          # (frames, H, W) float32 object coverage in [0,1]
    appearance: dict          # label-independent draw, kept for leakage tests
    motion: dict


@dataclass
class SynthDataset:
    spec: SynthSpec
    videos: list
    train_ix: np.ndarray
    val_ix: np.ndarray

    def labels(self) -> np.ndarray:
        return np.array([v.label for v in self.videos], dtype=np.int64)


def _draw_appearance(rng: np.random.Generator, h: int, w: int) -> dict:
    """Object and background parameters; distribution identical for all classes."""
    color = rng.uniform(120.0, 255.0, size=3)
    bg_level = rng.uniform(20.0, 100.0, size=3)
    angle = rng.uniform(0.0, 2 * np.pi)
    grad_amp = rng.uniform(0.0, 30.0)
    noise_amp = rng.uniform(0.0, 12.0)
    noise_seed = int(rng.integers(0, 2 ** 31))
    sigma = rng.uniform(2.6, 3.4)
    return {"color": color, "bg_level": bg_level, "grad_angle": angle,
            "grad_amp": grad_amp, "noise_amp": noise_amp,
            "noise_seed": noise_seed, "sigma": sigma}


def _render_background(app: dict, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ramp = (np.cos(app["grad_angle"]) * xx / w
            + np.sin(app["grad_angle"]) * yy / h)
    ramp -= ramp.mean()
    nrng = np.random.default_rng(app["noise_seed"])
    coarse = nrng.uniform(-1.0, 1.0, size=(h // 4 + 2, w // 4 + 2))
    ys = np.linspace(0, coarse.shape[0] - 1.001, h)
    xs = np.linspace(0, coarse.shape[1] - 1.001, w)
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    tex = (coarse[y0][:, x0] * (1 - fy) * (1 - fx)
           + coarse[y0 + 1][:, x0] * fy * (1 - fx)
           + coarse[y0][:, x0 + 1] * (1 - fy) * fx
           + coarse[y0 + 1][:, x0 + 1] * fy * fx)
    mono = app["grad_amp"] * ramp + app["noise_amp"] * tex
    return np.clip(app["bg_level"][None, None, :] + mono[:, :, None],
                   0.0, 255.0)


def _blob_mask(h: int, w: int, cx: float, cy: float, sigma: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    d2 = (xx - cx) ** 2 + (yy - cy) ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma))


def _min_frame_size(class_name: str, frames: int) -> tuple:
    """Strict lower bounds (h, w) so _draw_motion's uniform ranges are nonempty."""
    if class_name == "translate_right":
        return 16.0, 10.0 + 0.9 * (frames - 1)
    if class_name == "oscillate_vertical":
        return 20.0, 16.0
    if class_name == "expand_contract":
        return 18.0, 18.0
    return 22.0, 22.0  # orbit / rotate, radius or arm up to 6


def _draw_motion(rng: np.random.Generator, class_name: str, spec: SynthSpec) -> dict:
    h, w, n = spec.height, spec.width, spec.frames
    m: dict = {"kind": class_name}
    if class_name == "translate_right":
        m["vx"] = rng.uniform(0.75, 0.9)
        m["x0"] = rng.uniform(4.5, w - 5.5 - m["vx"] * (n - 1))
        m["y0"] = rng.uniform(8.0, h - 8.0)
    elif class_name == "oscillate_vertical":
        m["amp"] = rng.uniform(3.5, 5.0)
        m["period"] = rng.uniform(12.0, 16.0)
        m["phase"] = rng.uniform(0.0, 2 * np.pi)
        m["x0"] = rng.uniform(8.0, w - 8.0)
        m["y0"] = rng.uniform(m["amp"] + 5.0, h - m["amp"] - 5.0)
    elif class_name == "orbit":
        m["radius"] = rng.uniform(4.0, 6.0)
        m["period"] = rng.uniform(16.0, 24.0)
        m["phase"] = rng.uniform(0.0, 2 * np.pi)
        m["x0"] = rng.uniform(m["radius"] + 5.0, w - m["radius"] - 5.0)
        m["y0"] = rng.uniform(m["radius"] + 5.0, h - m["radius"] - 5.0)
    elif class_name == "expand_contract":
        m["rel_amp"] = rng.uniform(0.45, 0.65)
        m["period"] = rng.uniform(12.0, 16.0)
        m["x0"] = rng.uniform(9.0, w - 9.0)
        m["y0"] = rng.uniform(9.0, h - 9.0)
    elif class_name == "rotate":
        m["arm"] = rng.uniform(4.0, 6.0)
        m["period"] = rng.uniform(16.0, 24.0)
        m["phase"] = rng.uniform(0.0, 2 * np.pi)
        m["x0"] = rng.uniform(m["arm"] + 5.0, w - m["arm"] - 5.0)
        m["y0"] = rng.uniform(m["arm"] + 5.0, h - m["arm"] - 5.0)
    else:
        raise SynthError(f"unknown motion class {class_name!r}")
    return m


def _object_mask_at(motion: dict, app: dict, t: int, h: int, w: int) -> np.ndarray:
    kind = motion["kind"]
    sigma = app["sigma"]
    if kind == "translate_right":
        cx = motion["x0"] + motion["vx"] * t
        return _blob_mask(h, w, cx, motion["y0"], sigma)
    if kind == "oscillate_vertical":
        cy = motion["y0"] + motion["amp"] * np.sin(
            2 * np.pi * t / motion["period"] + motion["phase"])
        return _blob_mask(h, w, motion["x0"], cy, sigma)
    if kind == "orbit":
        theta = 2 * np.pi * t / motion["period"] + motion["phase"]
        cx = motion["x0"] + motion["radius"] * np.cos(theta)
        cy = motion["y0"] + motion["radius"] * np.sin(theta)
        return _blob_mask(h, w, cx, cy, sigma)
    if kind == "expand_contract":
        s = sigma * (1.0 + motion["rel_amp"]
                     * np.sin(2 * np.pi * t / motion["period"]))
        return _blob_mask(h, w, motion["x0"], motion["y0"], s)
    if kind == "rotate":
        theta = 2 * np.pi * t / motion["period"] + motion["phase"]
        dx = motion["arm"] * np.cos(theta)
        dy = motion["arm"] * np.sin(theta)
        lobe_sigma = sigma * 0.8
        a = _blob_mask(h, w, motion["x0"] + dx, motion["y0"] + dy, lobe_sigma)
        b = _blob_mask(h, w, motion["x0"] - dx, motion["y0"] - dy, lobe_sigma)
        return np.maximum(a, b)
    raise SynthError(f"unknown motion class {kind!r}")


def render_video(motion: dict, app: dict, spec: SynthSpec) -> tuple:
    """Composite the moving object over a static background.

    Returns (RawVideo, (frames, H, W) float32 coverage masks).
    """
    h, w, n = spec.height, spec.width, spec.frames
    bg = _render_background(app, h, w)
    frames = np.empty((n, h, w, 3), dtype=np.uint8)
    masks = np.empty((n, h, w), dtype=np.float32)
    color = app["color"][None, None, :]
    for t in range(n):
        m = _object_mask_at(motion, app, t, h, w)
        img = bg * (1.0 - m[:, :, None]) + color * m[:, :, None]
        frames[t] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        masks[t] = m.astype(np.float32)
    return RawVideo(frames=frames, fps=spec.fps), masks


def make_video(spec: SynthSpec, class_ix: int, seed: int, index: int) -> LabeledVideo:
    """One deterministic labeled video; streams keyed by (seed, index)."""
    ss = np.random.SeedSequence([int(seed), int(index)])
    motion_rng, app_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    name = spec.classes[class_ix]
    app = _draw_appearance(app_rng, spec.height, spec.width)
    motion = _draw_motion(motion_rng, name, spec)
    video, masks = render_video(motion, app, spec)
    return LabeledVideo(video=video, label=class_ix, class_name=name,
                        mask=masks, appearance=app, motion=motion)


def split_indices(spec: SynthSpec, seed: int) -> tuple:
    """Stratified (train_ix, val_ix) over the canonical video ordering."""
    split_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1 << 40]))
    train_ix, val_ix = [], []
    per = spec.videos_per_class
    n_val = max(1, int(round(per * spec.val_fraction)))
    for class_ix in range(len(spec.classes)):
        base = class_ix * per
        order = split_rng.permutation(per) + base
        val_ix.extend(order[:n_val])
        train_ix.extend(order[n_val:])
    return (np.sort(np.array(train_ix, dtype=np.int64)),
            np.sort(np.array(val_ix, dtype=np.int64)))


def synth_dataset(spec: SynthSpec, seed: int) -> SynthDataset:
    """Deterministic dataset with a stratified train/val split.

    The appearance stream is keyed only by (seed, video index), never by
    the label, so appearance statistics match across classes.
    """
    videos = []
    idx = 0
    for class_ix in range(len(spec.classes)):
        for _ in range(spec.videos_per_class):
            videos.append(make_video(spec, class_ix, seed, idx))
            idx += 1
    train_ix, val_ix = split_indices(spec, seed)
    return SynthDataset(spec=spec, videos=videos, train_ix=train_ix,
                        val_ix=val_ix)


def appearance_matrix(videos: list) -> np.ndarray:
    """(N, 9) appearance parameters for label-independence checks."""
    rows = []
    for v in videos:
        a = v.appearance
        rows.append(np.concatenate([
            a["color"], a["bg_level"],
            [a["grad_amp"], a["noise_amp"], a["sigma"]],
        ]))
    return np.asarray(rows, dtype=np.float64)


def make_oscillation_pair(spec: SynthSpec, seed: int, mirrored: bool = True,
                          vary_appearance: bool = False) -> tuple:
    """Controlled oscillation pair for motion-analysis checks.

    ``mirrored`` flips the phase by pi (same appearance) so vertical
    displacement is equal and opposite frame by frame; ``vary_appearance``
    redraws color/background (same motion) instead.
    """
    if "oscillate_vertical" not in spec.classes:
        raise SynthError("spec must include the oscillate_vertical class")
    class_ix = spec.classes.index("oscillate_vertical")
    ss = np.random.SeedSequence([int(seed), 9000])
    app_a_rng, app_b_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    app_a = _draw_appearance(app_a_rng, spec.height, spec.width)
    app_b = _draw_appearance(app_b_rng, spec.height, spec.width) \
        if vary_appearance else dict(app_a)
    motion_a = {"kind": "oscillate_vertical", "amp": 4.5, "period": 16.0,
                "phase": 0.0, "x0": spec.width / 2.0, "y0": spec.height / 2.0}
    motion_b = dict(motion_a)
    if mirrored:
        motion_b["phase"] = np.pi
    vid_a, mask_a = render_video(motion_a, app_a, spec)
    vid_b, mask_b = render_video(motion_b, app_b, spec)
    a = LabeledVideo(vid_a, class_ix, "oscillate_vertical", mask_a, app_a,
                     motion_a)
    b = LabeledVideo(vid_b, class_ix, "oscillate_vertical", mask_b, app_b,
                     motion_b)
    return a, b


def make_static_video(spec: SynthSpec, seed: int) -> LabeledVideo:
    """A video with no motion at all (for constant-trajectory checks)."""
    ss = np.random.SeedSequence([int(seed), 9100])
    app = _draw_appearance(np.random.default_rng(ss.spawn(1)[0]),
                           spec.height, spec.width)
    motion = {"kind": "oscillate_vertical", "amp": 0.0, "period": 16.0,
              "phase": 0.0, "x0": spec.width / 2.0, "y0": spec.height / 2.0}
    video, masks = render_video(motion, app, spec)
    return LabeledVideo(video, -1, "static", masks, app, motion)
