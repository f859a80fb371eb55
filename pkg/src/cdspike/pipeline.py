"""Dataset-to-model plumbing: triplet sampling, training, evaluation.

A "triplet" is (I-frame, accumulated motion, accumulated residual) at one
sampled temporal position.  Sampled positions are uniformly spaced over
the whole stream; consecutive triplets are grouped into views of T
segments and a video's class score is the average of its views' logits.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .accumulate import accumulate_gop
from .codec import CompressedStream, RawVideo
from .network import MODALITY_CHANNELS, Model, ModelConfig
from .numerics import (
    Adam,
    SpikeRecord,
    Tensor,
    cross_entropy_logits,
    no_grad,
    save_checkpoint,
)
from .stm import StmRunRecord, spike_stats

I_OFFSET = 127.5          # uint8 intensity -> [-1, 1]
I_SCALE = 127.5
MV_SCALE = 8.0            # accumulated displacement in pixels -> ~[-2, 2]
R_SCALE = 127.5


class PipelineError(ValueError):
    pass


class DivergenceError(PipelineError):
    """Training left float range (NaN/inf loss or parameters)."""


# ---------------------------------------------------------------------------
# Triplet sampling


@dataclass
class Triplet:
    """Model inputs for one sampled temporal position."""

    i_frame: np.ndarray       # (H, W, 3) uint8
    pi: np.ndarray            # (H, W, 2) int32 accumulated motion (dx, dy)
    delta: np.ndarray         # (H, W, 3) int32 accumulated residual
    frame_index: int
    gop_index: int
    offset: int


def sample_positions(n_frames: int, n: int) -> np.ndarray:
    """n uniformly spaced frame indices: floor((j + 0.5) * n_frames / n)."""
    if n < 1 or n_frames < 1:
        raise PipelineError("need n >= 1 positions over >= 1 frames")
    j = np.arange(n, dtype=np.float64)
    return np.minimum(np.floor((j + 0.5) * n_frames / n),
                      n_frames - 1).astype(np.int64)


def _center_crop(arr: np.ndarray, hw: tuple) -> np.ndarray:
    th, tw = hw
    h, w = arr.shape[:2]
    if th > h or tw > w:
        raise PipelineError(f"crop {th}x{tw} larger than frame {h}x{w}")
    r0 = (h - th) // 2
    c0 = (w - tw) // 2
    return arr[r0:r0 + th, c0:c0 + tw]


def sample_triplets(stream: CompressedStream, n: int, out_hw: tuple = None,
                    accumulate: bool = True) -> list:
    """n triplets at uniformly spaced positions, center-cropped to out_hw.

    Motion and residual are accumulated from the governing I-frame up to
    each sampled in-GOP offset; ``accumulate=False`` instead takes the
    single P-frame at the offset (stateless inputs, for ablations).
    Offset 0 (an I-frame position) yields zero motion and residual.
    """
    header = stream.header
    positions = sample_positions(header.frame_count, n)
    hw = out_hw if out_hw is not None else (header.height, header.width)
    acc_cache: dict = {}
    out = []
    for p in positions:
        gi, off = stream.locate(int(p))
        gop = stream.gops[gi]
        h, w = header.height, header.width
        if off == 0:
            pi = np.zeros((h, w, 2), dtype=np.int32)
            delta = np.zeros((h, w, 3), dtype=np.int32)
        elif accumulate:
            if gi not in acc_cache:
                acc_cache[gi] = accumulate_gop(gop)
            acc = acc_cache[gi][off - 1]
            pi, delta = acc.pi, acc.delta
        else:
            pf = gop.p_frames[off - 1]
            pi = pf.motion.expand(h, w).astype(np.int32)
            delta = pf.residual.astype(np.int32)
        out.append(Triplet(i_frame=_center_crop(gop.i_frame, hw),
                           pi=_center_crop(pi, hw),
                           delta=_center_crop(delta, hw),
                           frame_index=int(p), gop_index=gi, offset=off))
    return out


def triplet_arrays(trip: Triplet) -> dict:
    """Normalized CHW float32 arrays for one triplet."""
    i = trip.i_frame.astype(np.float32).transpose(2, 0, 1)
    return {
        "i": (i - I_OFFSET) / I_SCALE,
        "mv": trip.pi.astype(np.float32).transpose(2, 0, 1) / MV_SCALE,
        "r": trip.delta.astype(np.float32).transpose(2, 0, 1) / R_SCALE,
    }


def stream_views(stream: CompressedStream, n: int, t_segments: int,
                 out_hw: tuple = None, accumulate: bool = True) -> dict:
    """Group n sampled triplets into ceil(n/T) views of T segments each.

    Returns modality -> (V, T, C, H, W) float32; a short final view is
    padded by repeating its last segment.
    """
    trips = sample_triplets(stream, n, out_hw, accumulate)
    views = [trips[i:i + t_segments] for i in range(0, len(trips), t_segments)]
    for v in views:
        while len(v) < t_segments:
            v.append(v[-1])
    out = {m: [] for m in MODALITY_CHANNELS}
    for v in views:
        arrs = [triplet_arrays(tr) for tr in v]
        for m in out:
            out[m].append(np.stack([a[m] for a in arrs]))
    return {m: np.stack(v) for m, v in out.items()}


@dataclass
class SegmentSet:
    """Model-ready tensors: modality -> (N, V, T, C, H, W), labels (N,)."""

    x: dict
    y: np.ndarray

    def __post_init__(self):
        n = len(self.y)
        for m, arr in self.x.items():
            if arr.ndim != 6 or arr.shape[0] != n:
                raise PipelineError(f"modality {m}: bad tensor shape {arr.shape}")

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def n_views(self) -> int:
        return next(iter(self.x.values())).shape[1]

    def subset(self, ix) -> "SegmentSet":
        return SegmentSet({m: a[ix] for m, a in self.x.items()}, self.y[ix])


def build_segments(streams: list, labels, n_triplets: int, t_segments: int,
                   out_hw: tuple = None, accumulate: bool = True) -> SegmentSet:
    xs: dict = {m: [] for m in MODALITY_CHANNELS}
    for s in streams:
        v = stream_views(s, n_triplets, t_segments, out_hw, accumulate)
        for m in xs:
            xs[m].append(v[m])
    return SegmentSet({m: np.stack(a) for m, a in xs.items()},
                      np.asarray(labels, dtype=np.int64))


def flip_horizontal(batch: dict, which: np.ndarray) -> dict:
    """Mirror selected samples; motion x-components change sign with the flip."""
    out = {}
    for m, arr in batch.items():
        a = arr.copy()
        a[which] = a[which][..., ::-1]
        if m == "mv":
            a[which, ..., 0, :, :] *= -1.0
        out[m] = a
    return out


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale defaults; larger-run values stay available via config."""

    model: ModelConfig = ModelConfig()
    lr: float = 3e-4
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 40
    batch_size: int = 16
    seed: int = 0
    flip_augment: bool = True
    n_triplets: int = 8
    early_stop_top1: float = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise PipelineError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise PipelineError("lr must be positive")
        if self.n_triplets < 1:
            raise PipelineError("n_triplets must be >= 1")


METRICS_HEADER = ("epoch", "split", "loss", "top1", "top5", "spike_rate")


@dataclass
class TrainResult:
    config: TrainConfig
    best_state: dict
    best_epoch: int
    best_val_top1: float
    metrics: list                      # rows matching METRICS_HEADER
    epochs_run: int

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(METRICS_HEADER)
        for row in self.metrics:
            wr.writerow([row[0], row[1]] + [f"{v:.6f}" for v in row[2:]])
        return buf.getvalue()


def _topk_hits(logits: np.ndarray, labels: np.ndarray, k: int) -> int:
    k = min(k, logits.shape[1])
    part = np.argpartition(-logits, k - 1, axis=1)[:, :k]
    return int(sum(labels[i] in part[i] for i in range(len(labels))))


def _spike_rate(record: StmRunRecord) -> float:
    units = sum(record.layer_unit_steps)
    return sum(record.layer_spikes) / units if units else 0.0


def _nan_diagnostics(model: Model, epoch: int, step: int) -> str:
    worst = []
    for p in model.params():
        if not np.all(np.isfinite(p.data)):
            worst.append(p.name)
    return (f"non-finite loss at epoch {epoch} step {step}; "
            f"non-finite parameters: {worst[:6] or 'none'}")


def train(config: TrainConfig, train_set: SegmentSet, val_set: SegmentSet,
          out_dir=None, progress=None) -> TrainResult:
    """Seeded full-batch-schedule training; retains the best-val state.

    Raises PipelineError with diagnostics if the loss leaves float range.
    ``progress``, when given, is called with each metrics row as it is
    produced.
    """
    if train_set.n == 0 or val_set.n == 0:
        raise PipelineError("train and val sets must be nonempty")
    ss = np.random.SeedSequence([int(config.seed), 0x5EED])
    model_rng, shuffle_rng, aug_rng = (np.random.default_rng(s)
                                       for s in ss.spawn(3))
    model = Model(config.model, model_rng)
    opt = Adam(model.params(), lr=config.lr, betas=config.betas,
               eps=config.adam_eps, weight_decay=config.weight_decay)
    mods = config.model.active_modalities
    labels_all = train_set.y
    metrics: list = []
    best_state: dict = model.state_dict()
    best_top1 = -1.0
    best_epoch = -1
    epochs_run = 0

    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(train_set.n)
        tot_loss = 0.0
        tot_top1 = 0
        tot_top5 = 0
        rec_epoch = StmRunRecord()
        for step, lo in enumerate(range(0, train_set.n, config.batch_size)):
            ix = order[lo:lo + config.batch_size]
            batch = {m: train_set.x[m][ix, 0] for m in mods}
            if config.flip_augment:
                which = aug_rng.random(len(ix)) < 0.5
                batch = flip_horizontal(batch, which)
            yb = labels_all[ix]
            rec = StmRunRecord()
            logits = model.forward(batch, record=rec)
            loss = cross_entropy_logits(logits, yb)
            val = float(loss.data)
            if not math.isfinite(val):
                raise DivergenceError(_nan_diagnostics(model, epoch, step))
            opt.zero_grad()
            loss.backward()
            opt.step()
            rec_epoch.merge(rec)
            tot_loss += val * len(ix)
            tot_top1 += _topk_hits(logits.data, yb, 1)
            tot_top5 += _topk_hits(logits.data, yb, 5)
        n = train_set.n
        row = (epoch, "train", tot_loss / n, 100.0 * tot_top1 / n,
               100.0 * tot_top5 / n, _spike_rate(rec_epoch))
        metrics.append(row)
        if progress:
            progress(row)

        rep = evaluate(model, val_set, batch_size=config.batch_size)
        vrow = (epoch, "val", rep.loss, rep.top1, rep.top5, rep.spike_rate)
        metrics.append(vrow)
        if progress:
            progress(vrow)
        epochs_run = epoch + 1
        if rep.top1 > best_top1:
            best_top1 = rep.top1
            best_epoch = epoch
            best_state = model.state_dict()
        if config.early_stop_top1 is not None and rep.top1 >= config.early_stop_top1:
            break

    result = TrainResult(config=config, best_state=best_state,
                         best_epoch=best_epoch, best_val_top1=best_top1,
                         metrics=metrics, epochs_run=epochs_run)
    if out_dir is not None:
        import os
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(os.path.join(out_dir, "best.ckpt"), best_state)
        with open(os.path.join(out_dir, "metrics.csv"), "w") as f:
            f.write(result.metrics_csv())
    return result


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class EvalReport:
    top1: float
    top5: float
    loss: float
    confusion: np.ndarray      # (C, C) true x predicted counts
    spike_rate: float
    spike_record: StmRunRecord
    n_videos: int
    cost: object = None        # CostReport, attached by callers that price runs

    def __post_init__(self):
        if not (0.0 <= self.top1 <= 100.0 and 0.0 <= self.top5 <= 100.0):
            raise PipelineError("accuracies must lie in [0, 100]")


def evaluate(model: Model, data: SegmentSet, batch_size: int = 16) -> EvalReport:
    """Average each video's view logits before classification."""
    mods = model.config.active_modalities
    classes = model.config.classes
    confusion = np.zeros((classes, classes), dtype=np.int64)
    rec = StmRunRecord()
    tot_loss = 0.0
    tot_top1 = 0
    tot_top5 = 0
    n_views = data.n_views
    with no_grad():
        for lo in range(0, data.n, batch_size):
            ix = np.arange(lo, min(lo + batch_size, data.n))
            yb = data.y[ix]
            view_logits = []
            for v in range(n_views):
                batch = {m: data.x[m][ix, v] for m in mods}
                view_logits.append(model.forward(batch, record=rec).data)
            avg = np.mean(view_logits, axis=0)
            loss = cross_entropy_logits(Tensor(avg), yb)
            tot_loss += float(loss.data) * len(ix)
            tot_top1 += _topk_hits(avg, yb, 1)
            tot_top5 += _topk_hits(avg, yb, 5)
            pred = np.argmax(avg, axis=1)
            np.add.at(confusion, (yb, pred), 1)
    n = data.n
    return EvalReport(top1=100.0 * tot_top1 / n, top5=100.0 * tot_top5 / n,
                      loss=tot_loss / n, confusion=confusion,
                      spike_rate=_spike_rate(rec), spike_record=rec,
                      n_videos=n)


# ---------------------------------------------------------------------------
# Ablation harness


ABLATE_HEADER = ("variant", "val_top1", "val_top5", "params", "epochs_run")


def ablate(base: TrainConfig, variants: dict, train_acc: SegmentSet,
           val_acc: SegmentSet, train_raw: SegmentSet = None,
           val_raw: SegmentSet = None, out_dir=None, progress=None) -> list:
    """Train each variant with the base seed and data; returns result rows.

    ``variants`` maps name -> ModelConfig.  Variants with
    use_accumulation=False train on the stateless (per-frame) tensors,
    which must then be supplied.
    """
    import dataclasses
    rows = []
    results = {}
    for name, mcfg in variants.items():
        if mcfg.use_accumulation:
            tr, va = train_acc, val_acc
        else:
            if train_raw is None or val_raw is None:
                raise PipelineError(f"variant {name!r} disables accumulation "
                                    "but no stateless tensors were given")
            tr, va = train_raw, val_raw
        cfg = dataclasses.replace(base, model=mcfg)
        res = train(cfg, tr, va, progress=progress)
        model = Model(mcfg, np.random.default_rng(0))
        model.load_state_dict(res.best_state)
        best_top5 = next(r[4] for r in res.metrics
                         if r[1] == "val" and r[0] == res.best_epoch)
        rows.append((name, res.best_val_top1, best_top5,
                     model.param_count(), res.epochs_run))
        results[name] = res
    if out_dir is not None:
        import os
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "ablation.csv"), "w") as f:
            f.write(ablation_csv(rows))
    return rows, results


def ablation_csv(rows: list) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(ABLATE_HEADER)
    for name, top1, top5, params, epochs in rows:
        wr.writerow([name, f"{top1:.4f}", f"{top5:.4f}", params, epochs])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Embedding export


def _views_from_arrays(per_step: list, t_segments: int) -> list:
    views = [per_step[i:i + t_segments]
             for i in range(0, len(per_step), t_segments)]
    for v in views:
        while len(v) < t_segments:
            v.append(v[-1])
    return views


def embedding_trajectories(model: Model, video: RawVideo,
                           stream: CompressedStream, n: int = 8) -> tuple:
    """(rgb, cd) per-timestep pooled features, each (n, features).

    RGB: raw frames at the sampled positions through the I pathway (P
    inputs zeroed).  CD: the standard triplets; P-branch pooled features
    concatenated.
    """
    cfg = model.config
    t_seg = cfg.segments
    h, w = cfg.input_hw
    positions = sample_positions(video.frames.shape[0], n)
    raw = [(_center_crop(video.frames[p], (h, w)).astype(np.float32)
            .transpose(2, 0, 1) - I_OFFSET) / I_SCALE for p in positions]
    trips = [triplet_arrays(t) for t in sample_triplets(stream, n, (h, w))]

    def run(views_i, views_mv, views_r, keys):
        feats = []
        for vi, vm, vr in zip(views_i, views_mv, views_r):
            batch = {"i": np.stack(vi)[None], "mv": np.stack(vm)[None],
                     "r": np.stack(vr)[None]}
            batch = {m: batch[m] for m in cfg.active_modalities}
            cap: dict = {}
            with no_grad():
                model.forward(batch, capture=cap)
            pooled = cap["segment_pooled"]
            feats.append(np.concatenate([pooled[k][0] for k in keys], axis=-1))
        return np.concatenate(feats, axis=0)[:n]

    zeros_mv = [np.zeros((2, h, w), dtype=np.float32) for _ in positions]
    zeros_r = [np.zeros((3, h, w), dtype=np.float32) for _ in positions]
    rgb = run(_views_from_arrays(raw, t_seg),
              _views_from_arrays(zeros_mv, t_seg),
              _views_from_arrays(zeros_r, t_seg), keys=["i"])
    p_keys = [m for m in ("mv", "r") if m in cfg.active_modalities] or ["i"]
    cd = run(_views_from_arrays([t["i"] for t in trips], t_seg),
             _views_from_arrays([t["mv"] for t in trips], t_seg),
             _views_from_arrays([t["r"] for t in trips], t_seg), keys=p_keys)
    return rgb, cd


def trajectory_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean L2 distance between unit-normalized aligned timesteps."""
    if a.shape[0] != b.shape[0]:
        raise PipelineError("trajectories must have the same length")

    def unit(x):
        n = np.linalg.norm(x, axis=-1, keepdims=True)
        return x / np.maximum(n, 1e-12)

    return float(np.linalg.norm(unit(a) - unit(b), axis=-1).mean())


def export_embeddings(model: Model, videos: list, streams: list, out_dir,
                      n: int = 8) -> dict:
    """Array dumps per video plus a CSV manifest, one row per timestep."""
    import os
    from .arrayio import write_array
    if len(videos) < 2:
        raise PipelineError("need at least 2 videos to compare trajectories")
    if len(videos) != len(streams):
        raise PipelineError("videos and streams must pair up")
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    files = []
    for vi, (video, stream) in enumerate(zip(videos, streams)):
        rgb, cd = embedding_trajectories(model, video, stream, n)
        rgb_path = os.path.join(out_dir, f"vid{vi:04d}_rgb.arr1")
        cd_path = os.path.join(out_dir, f"vid{vi:04d}_cd.arr1")
        write_array(rgb_path, rgb.astype(np.float32))
        write_array(cd_path, cd.astype(np.float32))
        files.append((rgb_path, cd_path))
        positions = sample_positions(video.frames.shape[0], n)
        for t in range(n):
            rows.append((vi, t, int(positions[t]),
                         os.path.basename(rgb_path), os.path.basename(cd_path)))
    manifest = os.path.join(out_dir, "manifest.csv")
    with open(manifest, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(("video", "timestep", "frame_index", "rgb_file", "cd_file"))
        wr.writerows(rows)
    return {"manifest": manifest, "rows": len(rows), "files": files}
