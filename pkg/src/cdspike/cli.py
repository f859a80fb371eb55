"""Command-line entry point wiring generation, codec, training, and costing.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure,
5 selftest failure.  Every subcommand writes a manifest recording its
inputs, seed, and a sha256 per output file; reruns with identical inputs
and seed produce identical output hashes.  Input files are never
modified.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from .accumulate import accumulate_gop
from .arrayio import (
    ArrayFormatError,
    motion_to_rgb,
    residual_to_rgb,
    write_array,
    write_ppm,
)
from .codec import CodecError, decode_gop, encode_video, load_cvc1, save_cvc1
from .config import ConfigError, RunConfig, default_config, load_config
from .costmodel import (
    CSV_HEADER,
    CostModelError,
    CostReport,
    benchmark_speed,
    count_flops,
    estimate_energy,
    reproduce_table1,
    table1_text,
)
from .network import Model, ModelConfig, NetworkError
from .numerics import CheckpointError, NumericsError, load_checkpoint, no_grad
from .pipeline import (
    DivergenceError,
    PipelineError,
    SegmentSet,
    ablate,
    ablation_csv,
    build_segments,
    evaluate,
    export_embeddings,
    train,
)
from .stm import StmError, StmRunRecord
from .synth import SynthError, make_video, split_indices

OUT_ENV = "CDSPIKE_OUT"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_SELFTEST = 5


class DataError(ValueError):
    pass


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir, command: str, seed, inputs: dict, outputs: list,
                    extra: dict = None):
    """outputs: paths under out_dir; hashes recorded relative to it."""
    man = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "inputs": {str(k): v for k, v in sorted(inputs.items())},
        "outputs": {os.path.relpath(p, out_dir): _sha256(p)
                    for p in sorted(outputs)},
    }
    if extra:
        man.update(extra)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(man, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _resolve_out(args, command: str) -> str:
    root = args.out or os.environ.get(OUT_ENV) or "runs"
    out = os.path.join(root, command)
    os.makedirs(out, exist_ok=True)
    return out


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(
            cfg, train=dataclasses.replace(cfg.train, seed=args.seed))
    return cfg


def _config_inputs(args) -> dict:
    return {args.config: _sha256(args.config)} if args.config else {}


def _gen_seed(args, cfg: RunConfig) -> int:
    return args.seed if args.seed is not None else cfg.train.seed


def _encode_one(task):
    spec, class_ix, seed, index, codec = task
    lv = make_video(spec, class_ix, seed, index)
    from .codec import write_cvc1
    stream = encode_video(lv.video, block_size=codec.block_size,
                          gop_size=codec.gop_size, radius=codec.radius)
    return index, lv.label, lv.class_name, write_cvc1(stream)


def cmd_gen(args) -> int:
    cfg = _load_run_config(args)
    seed = _gen_seed(args, cfg)
    out = _resolve_out(args, "dataset")
    vid_dir = os.path.join(out, "videos")
    os.makedirs(vid_dir, exist_ok=True)
    spec = cfg.dataset
    tasks = [(spec, class_ix, seed, class_ix * spec.videos_per_class + i,
              cfg.codec)
             for class_ix in range(len(spec.classes))
             for i in range(spec.videos_per_class)]
    results = {}
    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for index, label, name, blob in pool.map(_encode_one, tasks,
                                                     chunksize=8):
                results[index] = (label, name, blob)
    else:
        for task in tasks:
            index, label, name, blob = _encode_one(task)
            results[index] = (label, name, blob)

    _, val_ix = split_indices(spec, seed)
    split = np.full(len(tasks), "train", dtype=object)
    split[val_ix] = "val"

    outputs = []
    label_rows = []
    for index in sorted(results):
        label, name, blob = results[index]
        path = os.path.join(vid_dir, f"vid_{index:05d}.cvc1")
        with open(path, "wb") as f:
            f.write(blob)
        outputs.append(path)
        label_rows.append((index, label, name, split[index]))
    labels_path = os.path.join(out, "labels.csv")
    with open(labels_path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(("index", "label", "class_name", "split"))
        wr.writerows(label_rows)
    outputs.append(labels_path)
    _write_manifest(out, "gen", seed, _config_inputs(args), outputs,
                    {"videos": len(label_rows),
                     "classes": list(spec.classes)})
    print(f"wrote {len(label_rows)} videos to {out}")
    return EXIT_OK


def _load_dataset_dir(data_dir):
    labels_path = os.path.join(data_dir, "labels.csv")
    if not os.path.isfile(labels_path):
        raise DataError(f"no labels.csv under {data_dir}; run gen first")
    rows = []
    with open(labels_path, newline="") as f:
        rd = csv.DictReader(f)
        for row in rd:
            rows.append((int(row["index"]), int(row["label"]),
                         row["class_name"], row["split"]))
    streams = []
    inputs = {labels_path: _sha256(labels_path)}
    for index, _, _, _ in rows:
        path = os.path.join(data_dir, "videos", f"vid_{index:05d}.cvc1")
        if not os.path.isfile(path):
            raise DataError(f"missing video file {path}")
        streams.append(load_cvc1(path))
        inputs[path] = _sha256(path)
    labels = np.array([r[1] for r in rows], dtype=np.int64)
    split = np.array([r[3] for r in rows])
    return streams, labels, split, inputs


def _build_split_segments(streams, labels, split, cfg: RunConfig,
                          accumulate: bool = True):
    t = cfg.model.segments
    hw = cfg.model.input_hw
    tr = np.flatnonzero(split == "train")
    va = np.flatnonzero(split == "val")
    train_set = build_segments([streams[i] for i in tr], labels[tr],
                               t, t, hw, accumulate)
    val_set = build_segments([streams[i] for i in va], labels[va],
                             cfg.train.n_triplets, t, hw, accumulate)
    return train_set, val_set


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    out = _resolve_out(args, "train")
    streams, labels, split, inputs = _load_dataset_dir(args.data)
    inputs.update(_config_inputs(args))
    train_set, val_set = _build_split_segments(streams, labels, split, cfg)

    def prog(row):
        print(f"epoch {row[0]:3d} {row[1]:5s} loss {row[2]:.4f} "
              f"top1 {row[3]:6.2f} top5 {row[4]:6.2f} spike_rate {row[5]:.4f}")

    res = train(cfg.train, train_set, val_set, out_dir=out, progress=prog)
    outputs = [os.path.join(out, "best.ckpt"), os.path.join(out, "metrics.csv")]
    snap = os.path.join(out, "config_snapshot.txt")
    with open(snap, "w") as f:
        f.write(repr(cfg) + "\n")
    outputs.append(snap)
    _write_manifest(out, "train", cfg.train.seed, inputs, outputs,
                    {"best_epoch": res.best_epoch,
                     "best_val_top1": res.best_val_top1,
                     "epochs_run": res.epochs_run})
    print(f"best val top1 {res.best_val_top1:.2f} at epoch {res.best_epoch}")
    return EXIT_OK


def _restore_model(cfg: RunConfig, checkpoint) -> Model:
    model = Model(cfg.model, np.random.default_rng(cfg.train.seed))
    state = load_checkpoint(checkpoint)
    model.load_state_dict(state)
    return model


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    out = _resolve_out(args, "eval")
    streams, labels, split, inputs = _load_dataset_dir(args.data)
    inputs.update(_config_inputs(args))
    inputs[args.checkpoint] = _sha256(args.checkpoint)
    model = _restore_model(cfg, args.checkpoint)
    _, val_set = _build_split_segments(streams, labels, split, cfg)
    rep = evaluate(model, val_set, batch_size=cfg.train.batch_size)
    bd = count_flops(cfg.model, batch=1,
                     record=None if not rep.spike_record.layer_tags
                     else rep.spike_record)
    ann = bd.ann_flops * val_set.n_views
    synops = bd.spike_synops // max(rep.n_videos, 1)
    rep.cost = CostReport(params=model.param_count(), ann_flops=ann,
                          spike_synops=synops,
                          energy_j=estimate_energy(ann, synops, cfg.cost),
                          throughput=0.0)
    eval_path = os.path.join(out, "eval.csv")
    with open(eval_path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(("top1", "top5", "loss", "spike_rate", "n_videos"))
        wr.writerow([f"{rep.top1:.4f}", f"{rep.top5:.4f}", f"{rep.loss:.6f}",
                     f"{rep.spike_rate:.6f}", rep.n_videos])
        wr.writerow(())
        wr.writerow(("confusion",))
        for row in rep.confusion:
            wr.writerow(row.tolist())
    cost_path = os.path.join(out, "cost.csv")
    with open(cost_path, "w") as f:
        f.write(CSV_HEADER + "\n" + rep.cost.csv_row() + "\n")
    _write_manifest(out, "eval", cfg.train.seed, inputs,
                    [eval_path, cost_path],
                    {"top1": rep.top1, "top5": rep.top5})
    print(f"val top1 {rep.top1:.2f} top5 {rep.top5:.2f} "
          f"spike_rate {rep.spike_rate:.4f}")
    print(rep.cost.text())
    return EXIT_OK


VARIANTS = ("full", "wo_stm", "mv_r_only", "wo_accumulation",
            "order_ls_t_gs", "order_ls_gs_t")


def _variant_config(base: ModelConfig, name: str) -> ModelConfig:
    if name == "full":
        return base
    if name == "wo_stm":
        return dataclasses.replace(base, use_stm=False)
    if name == "mv_r_only":
        return dataclasses.replace(base, modalities=("mv", "r"))
    if name == "wo_accumulation":
        return dataclasses.replace(base, use_accumulation=False)
    if name == "order_ls_t_gs":
        return dataclasses.replace(base, order="ls_t_gs")
    if name == "order_ls_gs_t":
        return dataclasses.replace(base, order="ls_gs_t")
    raise ConfigError(f"unknown ablation variant {name!r}; "
                      f"choose from {VARIANTS}")


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    out = _resolve_out(args, "ablate")
    streams, labels, split, inputs = _load_dataset_dir(args.data)
    inputs.update(_config_inputs(args))
    names = [v.strip() for v in args.variants.split(",") if v.strip()]
    variants = {n: _variant_config(cfg.model, n) for n in names}
    train_acc, val_acc = _build_split_segments(streams, labels, split, cfg)
    train_raw = val_raw = None
    if any(not v.use_accumulation for v in variants.values()):
        train_raw, val_raw = _build_split_segments(streams, labels, split,
                                                   cfg, accumulate=False)

    def prog(row):
        print(f"  epoch {row[0]:3d} {row[1]:5s} top1 {row[3]:6.2f}")

    rows, _ = ablate(cfg.train, variants, train_acc, val_acc, train_raw,
                     val_raw, out_dir=out,
                     progress=prog if args.verbose else None)
    path = os.path.join(out, "ablation.csv")
    _write_manifest(out, "ablate", cfg.train.seed, inputs, [path],
                    {"variants": names})
    print(ablation_csv(rows), end="")
    return EXIT_OK


def cmd_inspect(args) -> int:
    out = _resolve_out(args, "inspect")
    stream = load_cvc1(args.input)
    inputs = {args.input: _sha256(args.input)}
    gi, off = stream.locate(args.frame)
    gop = stream.gops[gi]
    frames = decode_gop(gop)
    outputs = []

    def dump(name, arr):
        path = os.path.join(out, name)
        write_array(path, arr)
        outputs.append(path)

    def ppm(name, rgb):
        path = os.path.join(out, name)
        write_ppm(path, rgb)
        outputs.append(path)

    ppm(f"frame_{args.frame:05d}.ppm", frames[off])
    ppm(f"gop{gi:03d}_iframe.ppm", gop.i_frame)
    if off > 0:
        pf = gop.p_frames[off - 1]
        h, w = frames[off].shape[:2]
        mv = pf.motion.expand(h, w)
        ppm(f"frame_{args.frame:05d}_mv.ppm", motion_to_rgb(mv))
        ppm(f"frame_{args.frame:05d}_res.ppm", residual_to_rgb(pf.residual))
        dump(f"frame_{args.frame:05d}_mv.arr1", mv.astype(np.float32))
        dump(f"frame_{args.frame:05d}_res.arr1",
             pf.residual.astype(np.float32))
        acc = accumulate_gop(gop)[off - 1]
        ppm(f"frame_{args.frame:05d}_pi.ppm", motion_to_rgb(acc.pi))
        ppm(f"frame_{args.frame:05d}_delta.ppm", residual_to_rgb(acc.delta))
        dump(f"frame_{args.frame:05d}_pi.arr1", acc.pi.astype(np.float32))
        dump(f"frame_{args.frame:05d}_delta.arr1",
             acc.delta.astype(np.float32))
    _write_manifest(out, "inspect", None, inputs, outputs,
                    {"frame": args.frame, "gop": gi, "offset": off})
    print(f"wrote {len(outputs)} files to {out}")
    return EXIT_OK


def cmd_accumulate(args) -> int:
    out = _resolve_out(args, "accumulate")
    stream = load_cvc1(args.input)
    inputs = {args.input: _sha256(args.input)}
    outputs = []
    gops = range(len(stream.gops)) if args.gop is None else [args.gop]
    for gi in gops:
        if not 0 <= gi < len(stream.gops):
            raise DataError(f"gop {gi} out of range")
        for acc in accumulate_gop(stream.gops[gi]):
            base = os.path.join(out, f"gop{gi:03d}_t{acc.t:02d}")
            write_array(base + "_pi.arr1", acc.pi.astype(np.float32))
            write_array(base + "_delta.arr1", acc.delta.astype(np.float32))
            outputs += [base + "_pi.arr1", base + "_delta.arr1"]
    _write_manifest(out, "accumulate", None, inputs, outputs, {})
    print(f"wrote {len(outputs)} dumps to {out}")
    return EXIT_OK


def cmd_cost(args) -> int:
    cfg = _load_run_config(args)
    out = _resolve_out(args, "cost")
    outputs = []
    if args.table1:
        rows = reproduce_table1(cfg.cost)
        print(table1_text(rows))
        path = os.path.join(out, "table1.csv")
        with open(path, "w", newline="") as f:
            wr = csv.writer(f, lineterminator="\n")
            wr.writerow(("method", "tflops_ann", "gflops_spike",
                         "reported_j", "estimated_j", "pct_error"))
            for r in rows:
                wr.writerow([r["name"], r["tflops_ann"], r["gflops_spike"],
                             r["reported_j"], f"{r['estimated_j']:.6f}",
                             f"{r['pct_error']:.4f}"])
        outputs.append(path)
    else:
        model = Model(cfg.model, np.random.default_rng(cfg.train.seed))
        h, w = cfg.model.input_hw
        probe_rng = np.random.default_rng(cfg.train.seed)
        from .network import MODALITY_CHANNELS
        batch = {m: probe_rng.normal(size=(1, cfg.model.segments,
                                           MODALITY_CHANNELS[m], h, w))
                 .astype(np.float32)
                 for m in cfg.model.active_modalities}
        rec = StmRunRecord()
        with no_grad():
            model.forward(batch, record=rec)
        has_stm = bool(rec.layer_tags)
        views = -(-cfg.train.n_triplets // cfg.model.segments)
        bd = count_flops(cfg.model, batch=1, record=rec if has_stm else None)
        ann = bd.ann_flops * views
        synops = bd.spike_synops * views

        def run_once():
            with no_grad():
                for _ in range(views):
                    model.forward(batch)

        speed = benchmark_speed(run_once, videos_per_run=1, trials=args.trials)
        report = CostReport(params=model.param_count(), ann_flops=ann,
                            spike_synops=synops,
                            energy_j=estimate_energy(ann, synops, cfg.cost),
                            throughput=speed.videos_per_second)
        print(report.text())
        print(f"measured on: {speed.fingerprint}")
        path = os.path.join(out, "cost.csv")
        with open(path, "w") as f:
            f.write(CSV_HEADER + "\n" + report.csv_row() + "\n")
        outputs.append(path)
    _write_manifest(out, "cost", cfg.train.seed, _config_inputs(args),
                    outputs, {"table1": bool(args.table1)})
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    cfg = _load_run_config(args)
    out = _resolve_out(args, "embeddings")
    streams, labels, split, inputs = _load_dataset_dir(args.data)
    inputs.update(_config_inputs(args))
    inputs[args.checkpoint] = _sha256(args.checkpoint)
    model = _restore_model(cfg, args.checkpoint)
    val_ix = np.flatnonzero(split == "val")[:args.videos]
    if len(val_ix) < 2:
        raise DataError("need at least 2 val videos to export")
    from .codec import decode_stream
    videos = [decode_stream(streams[i]) for i in val_ix]
    chosen = [streams[i] for i in val_ix]
    result = export_embeddings(model, videos, chosen, out,
                               n=cfg.train.n_triplets)
    outputs = [result["manifest"]]
    for rgb, cd in result["files"]:
        outputs += [rgb, cd]
    _write_manifest(out, "export-embeddings", cfg.train.seed, inputs, outputs,
                    {"rows": result["rows"]})
    print(f"exported {result['rows']} embedding rows to {out}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_all
    out = _resolve_out(args, "selftest")
    ok, lines = run_all()
    report = os.path.join(out, "selftest.txt")
    with open(report, "w") as f:
        f.write("\n".join(lines) + "\n")
    _write_manifest(out, "selftest", None, {}, [report], {"passed": ok})
    print("\n".join(lines))
    return EXIT_OK if ok else EXIT_SELFTEST


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="cdspike",
        description="Compressed-domain action recognition toolkit: "
                    "synthetic data, toy codec, spiking temporal modulator, "
                    "training, and energy cost reporting.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
        if seed:
            p.add_argument("--seed", type=int, help="override [train] seed")

    p = sub.add_parser("gen", help="synthesize the dataset and encode to CVC1")
    common(p)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("inspect", help="dump one frame's arrays and previews")
    p.add_argument("--input", required=True, help="a .cvc1 stream")
    p.add_argument("--frame", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("accumulate", help="dump accumulated motion/residuals")
    p.add_argument("--input", required=True, help="a .cvc1 stream")
    p.add_argument("--gop", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_accumulate)

    p = sub.add_parser("train", help="train on a generated dataset")
    common(p)
    p.add_argument("--data", required=True, help="dataset dir from gen")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the val split")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train component-ablation variants")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--variants",
                   default="full,wo_stm,mv_r_only,wo_accumulation")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("cost", help="energy model reports")
    common(p)
    p.add_argument("--table1", action="store_true",
                   help="reproduce the published per-video energy table")
    p.add_argument("--trials", type=int, default=3)
    p.set_defaults(fn=cmd_cost)

    p = sub.add_parser("export-embeddings",
                       help="dump RGB- and CD-space feature trajectories")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--videos", type=int, default=8)
    p.set_defaults(fn=cmd_export_embeddings)

    p = sub.add_parser("selftest", help="run the built-in oracle suites")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_selftest)

    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericsError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CodecError, SynthError, PipelineError,
            ArrayFormatError, CheckpointError, NetworkError, StmError,
            CostModelError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
