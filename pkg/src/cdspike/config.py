"""Declarative run configuration: one INI document, schema-validated.

Sections cover the dataset, codec, model, temporal modulator, training,
energy constants, and output location.  Unknown sections or keys are
rejected with a diagnostic rather than ignored, so typos fail loudly.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass

from .costmodel import EnergyConstants
from .network import ModelConfig
from .pipeline import TrainConfig
from .stm import StmConfig
from .synth import SynthSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CodecParams:
    block_size: int = 8
    radius: int = 3
    gop_size: int = 12

    def __post_init__(self):
        if self.block_size < 1 or self.radius < 0 or self.gop_size < 1:
            raise ConfigError("codec parameters out of range")


@dataclass(frozen=True)
class RunConfig:
    dataset: SynthSpec
    codec: CodecParams
    train: TrainConfig            # carries the ModelConfig
    cost: EnergyConstants
    out_dir: str

    @property
    def model(self) -> ModelConfig:
        return self.train.model


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_str_tuple(s: str) -> tuple:
    items = tuple(part.strip() for part in s.split(",") if part.strip())
    if not items:
        raise ValueError("empty list")
    return items


def _parse_int_tuple(s: str) -> tuple:
    return tuple(int(part) for part in _parse_str_tuple(s))


def _parse_opt_float(s: str):
    v = s.strip().lower()
    if v in ("", "none"):
        return None
    return float(s)


# section -> key -> (parser, destination field)
_SCHEMA = {
    "dataset": {
        "classes": _parse_str_tuple,
        "videos_per_class": int,
        "height": int,
        "width": int,
        "frames": int,
        "fps": float,
        "val_fraction": float,
    },
    "codec": {
        "block_size": int,
        "radius": int,
        "gop_size": int,
    },
    "model": {
        "classes": int,
        "patch": int,
        "d": int,
        "depth": int,
        "heads": int,
        "mlp_ratio": int,
        "segments": int,
        "order": str,
        "encoder_mode": str,
        "head": str,
        "modalities": _parse_str_tuple,
        "use_stm": _parse_bool,
        "use_mixer": _parse_bool,
        "use_skips": _parse_bool,
        "use_rrdb": _parse_bool,
        "use_accumulation": _parse_bool,
        "scale": str,
        "rrdb_blocks": int,
        "rrdb_layers": int,
        "rrdb_growth": int,
        "rrdb_beta": float,
    },
    "stm": {
        "depth": int,
        "channels": _parse_int_tuple,
        "kernel": int,
        "dynamic_params": _parse_bool,
        "shared_branch": _parse_bool,
        "gamma": float,
        "lambda_init": float,
        "v_th_init": float,
    },
    "train": {
        "lr": float,
        "beta1": float,
        "beta2": float,
        "adam_eps": float,
        "weight_decay": float,
        "epochs": int,
        "batch_size": int,
        "seed": int,
        "flip_augment": _parse_bool,
        "n_triplets": int,
        "early_stop_top1": _parse_opt_float,
    },
    "cost": {
        "e_mac": float,
        "e_ac": float,
    },
    "run": {
        "out_dir": str,
    },
}

DEFAULT_CONFIG = """\
[dataset]
classes = translate_right, oscillate_vertical, orbit, expand_contract, rotate
videos_per_class = 200
height = 32
width = 32
frames = 24
fps = 12.0
val_fraction = 0.2

[codec]
block_size = 8
radius = 3
gop_size = 12

[model]
classes = 5
patch = 8
d = 64
depth = 2
heads = 4
mlp_ratio = 2
segments = 4
order = t_ls_gs
encoder_mode = unified
head = gap
modalities = i, mv, r
use_stm = true
use_mixer = true
use_skips = true
use_rrdb = true
use_accumulation = true
scale = base
rrdb_blocks = 2
rrdb_layers = 3
rrdb_growth = 8
rrdb_beta = 0.2

[stm]
depth = 2
channels = 16, 16
kernel = 3
dynamic_params = true
shared_branch = false
gamma = 100.0
lambda_init = 0.9
v_th_init = 1.0

[train]
lr = 3e-4
beta1 = 0.9
beta2 = 0.999
adam_eps = 1e-3
weight_decay = 1e-4
epochs = 40
batch_size = 16
seed = 0
flip_augment = true
n_triplets = 8
early_stop_top1 = none

[cost]
e_mac = 4.6e-12
e_ac = 0.9e-12

[run]
out_dir = runs
"""


def _collect(cp: configparser.ConfigParser) -> dict:
    values: dict = {}
    problems = []
    for section in cp.sections():
        if section not in _SCHEMA:
            problems.append(f"unknown section [{section}]")
            continue
        values[section] = {}
        for key, raw in cp.items(section):
            parser = _SCHEMA[section].get(key)
            if parser is None:
                problems.append(f"unknown key {key!r} in [{section}]")
                continue
            try:
                values[section][key] = parser(raw)
            except ValueError as e:
                problems.append(f"[{section}] {key} = {raw!r}: {e}")
    if problems:
        raise ConfigError("config rejected:\n  " + "\n  ".join(problems))
    return values


def parse_config(text: str) -> RunConfig:
    """Parse and validate an INI document, filling defaults for absent keys."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"),
                                   interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"config syntax error: {e}") from e
    got = _collect(cp)

    def section(name):
        return got.get(name, {})

    try:
        dataset = SynthSpec(**section("dataset"))
        codec = CodecParams(**section("codec"))
        stm = StmConfig(**section("stm"))
        model_kw = dict(section("model"))
        model_kw["input_hw"] = (dataset.height, dataset.width)
        model_kw["stm"] = stm
        model_kw.setdefault("classes", len(dataset.classes))
        if model_kw["classes"] != len(dataset.classes):
            raise ConfigError(f"model classes ({model_kw['classes']}) must "
                              f"match the dataset's {len(dataset.classes)} "
                              "motion classes")
        model = ModelConfig(**model_kw)
        train_kw = dict(section("train"))
        betas = (train_kw.pop("beta1", 0.9), train_kw.pop("beta2", 0.999))
        train = TrainConfig(model=model, betas=betas, **train_kw)
        cost = EnergyConstants(**section("cost"))
        out_dir = section("run").get("out_dir", "runs")
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(f"config rejected: {e}") from e
    return RunConfig(dataset=dataset, codec=codec, train=train, cost=cost,
                     out_dir=out_dir)


def load_config(path) -> RunConfig:
    try:
        with open(path, "r") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text)


def default_config() -> RunConfig:
    return parse_config(DEFAULT_CONFIG)
