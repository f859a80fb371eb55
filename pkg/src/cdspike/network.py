"""Recognition architecture over compressed-domain inputs.

Pipeline stages, composable in three contextualization orders:

  * temporal modulation (T): spiking LIF branches over the segment axis,
    run either on pixel-space motion/residual maps or on token-space
    feature maps depending on the order;
  * local spatial (LS): per-modality conv patch embedding with symmetric
    zero-padding so any H, W is covered;
  * global spatial (GS): pre-norm transformer encoder with additive
    learnable positional tables (space + time + modality), run over the
    union of all tokens ("unified") or per modality ("separate").

After encoding, tokens fold back to per-(modality, time) grids; the
Multi-Modal Mixer fuses them with low-level modulator maps (overlapping
3x3 conv on the high path, pointwise channel projection on the low path,
elementwise addition, skip connections where channels agree); a
residual-in-residual dense block refines the fused map; classification
is global average pooling plus a linear head, or a learned class token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import (
    Tensor,
    affine,
    avg_pool2d,
    concat,
    conv2d,
    gelu,
    index_select,
    layer_norm,
    matmul,
    mean,
    parameter,
    relu,
    softmax,
)
from .stm import Stm, StmConfig, StmRunRecord

MODALITIES = ("i", "mv", "r")
MODALITY_CHANNELS = {"i": 3, "mv": 2, "r": 3}
ORDERS = ("t_ls_gs", "ls_t_gs", "ls_gs_t")


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Everything needed to build the model deterministically."""

    classes: int = 5
    input_hw: tuple = (32, 32)
    patch: int = 8
    d: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 2
    segments: int = 4
    order: str = "t_ls_gs"
    encoder_mode: str = "unified"
    head: str = "gap"
    modalities: tuple = MODALITIES
    use_stm: bool = True
    use_mixer: bool = True
    use_skips: bool = True
    use_rrdb: bool = True
    use_accumulation: bool = True
    scale: str = "base"
    stm: StmConfig = StmConfig()
    rrdb_blocks: int = 2
    rrdb_layers: int = 3
    rrdb_growth: int = 8
    rrdb_beta: float = 0.2

    def __post_init__(self):
        if self.order not in ORDERS:
            raise NetworkError(f"order must be one of {ORDERS}, got {self.order!r}")
        if self.encoder_mode not in ("unified", "separate"):
            raise NetworkError(f"unknown encoder mode {self.encoder_mode!r}")
        if self.head not in ("gap", "class_token"):
            raise NetworkError(f"unknown head {self.head!r}")
        if self.scale not in ("base", "large"):
            raise NetworkError(f"unknown scale preset {self.scale!r}")
        mods = tuple(self.modalities)
        if not mods or any(m not in MODALITIES for m in mods):
            raise NetworkError(f"modalities must be a nonempty subset of "
                               f"{MODALITIES}, got {mods}")
        if len(set(mods)) != len(mods):
            raise NetworkError("duplicate modality")
        if self.width % self.heads:
            raise NetworkError(f"width {self.width} not divisible by "
                               f"{self.heads} heads")
        if self.classes < 2:
            raise NetworkError("need at least 2 classes")
        if self.segments < 1 or self.patch < 1:
            raise NetworkError("segments and patch must be >= 1")
        if self.head == "class_token" and self.encoder_mode != "unified":
            raise NetworkError("class token requires the unified encoder")
        if self.head == "class_token" and self.order == "ls_gs_t":
            raise NetworkError("class token classifies straight off the "
                               "encoder, which leaves no stage after it for "
                               "temporal modulation")

    @property
    def width(self) -> int:
        return self.d * 2 if self.scale == "large" else self.d

    @property
    def n_layers(self) -> int:
        return self.depth * 2 if self.scale == "large" else self.depth

    @property
    def active_modalities(self) -> tuple:
        return tuple(m for m in MODALITIES if m in self.modalities)

    @property
    def p_branches(self) -> tuple:
        return tuple(m for m in ("mv", "r") if m in self.modalities)

    @property
    def grid(self) -> tuple:
        h, w = self.input_hw
        return -(-h // self.patch), -(-w // self.patch)


@dataclass
class TokenSet:
    """Embeddings plus the (modality, time, row, col) identity of each token."""

    tokens: Tensor            # (N, n_tok, d)
    modality: np.ndarray      # (n_tok,) indices into MODALITIES
    time: np.ndarray
    row: np.ndarray
    col: np.ndarray
    grid: tuple
    n_time: int
    modalities: tuple         # active modality names, canonical order

    def validate(self):
        n_tok = self.tokens.shape[1]
        for arr in (self.modality, self.time, self.row, self.col):
            if arr.shape != (n_tok,):
                raise NetworkError("token index arrays must have one entry per token")
        key = ((self.modality * self.n_time + self.time) * self.grid[0]
               + self.row) * self.grid[1] + self.col
        if len(np.unique(key)) != n_tok:
            raise NetworkError("token index is not a bijection")
        expected = len(self.modalities) * self.n_time * self.grid[0] * self.grid[1]
        if n_tok != expected:
            raise NetworkError(f"incomplete token index: {n_tok} tokens, "
                               f"expected {expected}")

    def with_tokens(self, tokens: Tensor) -> "TokenSet":
        return TokenSet(tokens, self.modality, self.time, self.row, self.col,
                        self.grid, self.n_time, self.modalities)


def _init_linear(rng, din, dout, dtype, name):
    w = parameter(rng.normal(0.0, 0.02, size=(din, dout)), name=f"{name}.w",
                  dtype=dtype)
    b = parameter(np.zeros(dout), name=f"{name}.b", dtype=dtype)
    return w, b


class PatchEmbed:
    """p x p stride-p conv; symmetric zero-padding covers every pixel."""

    def __init__(self, in_channels: int, d: int, patch: int,
                 rng: np.random.Generator, dtype=np.float32, name="patch"):
        self.in_channels = in_channels
        self.patch = patch
        self.w = parameter(
            rng.normal(0.0, 0.02, size=(d, in_channels, patch, patch)),
            name=f"{name}.w", dtype=dtype)
        self.b = parameter(np.zeros(d), name=f"{name}.b", dtype=dtype)
        self.name = name

    def out_grid(self, h: int, w: int) -> tuple:
        return -(-h // self.patch), -(-w // self.patch)

    def forward(self, x: Tensor) -> Tensor:
        p = self.patch
        h, w = x.shape[2], x.shape[3]
        gh, gw = self.out_grid(h, w)
        ph, pw = gh * p - h, gw * p - w
        pad = ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2))
        return conv2d(x, self.w, self.b, stride=p, padding=pad, tag=self.name)

    def params(self):
        return [self.w, self.b]


class PosEnc:
    """Zero-initialized additive tables, factorized space + time + modality."""

    def __init__(self, n_space: int, n_time: int, d: int, dtype=np.float32,
                 name="pos"):
        self.space = parameter(np.zeros((n_space, d)), name=f"{name}.space",
                               dtype=dtype)
        self.time = parameter(np.zeros((n_time, d)), name=f"{name}.time",
                              dtype=dtype)
        self.modality = parameter(np.zeros((len(MODALITIES), d)),
                                  name=f"{name}.modality", dtype=dtype)

    def lookup(self, ts: TokenSet) -> Tensor:
        gw = ts.grid[1]
        sp = index_select(self.space, 0, ts.row * gw + ts.col)
        ti = index_select(self.time, 0, ts.time)
        mo = index_select(self.modality, 0, ts.modality)
        return sp + ti + mo

    def params(self):
        return [self.space, self.time, self.modality]


class EncoderBlock:
    """Pre-norm multi-head self-attention + MLP, both with residuals."""

    def __init__(self, d: int, heads: int, mlp_ratio: int,
                 rng: np.random.Generator, dtype=np.float32, name="blk"):
        self.d = d
        self.heads = heads
        self.dh = d // heads
        self.ln1_g = parameter(np.ones(d), name=f"{name}.ln1.g", dtype=dtype)
        self.ln1_b = parameter(np.zeros(d), name=f"{name}.ln1.b", dtype=dtype)
        self.qkv_w, self.qkv_b = _init_linear(rng, d, 3 * d, dtype, f"{name}.qkv")
        self.proj_w, self.proj_b = _init_linear(rng, d, d, dtype, f"{name}.proj")
        self.ln2_g = parameter(np.ones(d), name=f"{name}.ln2.g", dtype=dtype)
        self.ln2_b = parameter(np.zeros(d), name=f"{name}.ln2.b", dtype=dtype)
        hidden = mlp_ratio * d
        self.fc1_w, self.fc1_b = _init_linear(rng, d, hidden, dtype, f"{name}.fc1")
        self.fc2_w, self.fc2_b = _init_linear(rng, hidden, d, dtype, f"{name}.fc2")

    def forward(self, x: Tensor) -> Tensor:
        n, n_tok, d = x.shape
        h, dh = self.heads, self.dh
        a = layer_norm(x, self.ln1_g, self.ln1_b)
        qkv = affine(a, self.qkv_w, self.qkv_b, tag="attn.qkv")
        qkv = qkv.reshape(n, n_tok, 3, h, dh).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = matmul(q, k.permute(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        att = softmax(att, axis=-1)
        out = matmul(att, v).permute(0, 2, 1, 3).reshape(n, n_tok, d)
        x = x + affine(out, self.proj_w, self.proj_b, tag="attn.proj")
        m = layer_norm(x, self.ln2_g, self.ln2_b)
        m = gelu(affine(m, self.fc1_w, self.fc1_b, tag="mlp.fc1"))
        m = affine(m, self.fc2_w, self.fc2_b, tag="mlp.fc2")
        return x + m

    def params(self):
        return [self.ln1_g, self.ln1_b, self.qkv_w, self.qkv_b, self.proj_w,
                self.proj_b, self.ln2_g, self.ln2_b, self.fc1_w, self.fc1_b,
                self.fc2_w, self.fc2_b]


class Encoder:
    def __init__(self, layers: int, d: int, heads: int, mlp_ratio: int,
                 rng: np.random.Generator, dtype=np.float32, name="enc"):
        if d % heads:
            raise NetworkError(f"width {d} not divisible by {heads} heads")
        self.blocks = [EncoderBlock(d, heads, mlp_ratio, rng, dtype,
                                    name=f"{name}.{i}")
                       for i in range(layers)]

    def forward(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk.forward(x)
        return x

    def params(self):
        out = []
        for blk in self.blocks:
            out.extend(blk.params())
        return out


def tokenize(maps: dict, grid: tuple, n_time: int) -> TokenSet:
    """Flatten per-modality (N, T, d, gh, gw) maps into one token sequence.

    Canonical order: modality-major (I, MV, R), then time, row, column.
    """
    gh, gw = grid
    names = tuple(m for m in MODALITIES if m in maps)
    if not names:
        raise NetworkError("tokenize needs at least one modality")
    pieces, mod_ix, t_ix, r_ix, c_ix = [], [], [], [], []
    for m in names:
        t = maps[m]
        n = t.shape[0]
        pieces.append(t.permute(0, 1, 3, 4, 2).reshape(n, n_time * gh * gw,
                                                       t.shape[2]))
        grid_t, grid_r, grid_c = np.meshgrid(np.arange(n_time), np.arange(gh),
                                             np.arange(gw), indexing="ij")
        mod_ix.append(np.full(n_time * gh * gw, MODALITIES.index(m)))
        t_ix.append(grid_t.ravel())
        r_ix.append(grid_r.ravel())
        c_ix.append(grid_c.ravel())
    ts = TokenSet(tokens=concat(pieces, axis=1),
                  modality=np.concatenate(mod_ix).astype(np.int64),
                  time=np.concatenate(t_ix).astype(np.int64),
                  row=np.concatenate(r_ix).astype(np.int64),
                  col=np.concatenate(c_ix).astype(np.int64),
                  grid=grid, n_time=n_time, modalities=names)
    ts.validate()
    return ts


def token_fold(ts: TokenSet) -> dict:
    """Inverse of tokenize: per-modality (N, T, d, gh, gw) maps.

    Depends only on the index arrays, so shuffled token order folds to the
    same maps as canonical order.
    """
    ts.validate()
    gh, gw = ts.grid
    n, _, d = ts.tokens.shape
    key = ((ts.modality * ts.n_time + ts.time) * gh + ts.row) * gw + ts.col
    perm = np.argsort(key, kind="stable")
    ordered = index_select(ts.tokens, 1, perm)
    out = {}
    per_mod = ts.n_time * gh * gw
    sorted_mods = sorted(ts.modalities, key=MODALITIES.index)
    for i, m in enumerate(sorted_mods):
        chunk = ordered[:, i * per_mod:(i + 1) * per_mod, :]
        out[m] = chunk.reshape(n, ts.n_time, gh, gw, d).permute(0, 1, 4, 2, 3)
    return out


def unified_encode(ts: TokenSet, pos: PosEnc, encoder: Encoder,
                   cls_token: Tensor | None = None):
    """Positional encoding + joint encoding of all tokens.

    Returns (encoded TokenSet, encoded class token or None); token count
    and index are preserved, the class token rides along in front.
    """
    x = ts.tokens + pos.lookup(ts)
    if cls_token is not None:
        n = x.shape[0]
        cls = cls_token.reshape(1, 1, cls_token.shape[-1])
        zeros = Tensor(np.zeros((n, 1, cls.shape[-1]),
                                dtype=cls.data.dtype))
        x = concat([zeros + cls, x], axis=1)
    y = encoder.forward(x)
    if cls_token is not None:
        return ts.with_tokens(y[:, 1:, :]), y[:, 0, :]
    return ts.with_tokens(y), None


class MultiModalMixer:
    """Conv Folding (3x3 on the high path) + Conv Fusion (1x1 on the low path).

    The high path keeps d channels so its skip adds directly; the low path
    is first pooled to the token grid and projected to d channels (the
    projection changes width, so the skip wraps the subsequent pointwise
    mixing stage instead), then fused into the high path by addition.
    """

    def __init__(self, d: int, c_low: int, rng: np.random.Generator,
                 dtype=np.float32, name="mixer"):
        self.d = d
        self.c_low = c_low
        k = rng.normal(0.0, 0.02, size=(d, d, 3, 3))
        self.fold_w = parameter(k, name=f"{name}.fold.w", dtype=dtype)
        self.fold_b = parameter(np.zeros(d), name=f"{name}.fold.b", dtype=dtype)
        if c_low:
            self.proj_w = parameter(rng.normal(0.0, 0.02, size=(d, c_low, 1, 1)),
                                    name=f"{name}.proj.w", dtype=dtype)
            self.proj_b = parameter(np.zeros(d), name=f"{name}.proj.b",
                                    dtype=dtype)
            self.mix_w = parameter(rng.normal(0.0, 0.02, size=(d, d, 1, 1)),
                                   name=f"{name}.mix.w", dtype=dtype)
            self.mix_b = parameter(np.zeros(d), name=f"{name}.mix.b", dtype=dtype)

    def forward(self, high: Tensor, low: Tensor | None,
                use_skips: bool = True) -> Tensor:
        """high (M, d, gh, gw); low (M, c_low, H, W) with H, W multiples of the grid."""
        hi = conv2d(high, self.fold_w, self.fold_b, padding=1, tag="mixer.fold")
        if use_skips:
            hi = hi + high
        if low is None or self.c_low == 0:
            return hi
        gh, gw = high.shape[2], high.shape[3]
        lh, lw = low.shape[2], low.shape[3]
        if lh % gh or lw % gw or lh // gh != lw // gw:
            raise NetworkError(f"low map {lh}x{lw} not alignable to grid {gh}x{gw}")
        factor = lh // gh
        if factor > 1:
            low = avg_pool2d(low, factor)
        lo = conv2d(low, self.proj_w, self.proj_b, tag="mixer.proj")
        mixed = conv2d(lo, self.mix_w, self.mix_b, tag="mixer.mix")
        if use_skips:
            mixed = mixed + lo
        return hi + mixed

    def params(self):
        out = [self.fold_w, self.fold_b]
        if self.c_low:
            out += [self.proj_w, self.proj_b, self.mix_w, self.mix_b]
        return out


class Rrdb:
    """Residual-in-residual dense block stack with scaled residuals.

    Each dense block concatenates all prior layer outputs; block output is
    folded in as x + beta * block(x); the outer connection rescales the whole
    trunk as x + beta * (trunk(x) - x), so zero weights or beta = 0 both
    reduce to the identity.  Convs carry no bias.
    """

    def __init__(self, d: int, blocks: int, layers: int, growth: int,
                 beta: float, rng: np.random.Generator, dtype=np.float32,
                 name="rrdb"):
        if blocks < 1 or layers < 1:
            raise NetworkError("rrdb needs at least one block and one layer")
        self.beta = float(beta)
        self.weights = []
        for b in range(blocks):
            ws = []
            cin = d
            for g in range(layers):
                cout = growth if g < layers - 1 else d
                w = parameter(rng.normal(0.0, 0.02, size=(cout, cin, 3, 3)),
                              name=f"{name}.b{b}.l{g}.w", dtype=dtype)
                ws.append(w)
                cin += growth
            self.weights.append(ws)

    def forward(self, x: Tensor) -> Tensor:
        y = x
        for ws in self.weights:
            feats = y
            for g, w in enumerate(ws):
                h = conv2d(feats, w, padding=1, tag="rrdb")
                if g < len(ws) - 1:
                    h = relu(h)
                    feats = concat([feats, h], axis=1)
                else:
                    y = y + h * self.beta
        return x + (y - x) * self.beta

    def params(self):
        return [w for ws in self.weights for w in ws]


def _stack_time(steps: list) -> Tensor:
    """List of T (N, C, H, W) tensors -> (N, T, C, H, W)."""
    n, c, h, w = steps[0].shape
    return concat([s.reshape(n, 1, c, h, w) for s in steps], axis=1)


class Model:
    """Full classifier; construction order fixes parameter naming."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator,
                 dtype=np.float32):
        self.config = config
        self.dtype = dtype
        d = config.width
        self.gh, self.gw = config.grid
        mods = config.active_modalities
        self.pixel_stm = (config.use_stm and config.order == "t_ls_gs"
                          and bool(config.p_branches))
        self.token_stm = (config.use_stm and config.order != "t_ls_gs"
                          and bool(config.p_branches))

        self._params: list = []

        # temporal modulator branches
        self.stm: dict = {}
        if self.pixel_stm or self.token_stm:
            stm_cfg = config.stm
            if self.token_stm:
                stm_cfg = StmConfig(
                    depth=stm_cfg.depth, channels=(d,) * stm_cfg.depth,
                    kernel=stm_cfg.kernel, dynamic_params=stm_cfg.dynamic_params,
                    shared_branch=stm_cfg.shared_branch, gamma=stm_cfg.gamma,
                    lambda_init=stm_cfg.lambda_init, v_th_init=stm_cfg.v_th_init)
            if stm_cfg.shared_branch:
                cin = d if self.token_stm else 3  # MV zero-padded to 3 channels
                shared = Stm(stm_cfg, cin, rng, dtype, name="stm.shared")
                for br in config.p_branches:
                    self.stm[br] = shared
                self._params.extend(shared.params())
            else:
                for br in config.p_branches:
                    cin = d if self.token_stm else MODALITY_CHANNELS[br]
                    self.stm[br] = Stm(stm_cfg, cin, rng, dtype,
                                       name=f"stm.{br}")
                    self._params.extend(self.stm[br].params())

        # patch embedding per modality
        self.patch: dict = {}
        for m in mods:
            if m in ("mv", "r") and self.pixel_stm:
                cin = self.stm[m].out_channels
            else:
                cin = MODALITY_CHANNELS[m]
            self.patch[m] = PatchEmbed(cin, d, config.patch, rng, dtype,
                                       name=f"patch.{m}")
            self._params.extend(self.patch[m].params())

        self.pos = PosEnc(self.gh * self.gw, config.segments, d, dtype)
        self._params.extend(self.pos.params())

        if config.encoder_mode == "unified":
            self.encoders = {"all": Encoder(config.n_layers, d, config.heads,
                                            config.mlp_ratio, rng, dtype,
                                            name="enc")}
        else:
            self.encoders = {m: Encoder(config.n_layers, d, config.heads,
                                        config.mlp_ratio, rng, dtype,
                                        name=f"enc.{m}")
                             for m in mods}
        for enc in self.encoders.values():
            self._params.extend(enc.params())

        self.cls_token = None
        if config.head == "class_token":
            self.cls_token = parameter(rng.normal(0.0, 0.02, size=(d,)),
                                       name="cls", dtype=dtype)
            self._params.append(self.cls_token)

        self.mixer = None
        self.rrdb = None
        if config.head == "gap":
            if config.use_mixer:
                c_low = (sum(self.stm[br].out_channels
                             for br in config.p_branches)
                         if self.pixel_stm else 0)
                self.mixer = MultiModalMixer(d, c_low, rng, dtype)
                self._params.extend(self.mixer.params())
            if config.use_rrdb:
                self.rrdb = Rrdb(d, config.rrdb_blocks, config.rrdb_layers,
                                 config.rrdb_growth, config.rrdb_beta, rng,
                                 dtype)
                self._params.extend(self.rrdb.params())

        self.head_w, self.head_b = _init_linear(rng, d, config.classes, dtype,
                                                "head")
        self._params.extend([self.head_w, self.head_b])

        names = [p.name for p in self._params]
        if len(set(names)) != len(names):
            raise NetworkError("duplicate parameter names")

    # ---- parameter plumbing ----

    def params(self) -> list:
        return list(self._params)

    def named_params(self) -> dict:
        return {p.name: p for p in self._params}

    def param_count(self) -> int:
        return sum(p.size for p in self._params)

    def state_dict(self) -> dict:
        return {p.name: p.data.copy() for p in self._params}

    def load_state_dict(self, state: dict):
        own = self.named_params()
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise NetworkError(f"checkpoint mismatch: missing {missing[:4]}, "
                               f"unexpected {extra[:4]}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise NetworkError(f"shape mismatch for {name}: checkpoint "
                                   f"{arr.shape}, model {p.data.shape}")
            p.data = arr.copy()

    # ---- forward ----

    def _validate_batch(self, batch: dict) -> dict:
        cfg = self.config
        h, w = cfg.input_hw
        out = {}
        n = None
        for m in cfg.active_modalities:
            if m not in batch:
                raise NetworkError(f"batch missing modality {m!r}")
            arr = np.asarray(batch[m], dtype=self.dtype)
            want = (cfg.segments, MODALITY_CHANNELS[m], h, w)
            if arr.ndim != 5 or arr.shape[1:] != want:
                raise NetworkError(f"modality {m!r}: expected (N, {want[0]}, "
                                   f"{want[1]}, {want[2]}, {want[3]}), got "
                                   f"{arr.shape}")
            if n is None:
                n = arr.shape[0]
            elif arr.shape[0] != n:
                raise NetworkError("batch size differs across modalities")
            out[m] = arr
        return out

    def _run_stm_maps(self, maps: dict, record):
        """Token-space temporal stage: modulate each P branch's map sequence."""
        t_steps = self.config.segments
        for br in self.config.p_branches:
            frames = [maps[br][:, t] for t in range(t_steps)]
            outs = self.stm[br].forward(frames, tag_prefix=f"stm.{br}",
                                        record=record)
            maps[br] = _stack_time(outs)
        return maps

    def forward(self, batch: dict, record: StmRunRecord | None = None,
                capture: dict | None = None) -> Tensor:
        """Batch of per-modality arrays -> (N, classes) logits.

        ``batch`` maps each active modality to (N, T, C, H, W) float arrays;
        ``record`` collects spike counts; ``capture`` (a dict) receives
        intermediate feature maps as detached numpy arrays.
        """
        cfg = self.config
        arrays = self._validate_batch(batch)
        t_steps = cfg.segments
        low = None

        # pixel-space temporal stage
        stm_px: dict = {}
        if self.pixel_stm:
            for br in cfg.p_branches:
                x = arrays[br]
                if cfg.stm.shared_branch and x.shape[2] == 2:
                    x = np.concatenate(
                        [x, np.zeros_like(x[:, :, :1])], axis=2)
                frames = [Tensor(np.ascontiguousarray(x[:, t])) for t in
                          range(t_steps)]
                stm_px[br] = self.stm[br].forward(
                    frames, tag_prefix=f"stm.{br}", record=record)
            lows = [_stack_time(stm_px[br]) for br in cfg.p_branches]
            low = lows[0] if len(lows) == 1 else concat(lows, axis=2)

        # local spatial stage: per-modality, per-timestep patch embedding
        maps: dict = {}
        for m in cfg.active_modalities:
            if m in stm_px:
                steps = stm_px[m]
            else:
                steps = [Tensor(np.ascontiguousarray(arrays[m][:, t]))
                         for t in range(t_steps)]
            maps[m] = _stack_time([self.patch[m].forward(s) for s in steps])

        if capture is not None:
            pooled = {m: maps[m].data.mean(axis=(3, 4)) for m in maps}
            capture["segment_pooled"] = pooled

        if cfg.order == "ls_t_gs" and self.token_stm:
            maps = self._run_stm_maps(maps, record)

        # global spatial stage
        ts = tokenize(maps, (self.gh, self.gw), t_steps)
        cls_out = None
        if cfg.encoder_mode == "unified":
            ts, cls_out = unified_encode(ts, self.pos, self.encoders["all"],
                                         self.cls_token)
        else:
            enc_maps = {}
            for m in cfg.active_modalities:
                sub = tokenize({m: maps[m]}, (self.gh, self.gw), t_steps)
                sub, _ = unified_encode(sub, self.pos, self.encoders[m])
                enc_maps[m] = token_fold(sub)[m]
            ts = tokenize(enc_maps, (self.gh, self.gw), t_steps)

        if capture is not None:
            capture["tokens_encoded"] = ts.tokens.data.copy()

        if cfg.head == "class_token":
            logits = affine(cls_out, self.head_w, self.head_b, tag="head")
            if capture is not None:
                capture["logits"] = logits.data.copy()
            return logits

        folded = token_fold(ts)
        if cfg.order == "ls_gs_t" and self.token_stm:
            folded = self._run_stm_maps(folded, record)

        high = None
        for m in cfg.active_modalities:
            high = folded[m] if high is None else high + folded[m]

        n = high.shape[0]
        fused2d = high.reshape(n * t_steps, cfg.width, self.gh, self.gw)
        if self.mixer is not None:
            low2d = None
            if low is not None:
                c_low = low.shape[2]
                low2d = low.reshape(n * t_steps, c_low, low.shape[3],
                                    low.shape[4])
            fused2d = self.mixer.forward(fused2d, low2d, cfg.use_skips)
        if capture is not None:
            capture["post_mixer"] = fused2d.data.reshape(
                n, t_steps, cfg.width, self.gh, self.gw).copy()
        if self.rrdb is not None:
            fused2d = self.rrdb.forward(fused2d)
        if capture is not None:
            capture["post_rrdb"] = fused2d.data.reshape(
                n, t_steps, cfg.width, self.gh, self.gw).copy()

        fused = fused2d.reshape(n, t_steps, cfg.width, self.gh, self.gw)
        pooled = mean(fused, axis=(1, 3, 4))
        logits = affine(pooled, self.head_w, self.head_b, tag="head")
        if capture is not None:
            capture["logits"] = logits.data.copy()
        return logits

    # ---- reporting ----

    def shape_report(self) -> str:
        """Text table of stage output shapes for a single-sample forward."""
        cfg = self.config
        h, w = cfg.input_hw
        lines = [f"input {h}x{w}, patch {cfg.patch}, grid {self.gh}x{self.gw}, "
                 f"width {cfg.width}, segments {cfg.segments}",
                 f"order {cfg.order}, encoder {cfg.encoder_mode}, "
                 f"head {cfg.head}, modalities {'+'.join(cfg.active_modalities)}"]
        batch = {m: np.zeros((1, cfg.segments, MODALITY_CHANNELS[m], h, w),
                             dtype=self.dtype)
                 for m in cfg.active_modalities}
        capture: dict = {}
        from .numerics import no_grad
        with no_grad():
            self.forward(batch, capture=capture)
        for key in ("segment_pooled", "tokens_encoded", "post_mixer",
                    "post_rrdb", "logits"):
            if key not in capture:
                continue
            val = capture[key]
            if isinstance(val, dict):
                for m, arr in val.items():
                    lines.append(f"{key}[{m}]: {arr.shape}")
            else:
                lines.append(f"{key}: {val.shape}")
        lines.append(f"parameters: {self.param_count()}")
        return "\n".join(lines)
