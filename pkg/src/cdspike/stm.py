"""Spiking temporal modulator: stacked convolutional LIF layers.

Each layer integrates convolved input into a leaky membrane potential,

    u[t] = conv(w, x[t]) + lambda * u[t-1] - v_th * o[t-1]
    o[t] = H(u[t] - v_th)

with reset-by-subtraction and a binary spike train o feeding the next
layer.  The leak and threshold are learnable scalars per layer, kept in
range by reparameterization (logistic for lambda, softplus plus a small
floor for v_th).  The modulator's output at every timestep is the final
layer's analog membrane potential, not its spikes; state is local to one
forward pass, so consecutive sequences never leak into each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    SurrogateSpec,
    Tensor,
    add,
    conv2d,
    mul,
    parameter,
    sigmoid,
    softplus,
    spike,
)
from .numerics.spike import smoothing_active

V_TH_FLOOR = 1e-3
MEMBRANE_OPS_PER_STEP = 2  # one decay multiply + one reset subtract per neuron


class StmError(ValueError):
    pass


@dataclass(frozen=True)
class StmConfig:
    """Shape and behaviour of one modulator branch."""

    depth: int = 2
    channels: tuple = (16, 16)
    kernel: int = 3
    dynamic_params: bool = True
    shared_branch: bool = False
    gamma: float = 100.0
    lambda_init: float = 0.9
    v_th_init: float = 1.0

    def __post_init__(self):
        if self.depth < 1:
            raise StmError("depth must be >= 1")
        if len(self.channels) != self.depth:
            raise StmError(f"need {self.depth} channel widths, got {self.channels}")
        if self.kernel % 2 != 1:
            raise StmError("kernel must be odd for same-size padding")
        if not 0 < self.lambda_init < 1:
            raise StmError("lambda_init must lie strictly inside (0, 1)")
        if self.v_th_init <= V_TH_FLOOR:
            raise StmError(f"v_th_init must exceed the floor {V_TH_FLOOR}")


class ConvLifLayer:
    """Parameters of one convolutional LIF layer."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 lambda_init: float, v_th_init: float, dynamic: bool,
                 rng: np.random.Generator, dtype=np.float32, name: str = "lif"):
        fan_in = in_channels * kernel * kernel
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in),
                       size=(out_channels, in_channels, kernel, kernel))
        self.w = parameter(w, name=f"{name}.w", dtype=dtype)
        # logistic reparameterization keeps 0 < lambda < 1
        lam_raw = math.log(lambda_init / (1.0 - lambda_init))
        # softplus + floor keeps v_th positive; above ~30 softplus(x) == x
        # in float64, so the exact inverse would overflow expm1 for nothing
        shifted = v_th_init - V_TH_FLOOR
        vth_raw = math.log(math.expm1(shifted)) if shifted < 30.0 else shifted
        self.lam_raw = parameter(np.asarray(lam_raw), name=f"{name}.lam",
                                 dtype=dtype)
        self.vth_raw = parameter(np.asarray(vth_raw), name=f"{name}.vth",
                                 dtype=dtype)
        self.lam_raw.requires_grad = dynamic
        self.vth_raw.requires_grad = dynamic
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.name = name

    def lam(self) -> Tensor:
        return sigmoid(self.lam_raw)

    def v_th(self) -> Tensor:
        return add(softplus(self.vth_raw), V_TH_FLOOR)

    def params(self) -> list:
        return [self.w, self.lam_raw, self.vth_raw]


@dataclass
class LifState:
    """Membrane potential and previous spikes of one layer mid-sequence."""

    u: Tensor
    o: Tensor


def init_state(layer: ConvLifLayer, batch: int, h: int, w: int,
               dtype=np.float32) -> LifState:
    shape = (batch, layer.out_channels, h, w)
    return LifState(u=Tensor(np.zeros(shape, dtype=dtype)),
                    o=Tensor(np.zeros(shape, dtype=dtype)))


def lif_step(layer: ConvLifLayer, state: LifState, x: Tensor,
             spec: SurrogateSpec, tag: str = "lif") -> tuple:
    """Advance one layer by one timestep; returns (new state, spikes)."""
    if x.shape[1] != layer.in_channels:
        raise StmError(f"{tag}: expected {layer.in_channels} input channels, "
                       f"got {x.shape[1]}")
    pad = layer.kernel // 2
    drive = conv2d(x, layer.w, padding=pad, tag=f"{tag}.conv")
    lam = layer.lam()
    vth = layer.v_th()
    u = add(drive, add(mul(lam, state.u), mul(mul(vth, -1.0), state.o)))
    o = spike(add(u, mul(vth, -1.0)), spec, tag=tag)
    new_state = LifState(u=u, o=o)
    return new_state, o


@dataclass
class StmRunRecord:
    """Spike bookkeeping from one stm_forward call (hard-spike mode only)."""

    layer_tags: list = field(default_factory=list)
    layer_kernel: list = field(default_factory=list)
    layer_cout: list = field(default_factory=list)
    layer_spikes: list = field(default_factory=list)       # total per layer
    layer_unit_steps: list = field(default_factory=list)   # neuron-timesteps
    events: list = field(default_factory=list)             # (t, tag, count)

    def register_layer(self, tag: str, kernel: int, cout: int):
        self.layer_tags.append(tag)
        self.layer_kernel.append(kernel)
        self.layer_cout.append(cout)
        self.layer_spikes.append(0)
        self.layer_unit_steps.append(0)

    def note(self, t: int, layer_idx: int, spikes: int, units: int):
        self.layer_spikes[layer_idx] += spikes
        self.layer_unit_steps[layer_idx] += units
        self.events.append((t, self.layer_tags[layer_idx], spikes))

    def merge(self, other: "StmRunRecord"):
        base = len(self.layer_tags)
        for i, tag in enumerate(other.layer_tags):
            self.register_layer(tag, other.layer_kernel[i], other.layer_cout[i])
            self.layer_spikes[base + i] = other.layer_spikes[i]
            self.layer_unit_steps[base + i] = other.layer_unit_steps[i]
        self.events.extend(other.events)


class Stm:
    """One modulator branch: config, layers, and the sequence loop."""

    def __init__(self, config: StmConfig, in_channels: int,
                 rng: np.random.Generator, dtype=np.float32, name: str = "stm"):
        self.config = config
        self.in_channels = in_channels
        self.dtype = dtype
        self.name = name
        self.spec = SurrogateSpec(gamma=config.gamma)
        self.layers = []
        cin = in_channels
        for i, cout in enumerate(config.channels):
            self.layers.append(ConvLifLayer(
                cin, cout, config.kernel, config.lambda_init, config.v_th_init,
                config.dynamic_params, rng, dtype, name=f"{name}.l{i}"))
            cin = cout

    @property
    def out_channels(self) -> int:
        return self.config.channels[-1]

    def params(self) -> list:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def forward(self, frames: list, tag_prefix=None,
                record: StmRunRecord | None = None) -> list:
        """Run the sequence; returns the final layer's membrane per timestep.

        ``frames`` is a list of (N, Cin, H, W) tensors, one per timestep.
        States start at zero and are discarded afterwards, so back-to-back
        sequences are independent.  When ``record`` is given (and spikes are
        hard), per-layer emitted-spike counts are accumulated into it.
        """
        if not frames:
            raise StmError("empty input sequence")
        first = frames[0].shape
        if len(first) != 4 or first[1] != self.in_channels:
            raise StmError(f"expected (N, {self.in_channels}, H, W) frames, "
                           f"got {first}")
        n, _, h, w = first
        prefix = tag_prefix or self.name
        states = [init_state(layer, n, h, w, self.dtype) for layer in self.layers]
        recording = record is not None and not smoothing_active()
        if recording:
            base = len(record.layer_tags)
            for i, layer in enumerate(self.layers):
                record.register_layer(f"{prefix}.l{i}", layer.kernel,
                                      layer.out_channels)
        outputs = []
        for t, x in enumerate(frames):
            if x.shape != first:
                raise StmError(f"frame {t} shape {x.shape} drifted from {first}")
            for i, layer in enumerate(self.layers):
                states[i], spikes = lif_step(layer, states[i], x, self.spec,
                                             tag=f"{prefix}.l{i}")
                if recording:
                    record.note(t, base + i, int(spikes.data.sum()),
                                spikes.size)
                x = spikes
            outputs.append(states[-1].u)
        return outputs


@dataclass(frozen=True)
class SpikeStats:
    total_spikes: int
    neuron_timesteps: int
    spike_rate: float
    per_layer_synops: tuple  # ((tag, synops), ...) for spike-fed layers
    synops_total: int


def spike_stats(record: StmRunRecord) -> SpikeStats:
    """Totals, firing rate, and spike-gated synaptic ops from a run record.

    A spike entering layer l touches kernel^2 * Cout(l) accumulates (its full
    fan-out), so per-layer synops = spikes emitted by layer l-1 times that
    factor.  The first layer of each branch is analog-driven and contributes
    no spike-gated ops here; membrane-update ops are accounted separately by
    the cost model.
    """
    total = sum(record.layer_spikes)
    units = sum(record.layer_unit_steps)
    per_layer = []
    for i in range(len(record.layer_tags)):
        tag = record.layer_tags[i]
        # a branch restarts whenever the tag index returns to l0
        if tag.endswith(".l0"):
            continue
        fan_out = record.layer_kernel[i] ** 2 * record.layer_cout[i]
        per_layer.append((tag, record.layer_spikes[i - 1] * fan_out))
    synops = sum(s for _, s in per_layer)
    rate = total / units if units else 0.0
    return SpikeStats(total_spikes=total, neuron_timesteps=units,
                      spike_rate=rate, per_layer_synops=tuple(per_layer),
                      synops_total=synops)


def dense_equivalent_synops(record: StmRunRecord) -> int:
    """Synops if every input unit of every spike-fed layer fired each step."""
    total = 0
    for i in range(len(record.layer_tags)):
        if record.layer_tags[i].endswith(".l0"):
            continue
        fan_out = record.layer_kernel[i] ** 2 * record.layer_cout[i]
        total += record.layer_unit_steps[i - 1] * fan_out
    return total


def membrane_update_ops(record: StmRunRecord) -> int:
    """Decay + reset arithmetic, two ops per neuron-timestep."""
    return MEMBRANE_OPS_PER_STEP * sum(record.layer_unit_steps)


def write_event_trace(record: StmRunRecord, path):
    """CSV dump of (timestep, layer, spike_count) for sparsity analysis."""
    lines = ["timestep,layer,spike_count"]
    for t, tag, count in record.events:
        lines.append(f"{t},{tag},{count}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
