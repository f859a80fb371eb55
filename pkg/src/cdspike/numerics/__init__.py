"""Dense-tensor engine with reverse-mode differentiation.

Everything the model needs and nothing more: numpy-backed tensors, a
recorded computation graph with per-op backward rules, the surrogate-
gradient spike primitive, finite-difference gradient checking and Adam.
"""

from .tensor import (
    Tensor,
    parameter,
    constant,
    no_grad,
    autograd_enabled,
    set_debug_nan,
    NumericsError,
    add,
    mul,
    matmul,
    concat,
    reshape,
    permute,
    mean,
    tsum,
)
from .ops import (
    conv2d,
    affine,
    layer_norm,
    softmax,
    relu,
    gelu,
    sigmoid,
    softplus,
    index_select,
    cross_entropy_logits,
    avg_pool2d,
)
from .spike import SurrogateSpec, spike, surrogate_factor, smooth_spikes, SpikeRecord
from .gradcheck import check_gradients
from .adam import AdamState, Adam, adam_step
from .instrument import FlopCounter, flop_counter
from .checkpoint import save_checkpoint, load_checkpoint, CheckpointError

__all__ = [
    "Tensor", "parameter", "constant", "no_grad", "autograd_enabled",
    "set_debug_nan", "NumericsError", "add", "mul", "matmul", "concat",
    "reshape", "permute", "mean", "tsum", "conv2d", "affine", "layer_norm",
    "softmax", "relu", "gelu", "sigmoid", "softplus", "index_select",
    "cross_entropy_logits", "avg_pool2d", "SurrogateSpec", "spike",
    "surrogate_factor", "smooth_spikes", "SpikeRecord", "check_gradients",
    "AdamState", "Adam", "adam_step", "FlopCounter", "flop_counter",
    "save_checkpoint", "load_checkpoint", "CheckpointError",
]
