"""Binary spike nonlinearity with an arctan surrogate gradient.

Forward emits hard 0/1 spikes (threshold crossings fire, including
exactly at zero).  Backward uses the smooth factor

    g(x) = (1/pi) * gamma / (1 + (gamma * x)^2)

regardless of mode.  Inside ``smooth_spikes()`` the forward switches to
the arctan sigmoid whose true derivative is that same factor, which
makes the whole network differentiable for finite-difference checks.

Active SpikeRecord contexts receive the emitted-spike count of every
hard spike call, keyed by the caller's tag; that recorder is the
independent path the spike-statistics report is audited against.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, make_op


@dataclass(frozen=True)
class SurrogateSpec:
    """Surrogate sharpness; gamma > 0."""
    gamma: float = 100.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")


_smooth_depth = 0
_RECORDS: list["SpikeRecord"] = []


@contextlib.contextmanager
def smooth_spikes():
    """Replace hard thresholding with its smooth arctan relaxation."""
    global _smooth_depth
    _smooth_depth += 1
    try:
        yield
    finally:
        _smooth_depth -= 1


def smoothing_active() -> bool:
    return _smooth_depth > 0


class SpikeRecord:
    """Counts spikes emitted per tag while the context is open."""

    def __init__(self):
        self.counts: dict[str, int] = {}
        self.sizes: dict[str, int] = {}
        self.order: list[str] = []

    def add(self, tag: str, emitted: int, size: int):
        if tag not in self.counts:
            self.counts[tag] = 0
            self.sizes[tag] = 0
            self.order.append(tag)
        self.counts[tag] += int(emitted)
        self.sizes[tag] += int(size)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def rate(self, tag=None) -> float:
        """Fraction of units that fired, overall or for one tag."""
        if tag is None:
            sz = sum(self.sizes.values())
            return self.total / sz if sz else 0.0
        return self.counts[tag] / self.sizes[tag] if self.sizes.get(tag) else 0.0

    def __enter__(self):
        _RECORDS.append(self)
        return self

    def __exit__(self, *exc):
        _RECORDS.remove(self)
        return False


def surrogate_factor(x: np.ndarray, gamma: float) -> np.ndarray:
    """d/dx of (1/pi)*arctan(gamma*x) + 1/2."""
    return (1.0 / np.pi) * gamma / (1.0 + (gamma * x) ** 2)


def spike(x: Tensor, spec: SurrogateSpec = SurrogateSpec(), tag: str = "spike") -> Tensor:
    """Heaviside step of the (already thresholded) drive, H(0) = 1."""
    gamma = float(spec.gamma)
    if smoothing_active():
        out = (1.0 / np.pi) * np.arctan(gamma * x.data) + 0.5
        out = out.astype(x.data.dtype)
    else:
        out = (x.data >= 0).astype(x.data.dtype)
        for rec in _RECORDS:
            rec.add(tag, int(out.sum()), out.size)

    def backward(g):
        x.accumulate_grad(g * surrogate_factor(x.data, gamma).astype(x.data.dtype))

    return make_op(out, (x,), backward, "spike")
