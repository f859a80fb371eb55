"""Operation counting shared by the tensor primitives and the cost model.

A FlopCounter registered on the active stack receives a dense-op count
from every primitive that executes while it is open.  The per-op
conventions live here so the analytic layer walk in ``costmodel`` and
the instrumented execution path can never drift apart:

  * one multiply-accumulate = 2 FLOPs (matmul, conv, affine)
  * bias adds are folded into the producing op and not counted
  * elementwise arithmetic and activations = 1 op per output element
  * softmax = SOFTMAX_OPS_PER_ELEM per element
  * layer norm = LAYER_NORM_OPS_PER_ELEM per element
  * reductions = one op per input element (+ outputs for a mean)
  * shape ops (reshape, permute, concat, gather, slice) are free

Counters measure the forward pass only; backward work is not recorded.
"""

from __future__ import annotations

SOFTMAX_OPS_PER_ELEM = 5
LAYER_NORM_OPS_PER_ELEM = 8

_ACTIVE: list["FlopCounter"] = []


class FlopCounter:
    """Accumulates dense-op counts, split by op kind and caller tag."""

    def __init__(self):
        self.total = 0
        self.by_kind: dict[str, int] = {}
        self.by_tag: dict[str, int] = {}

    def add(self, kind: str, n: int, tag=None):
        n = int(n)
        self.total += n
        self.by_kind[kind] = self.by_kind.get(kind, 0) + n
        if tag is not None:
            self.by_tag[tag] = self.by_tag.get(tag, 0) + n

    def tagged(self, prefix: str) -> int:
        """Sum of counts whose tag starts with ``prefix``."""
        return sum(n for t, n in self.by_tag.items() if t.startswith(prefix))

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __repr__(self):
        return f"FlopCounter(total={self.total}, kinds={sorted(self.by_kind)})"


def flop_counter() -> FlopCounter:
    """New counter; use as ``with flop_counter() as fc: ...``."""
    return FlopCounter()


def record_flops(kind: str, n: int, tag=None):
    """Report ``n`` dense ops to every active counter.  No-op otherwise."""
    if _ACTIVE:
        for c in _ACTIVE:
            c.add(kind, n, tag)


def counting_active() -> bool:
    return bool(_ACTIVE)
