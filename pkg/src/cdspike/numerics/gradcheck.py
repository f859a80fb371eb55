"""Central-difference gradient verification for the autodiff engine."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NumericsError, Tensor, no_grad


@dataclass
class GradCheckReport:
    max_abs_err: float = 0.0
    max_rel_err: float = 0.0
    checked: int = 0
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def __repr__(self):
        state = "ok" if self.ok else f"{len(self.failures)} failures"
        return (f"GradCheckReport({state}, checked={self.checked}, "
                f"max_abs={self.max_abs_err:.3e}, max_rel={self.max_rel_err:.3e})")


def check_gradients(fn, params, eps: float = 1e-5, atol: float = 1e-6,
                    rtol: float = 1e-4, sample=None, rng=None) -> GradCheckReport:
    """Compare analytic gradients of ``fn()`` against central differences.

    ``fn`` must rebuild its graph from ``params`` on every call and return a
    scalar Tensor, deterministically.  Parameters must be float64; float32
    rounding drowns the finite-difference signal.  ``sample`` caps the number
    of entries perturbed per parameter (random subset when it is exceeded).
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise NumericsError("gradient checks require float64 parameters")
        if not p.requires_grad:
            raise NumericsError("all checked parameters must require gradients")
    if rng is None:
        rng = np.random.default_rng(0)

    for p in params:
        p.zero_grad()
    out = fn()
    if not isinstance(out, Tensor) or out.size != 1:
        raise NumericsError("fn must return a scalar Tensor")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]

    report = GradCheckReport()
    with no_grad():
        for pi, p in enumerate(params):
            flat = p.data.reshape(-1)
            n = flat.size
            if sample is not None and n > sample:
                picks = rng.choice(n, size=sample, replace=False)
            else:
                picks = range(n)
            for j in picks:
                j = int(j)
                orig = flat[j]
                flat[j] = orig + eps
                f_plus = fn().item()
                flat[j] = orig - eps
                f_minus = fn().item()
                flat[j] = orig
                numeric = (f_plus - f_minus) / (2 * eps)
                a = float(analytic[pi].reshape(-1)[j])
                abs_err = abs(a - numeric)
                denom = max(abs(a), abs(numeric))
                rel_err = abs_err / denom if denom > 0 else 0.0
                report.checked += 1
                report.max_abs_err = max(report.max_abs_err, abs_err)
                report.max_rel_err = max(report.max_rel_err, rel_err)
                if abs_err > atol + rtol * denom:
                    report.failures.append(
                        (p.name or f"param{pi}", j, a, numeric))
    return report
