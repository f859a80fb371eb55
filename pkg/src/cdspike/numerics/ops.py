"""Differentiable neural-network primitives on top of the tensor engine."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .instrument import LAYER_NORM_OPS_PER_ELEM, SOFTMAX_OPS_PER_ELEM, record_flops
from .tensor import NumericsError, Tensor, make_op


def _pair(v):
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise NumericsError(f"expected a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _pad_spec(padding):
    """Normalize to ((top, bottom), (left, right))."""
    if isinstance(padding, (tuple, list)) and len(padding) == 2 \
            and isinstance(padding[0], (tuple, list)):
        (pt, pb), (pl, pr) = padding
        return (int(pt), int(pb)), (int(pl), int(pr))
    ph, pw = _pair(padding)
    return (ph, ph), (pw, pw)


def conv2d(x: Tensor, w: Tensor, b=None, stride=1, padding=0, tag=None) -> Tensor:
    """2-D cross-correlation, NCHW input, (Cout, Cin, kh, kw) weights.

    Zero padding; asymmetric padding accepted as ((top, bottom), (left, right)).
    Lowered to a single matmul over an im2col buffer.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise NumericsError("conv2d expects NCHW input and OIHW weights")
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise NumericsError(f"conv2d channel mismatch: input {cin}, weights {cin_w}")
    sh, sw = _pair(stride)
    (pt, pb), (pl, pr) = _pad_spec(padding)
    hp, wp = h + pt + pb, wd + pl + pr
    if hp < kh or wp < kw:
        raise NumericsError("conv2d kernel larger than padded input")
    oh = (hp - kh) // sh + 1
    ow = (wp - kw) // sw + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    # (N, C, OH, OW, kh, kw) -> (C*kh*kw, N*OH*OW)
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3))
    cols2 = cols.reshape(cin * kh * kw, n * oh * ow)
    wm = w.data.reshape(cout, cin * kh * kw)
    out2 = wm @ cols2
    out = out2.reshape(cout, n, oh, ow).transpose(1, 0, 2, 3)
    if b is not None:
        if b.shape != (cout,):
            raise NumericsError("conv2d bias must be (Cout,)")
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    record_flops("conv2d", 2 * cin * kh * kw * out.size, tag)

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, n * oh * ow)
        if b is not None:
            b.accumulate_grad(g.sum(axis=(0, 2, 3)))
        w.accumulate_grad((g2 @ cols2.T).reshape(w.shape))
        gcols = (wm.T @ g2).reshape(cin, kh, kw, n, oh, ow)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += \
                    gcols[:, i, j].transpose(1, 0, 2, 3)
        x.accumulate_grad(gxp[:, :, pt:pt + h, pl:pl + wd])

    return make_op(out, parents, backward, "conv2d")


def affine(x: Tensor, w: Tensor, b=None, tag=None) -> Tensor:
    """x @ w + b over the last axis; x (..., din), w (din, dout)."""
    if w.ndim != 2:
        raise NumericsError("affine weights must be 2-D")
    din, dout = w.shape
    if x.shape[-1] != din:
        raise NumericsError(f"affine input dim {x.shape[-1]} != {din}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, din)
    out2 = x2 @ w.data
    if b is not None:
        if b.shape != (dout,):
            raise NumericsError("affine bias must be (dout,)")
        out2 = out2 + b.data
    out = out2.reshape(*lead, dout)
    record_flops("affine", 2 * x2.shape[0] * din * dout, tag)

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, dout)
        if b is not None:
            b.accumulate_grad(g2.sum(axis=0))
        w.accumulate_grad(x2.T @ g2)
        x.accumulate_grad((g2 @ w.data.T).reshape(x.shape))

    return make_op(out, parents, backward, "affine")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise NumericsError("layer_norm scale/shift must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data
    record_flops("layer_norm", LAYER_NORM_OPS_PER_ELEM * x.size)

    def backward(g):
        gamma.accumulate_grad(np.sum(g * xhat, axis=tuple(range(g.ndim - 1))))
        beta.accumulate_grad(np.sum(g, axis=tuple(range(g.ndim - 1))))
        gh = g * gamma.data
        gx = inv / d * (d * gh
                        - gh.sum(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
        x.accumulate_grad(gx)

    return make_op(out, (x, gamma, beta), backward, "layer_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    record_flops("softmax", SOFTMAX_OPS_PER_ELEM * x.size)

    def backward(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        x.accumulate_grad(s * (g - dot))

    return make_op(s, (x,), backward, "softmax")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    record_flops("ewise", x.size)

    def backward(g):
        x.accumulate_grad(g * (x.data > 0))

    return make_op(out, (x,), backward, "relu")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    u = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)
    record_flops("ewise", x.size)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
        d = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
        x.accumulate_grad(g * d)

    return make_op(out, (x,), backward, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    # tanh form is finite for every input
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    record_flops("ewise", x.size)

    def backward(g):
        x.accumulate_grad(g * s * (1.0 - s))

    return make_op(s, (x,), backward, "sigmoid")


def softplus(x: Tensor) -> Tensor:
    a = np.abs(x.data)
    out = np.maximum(x.data, 0) + np.log1p(np.exp(-a))
    record_flops("ewise", x.size)

    def backward(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
        x.accumulate_grad(g * sig)

    return make_op(out, (x,), backward, "softplus")


def index_select(x: Tensor, axis: int, idx) -> Tensor:
    """Gather rows along ``axis`` with an integer index array (repeats allowed)."""
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise NumericsError("index_select needs integer indices")
    axis = axis % x.ndim
    data = np.take(x.data, idx, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        gxs = np.swapaxes(gx, 0, axis) if axis else gx
        gs = np.swapaxes(g, 0, axis) if axis else g
        np.add.at(gxs, idx, gs)
        x.accumulate_grad(gx)

    return make_op(data, (x,), backward, "index_select")


def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping mean pooling on NCHW by an integer factor."""
    f = int(factor)
    n, c, h, w = x.shape
    if f < 1 or h % f or w % f:
        raise NumericsError(f"avg_pool2d factor {f} must divide {h}x{w}")
    out = x.data.reshape(n, c, h // f, f, w // f, f).mean(axis=(3, 5))
    record_flops("reduce", x.size + out.size)

    def backward(g):
        gx = np.repeat(np.repeat(g, f, axis=2), f, axis=3) / (f * f)
        x.accumulate_grad(gx)

    return make_op(out, (x,), backward, "avg_pool2d")


def cross_entropy_logits(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer class labels under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise NumericsError("cross_entropy_logits expects (N, C) logits and (N,) labels")
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise NumericsError("label out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), labels].mean()
    record_flops("loss", 6 * logits.size)

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        logits.accumulate_grad(g * p / n)

    return make_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward,
                   "cross_entropy")
