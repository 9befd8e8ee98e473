"""Differentiable operators on channels-first tensors.

Convolutions use cross-correlation (no kernel flip). Images are N x C x H x W.
Every operator preserves the floating-point precision of its inputs.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from dceac.autodiff.tape import Tensor, record, unwrap


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    x, y = unwrap(a), unwrap(b)

    def vjp(g, needs):
        return (_unbroadcast(g, x.shape) if needs[0] else None,
                _unbroadcast(g, y.shape) if needs[1] else None)

    return record(x + y, (a, b), vjp)


def sub(a, b):
    x, y = unwrap(a), unwrap(b)

    def vjp(g, needs):
        return (_unbroadcast(g, x.shape) if needs[0] else None,
                _unbroadcast(-g, y.shape) if needs[1] else None)

    return record(x - y, (a, b), vjp)


def mul(a, b):
    x, y = unwrap(a), unwrap(b)

    def vjp(g, needs):
        return (_unbroadcast(g * y, x.shape) if needs[0] else None,
                _unbroadcast(g * x, y.shape) if needs[1] else None)

    return record(x * y, (a, b), vjp)


def scale(a, c: float):
    """Multiply by a constant python scalar."""
    x = unwrap(a)
    c = float(c)

    def vjp(g, needs):
        return (g * c,)

    return record(x * c, (a,), vjp)


def total(a):
    x = unwrap(a)

    def vjp(g, needs):
        return (np.broadcast_to(g, x.shape).copy(),)

    return record(np.asarray(x.sum()), (a,), vjp)


def relu(a):
    x = unwrap(a)
    mask = x > 0

    def vjp(g, needs):
        return (g * mask,)

    return record(x * mask, (a,), vjp)


def sigmoid(a):
    x = unwrap(a)
    s = expit(x)

    def vjp(g, needs):
        return (g * s * (1 - s),)

    return record(s, (a,), vjp)


def global_avg_pool(a):
    """Spatial mean of every feature map: N x C x H x W -> N x C."""
    x = unwrap(a)
    if x.ndim != 4:
        raise ValueError(f"expected N x C x H x W input, got shape {x.shape}")
    n, c, h, w = x.shape
    area = h * w

    def vjp(g, needs):
        return (np.broadcast_to((g / area)[:, :, None, None], x.shape).copy(),)

    return record(x.mean(axis=(2, 3)), (a,), vjp)


def mse_loss(x, r):
    """Mean over samples of the per-sample squared L2 reconstruction error."""
    xa, ra = unwrap(x), unwrap(r)
    if xa.shape != ra.shape:
        raise ValueError(f"shape mismatch: {xa.shape} vs {ra.shape}")
    n = xa.shape[0]
    diff = ra - xa
    value = np.asarray((diff * diff).sum() / n)

    def vjp(g, needs):
        gr = diff * (g * (2.0 / n))
        return (-gr if needs[0] else None, gr if needs[1] else None)

    return record(value, (x, r), vjp)


# -- convolution ------------------------------------------------------------

def _resolve_padding(padding, k):
    if padding == "same":
        return k // 2
    if isinstance(padding, str):
        raise ValueError(f"unknown padding {padding!r}")
    p = int(padding)
    if p < 0:
        raise ValueError("padding must be non-negative")
    return p


def _im2col(xp, k, s, ho, wo):
    # padded channels-last (N, Hp, Wp, C) -> (N*ho*wo, k*k*C)
    n, c = xp.shape[0], xp.shape[3]
    cols = np.empty((n, ho, wo, k, k, c), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :]
    return cols.reshape(n * ho * wo, k * k * c)


def _col2im(cols, shape, k, s, ho, wo):
    # adjoint of _im2col: scatter-add (N*ho*wo, k*k*C) into channels-last (N, Hp, Wp, C)
    n, c = shape[0], shape[3]
    cols = cols.reshape(n, ho, wo, k, k, c)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += cols[:, :, :, i, j, :]
    return out


def _channels_last(x, pad=0):
    n, c, h, w = x.shape
    if not pad:
        return np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    out = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    out[:, pad:pad + h, pad:pad + w, :] = x.transpose(0, 2, 3, 1)
    return out


# Buffers are laid out channels-last in memory (pixels as GEMM rows) and exposed
# as N x C x H x W views; numpy keeps that layout through elementwise ops.

def conv2d(x, kernels, bias=None, stride=1, padding="same"):
    """2-D cross-correlation.

    ``kernels`` is Cout x Cin x k x k. "same" padding means floor(k/2) on
    every side, so the output size is ceil(H / stride) for odd k.
    """
    xa, w = unwrap(x), unwrap(kernels)
    if xa.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernels, got {xa.shape} and {w.shape}")
    n, cin, h, wd = xa.shape
    cout, wcin, k, k2 = w.shape
    if wcin != cin:
        raise ValueError(f"input has {cin} channels but kernels expect {wcin} (input {xa.shape}, kernels {w.shape})")
    if k != k2:
        raise ValueError("only square kernels are supported")
    s = int(stride)
    if s < 1:
        raise ValueError("stride must be >= 1")
    p = _resolve_padding(padding, k)
    if k > h + 2 * p or k > wd + 2 * p:
        raise ValueError(f"kernel {k} larger than padded input {h + 2 * p}x{wd + 2 * p}")
    ho = (h + 2 * p - k) // s + 1
    wo = (wd + 2 * p - k) // s + 1
    xp = _channels_last(xa, p)
    cols = _im2col(xp, k, s, ho, wo)
    wmat = np.ascontiguousarray(w.transpose(0, 2, 3, 1)).reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += unwrap(bias)
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def vjp(g, needs):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gx = gw = gb = None
        if needs[0]:
            dxp = _col2im(gm @ wmat, xp.shape, k, s, ho, wo)
            gx = dxp[:, p:p + h, p:p + wd, :].transpose(0, 3, 1, 2)
        if needs[1]:
            gw = (gm.T @ cols).reshape(cout, k, k, cin).transpose(0, 3, 1, 2)
        if len(needs) > 2 and needs[2]:
            gb = gm.sum(axis=0)
        return gx, gw, gb

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return record(out, parents, vjp)


def conv_transpose2d(x, kernels, bias=None, stride=1, padding=0, output_padding=0):
    """Transposed convolution, the adjoint of :func:`conv2d`.

    ``kernels`` is Cin x Cout x k x k (the same array a conv2d mapping Cout
    channels to Cin would use). Output size is
    (H - 1) * stride + k - 2 * padding + output_padding.
    """
    xa, w = unwrap(x), unwrap(kernels)
    n, cin, h, wd = xa.shape
    wcin, cout, k, _ = w.shape
    if wcin != cin:
        raise ValueError(f"input has {cin} channels but kernels expect {wcin} (input {xa.shape}, kernels {w.shape})")
    s = int(stride)
    if s < 1:
        raise ValueError("stride must be >= 1")
    p = _resolve_padding(padding, k)
    op = int(output_padding)
    if op < 0 or (op > 0 and op >= s):
        raise ValueError("output_padding must be smaller than stride")
    ho = (h - 1) * s + k - 2 * p + op
    wo = (wd - 1) * s + k - 2 * p + op
    if ho < 1 or wo < 1:
        raise ValueError(f"negative or zero output size {ho}x{wo}")
    full = (n, (h - 1) * s + k + op, (wd - 1) * s + k + op, cout)
    xm = _channels_last(xa).reshape(n * h * wd, cin)
    wmat = np.ascontiguousarray(w.transpose(0, 2, 3, 1)).reshape(cin, k * k * cout)
    out = _col2im(xm @ wmat, full, k, s, h, wd)[:, p:p + ho, p:p + wo, :]
    if bias is not None:
        out = out + unwrap(bias)
    out = out.transpose(0, 3, 1, 2)

    def vjp(g, needs):
        gfull = np.zeros(full, dtype=g.dtype)
        gfull[:, p:p + ho, p:p + wo, :] = g.transpose(0, 2, 3, 1)
        gcols = _im2col(gfull, k, s, h, wd)
        gx = gw = gb = None
        if needs[0]:
            gx = (gcols @ wmat.T).reshape(n, h, wd, cin).transpose(0, 3, 1, 2)
        if needs[1]:
            gw = (xm.T @ gcols).reshape(cin, k, k, cout).transpose(0, 3, 1, 2)
        if len(needs) > 2 and needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return record(out, parents, vjp)


def batch_norm(x, scale, shift, running_mean, running_var, training=True, momentum=0.9, eps=1e-3):
    """Per-channel batch normalisation.

    Returns ``(output, (new_running_mean, new_running_var))``. Running
    statistics are returned rather than updated in place; in inference mode
    they come back unchanged. Batch variance is the biased estimator.
    """
    xa = unwrap(x)
    gamma, beta = unwrap(scale), unwrap(shift)
    rm, rv = np.asarray(running_mean), np.asarray(running_var)
    n, c, h, w = xa.shape
    if n * h * w < 1:
        raise ValueError("batch_norm needs at least one value per channel")
    count = n * h * w
    if training:
        mean = xa.mean(axis=(0, 2, 3))
        centered = xa - mean[:, None, None]
        var = (centered * centered).mean(axis=(0, 2, 3))
        new_stats = (momentum * rm + (1 - momentum) * mean, momentum * rv + (1 - momentum) * var)
    else:
        mean, var = rm, rv
        centered = xa - mean[:, None, None]
        new_stats = (rm, rv)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv[:, None, None]
    out = xhat * gamma[:, None, None] + beta[:, None, None]

    def vjp(g, needs):
        gx = None
        if needs[0]:
            dxhat = g * gamma[:, None, None]
            if training:
                sum_d = dxhat.sum(axis=(0, 2, 3))
                sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3))
                gx = (inv / count)[:, None, None] * (
                    count * dxhat - sum_d[:, None, None] - xhat * sum_dx[:, None, None])
            else:
                gx = dxhat * inv[:, None, None]
        gs = (g * xhat).sum(axis=(0, 2, 3)) if needs[1] else None
        gb = g.sum(axis=(0, 2, 3)) if needs[2] else None
        return gx, gs, gb

    return record(out, (x, scale, shift), vjp), new_stats
