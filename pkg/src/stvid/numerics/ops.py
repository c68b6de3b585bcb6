"""Differentiable ops.

Shapes follow the library conventions: image batches are ``[N, C, H, W]`` and
video activations are ``[T, C, H, W]`` (time-major, so a clip is a batch of
frames for every spatial op). There is no implicit broadcasting; the only
exceptions are :func:`scale` (scalar times tensor) and :func:`add_channel`
(a per-channel bias, optionally per batch item).
"""
from __future__ import annotations

import math

import numpy as np

from . import kernels
from .tensor import Tensor, as_tensor, make_node


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    return make_node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return make_node(a.data * s, (a,), lambda g: (g * s,), "scale")


def square(a) -> Tensor:
    a = as_tensor(a)
    return make_node(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def add_channel(x, v) -> Tensor:
    """Add a per-channel vector to ``x`` of shape ``[N, C, ...]``.

    ``v`` is ``[C]`` (shared by all items), ``[1, C]`` or ``[N, C]``.
    """
    x, v = as_tensor(x), as_tensor(v)
    if x.ndim < 2:
        raise ValueError(f"add_channel: x must have a channel axis, got {x.shape}")
    N, C = x.shape[0], x.shape[1]
    if v.ndim == 1:
        if v.shape[0] != C:
            raise ValueError(f"add_channel: channel axis {C} vs bias {v.shape}")
        vb = v.data.reshape((1, C) + (1,) * (x.ndim - 2))
    elif v.ndim == 2 and v.shape[1] == C and v.shape[0] in (1, N):
        vb = v.data.reshape(v.shape + (1,) * (x.ndim - 2))
    else:
        raise ValueError(f"add_channel: bias {v.shape} incompatible with x {x.shape}")
    spatial = tuple(range(2, x.ndim))

    def backward(g):
        gv = g.sum(axis=spatial) if spatial else g
        if v.ndim == 1 or v.shape[0] == 1:
            gv = gv.sum(axis=0).reshape(v.shape)
        return g, gv

    return make_node(x.data + vb, (x, v), backward, "add_channel")


def silu(x) -> Tensor:
    x = as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def backward(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return make_node(out, (x,), backward, "silu")


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return make_node(out, (x,), backward, "sum")


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis), 1.0 / count)


def mse(a, b) -> Tensor:
    return mean(square(sub(a, b)))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return make_node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return make_node(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def concat(tensors, axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channel axis by default)."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat: no tensors")
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ValueError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    out = np.concatenate([t.data for t in ts], axis=axis)

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, sizes, axis=axis))

    return make_node(out, ts, backward, "concat")


def matmul(a, b) -> Tensor:
    """``a @ b`` for 2-D ``b`` and 2-D or batched 3-D ``a``, or matching 3-D batches."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim >= 2 else 0]:
        raise ValueError(f"matmul: inner dims differ {a.shape} @ {b.shape}")
    if b.ndim == 3 and (a.ndim != 3 or a.shape[0] != b.shape[0]):
        raise ValueError(f"matmul: batch dims differ {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2 and a.ndim == 3:
            gb = np.tensordot(a.data, g, axes=([0, 1], [0, 1]))
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return make_node(out, (a, b), backward, "matmul")


def _pad2(pad):
    if isinstance(pad, (tuple, list)):
        return int(pad[0]), int(pad[1])
    return int(pad), int(pad)


def conv2d(x, k, pad=0) -> Tensor:
    """Cross-correlation of ``x[N,C,H,W]`` with ``k[O,C,kh,kw]`` under zero padding."""
    x, k = as_tensor(x), as_tensor(k)
    if x.ndim != 4 or k.ndim != 4:
        raise ValueError(f"conv2d: expected x[N,C,H,W], k[O,C,kh,kw]; got {x.shape}, {k.shape}")
    if x.shape[1] != k.shape[1]:
        raise ValueError(f"conv2d: channel axis C of x ({x.shape[1]}) != C of k ({k.shape[1]})")
    kh, kw = k.shape[2], k.shape[3]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel extents must be odd, got kh={kh}, kw={kw}")
    ph, pw = _pad2(pad)
    if x.shape[2] + 2 * ph < kh or x.shape[3] + 2 * pw < kw:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded H,W of {x.shape}")
    out = kernels.conv2d_forward(x.data, k.data, ph, pw)

    def backward(g):
        return kernels.conv2d_backward(x.data, k.data, g, ph, pw)

    return make_node(out, (x, k), backward, "conv2d")


def conv1d_time(x, k, pad: int = 0) -> Tensor:
    """Convolve ``x[T,C,H,W]`` along T with ``k[O,C,kt]``, independently per spatial site."""
    x, k = as_tensor(x), as_tensor(k)
    if x.ndim != 4 or k.ndim != 3:
        raise ValueError(f"conv1d_time: expected x[T,C,H,W], k[O,C,kt]; got {x.shape}, {k.shape}")
    if x.shape[1] != k.shape[1]:
        raise ValueError(f"conv1d_time: channel axis C of x ({x.shape[1]}) != C of k ({k.shape[1]})")
    kt = k.shape[2]
    if kt % 2 == 0:
        raise ValueError(f"conv1d_time: kt must be odd, got {kt}")
    pad = int(pad)
    if kt > x.shape[0] + 2 * pad:
        raise ValueError(f"conv1d_time: kt={kt} exceeds T+2*pad={x.shape[0] + 2 * pad}")
    out = kernels.conv1d_time_forward(x.data, k.data, pad)

    def backward(g):
        return kernels.conv1d_time_backward(x.data, k.data, g, pad)

    return make_node(out, (x, k), backward, "conv1d_time")


def softmax_rows(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def attention(q, k, v) -> Tensor:
    """softmax(q kᵀ / sqrt(D)) v over ``[L, D]`` or batched ``[B, L, D]`` inputs."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if not (q.shape == k.shape == v.shape) or q.ndim not in (2, 3):
        raise ValueError(f"attention: q,k,v must share shape [L,D] or [B,L,D]; got {q.shape}, {k.shape}, {v.shape}")
    if q.shape[-2] == 0:
        raise ValueError("attention: sequence length L must be positive")
    c = 1.0 / math.sqrt(q.shape[-1])
    p = softmax_rows(np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * c)
    out = np.matmul(p, v.data)

    def backward(g):
        gv = np.matmul(np.swapaxes(p, -1, -2), g)
        gp = np.matmul(g, np.swapaxes(v.data, -1, -2))
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * c
        gq = np.matmul(gs, k.data)
        gk = np.matmul(np.swapaxes(gs, -1, -2), q.data)
        return gq, gk, gv

    return make_node(out, (q, k, v), backward, "attention")


def resize_nearest(x, axis: int, mode: str) -> Tensor:
    """Nearest-neighbour resize by 2 along ``axis``: 'down' keeps even indices, 'up' repeats."""
    x = as_tensor(x)
    axis = axis % x.ndim
    n = x.shape[axis]
    if mode == "down":
        if n % 2:
            raise ValueError(f"resize_nearest: odd extent {n} on axis {axis} cannot be halved")
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(0, None, 2)
        idx = tuple(idx)
        out = np.ascontiguousarray(x.data[idx])

        def backward(g):
            gx = np.zeros_like(x.data)
            gx[idx] = g
            return (gx,)
    elif mode == "up":
        out = np.repeat(x.data, 2, axis=axis)

        def backward(g):
            shp = list(x.shape)
            shp.insert(axis + 1, 2)
            return (g.reshape(shp).sum(axis=axis + 1),)
    else:
        raise ValueError(f"resize_nearest: mode must be 'up' or 'down', got {mode!r}")
    return make_node(out, (x,), backward, f"resize_{mode}")


def group_norm(x, groups: int, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize ``x[N,C,...]`` over each (item, channel group); affine per channel."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    N, C = x.shape[0], x.shape[1]
    if C % groups:
        raise ValueError(f"group_norm: C={C} not divisible by groups={groups}")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"group_norm: gamma/beta must be [{C}], got {gamma.shape}, {beta.shape}")
    xg = x.data.reshape(N, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (xc * rstd).reshape(x.shape)
    cshape = (1, C) + (1,) * (x.ndim - 2)
    out = xhat * gamma.data.reshape(cshape) + beta.data.reshape(cshape)
    red = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        ggamma = (g * xhat).sum(axis=red)
        gbeta = g.sum(axis=red)
        gh = (g * gamma.data.reshape(cshape)).reshape(N, groups, -1)
        xh = xhat.reshape(N, groups, -1)
        gx = rstd * (gh - gh.mean(axis=2, keepdims=True) - xh * (gh * xh).mean(axis=2, keepdims=True))
        return gx.reshape(x.shape), ggamma, gbeta

    return make_node(out, (x, gamma, beta), backward, "group_norm")
