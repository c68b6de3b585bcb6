"""Pure NumPy implementations of the convolution kernels.

Used when the compiled ``_ckernels`` extension is missing or when
``STVID_PURE_PYTHON=1`` is set. Every function here has an identically named
counterpart in ``_ckernels.pyx``.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_forward(x, k, ph, pw):
    kh, kw = k.shape[2], k.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # N,C,H',W',kh,kw
    out = np.tensordot(cols, k, axes=([1, 4, 5], [1, 2, 3]))  # N,H',W',O
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward(x, k, g, ph, pw):
    kh, kw = k.shape[2], k.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    gk = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))  # O,C,kh,kw
    # full correlation of g with the flipped, transposed kernel
    kf = np.ascontiguousarray(k[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    gx = conv2d_forward(g, kf, kh - 1 - ph, kw - 1 - pw)
    return gx, np.ascontiguousarray(gk)


def conv1d_time_forward(x, k, pad):
    T = x.shape[0]
    kt = k.shape[2]
    xp = np.pad(x, ((pad, pad), (0, 0), (0, 0), (0, 0)))
    t_out = T + 2 * pad - kt + 1
    out = np.zeros((t_out, k.shape[0]) + x.shape[2:], dtype=np.result_type(x, k))
    for q in range(kt):
        out += np.einsum("oc,tchw->tohw", k[:, :, q], xp[q:q + t_out])
    return out


def conv1d_time_backward(x, k, g, pad):
    T = x.shape[0]
    kt = k.shape[2]
    t_out = g.shape[0]
    xp = np.pad(x, ((pad, pad), (0, 0), (0, 0), (0, 0)))
    gxp = np.zeros_like(xp)
    gk = np.empty_like(k)
    for q in range(kt):
        gxp[q:q + t_out] += np.einsum("oc,tohw->tchw", k[:, :, q], g)
        gk[:, :, q] = np.einsum("tohw,tchw->oc", g, xp[q:q + t_out])
    return np.ascontiguousarray(gxp[pad:pad + T]), gk
