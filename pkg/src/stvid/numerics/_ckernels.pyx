# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels.

Same call signatures and results as ``_kernels_py``. conv2d lowers to
im2col/col2im loops plus one BLAS matmul; the temporal convolution is a direct
loop nest whose innermost loop walks a contiguous spatial row.
"""
import numpy as np

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _imax(Py_ssize_t a, Py_ssize_t b) nogil:
    return a if a > b else b


cdef inline Py_ssize_t _imin(Py_ssize_t a, Py_ssize_t b) nogil:
    return a if a < b else b


cdef void _im2col(real[:, :, :, ::1] x, real[:, :, ::1] cols, Py_ssize_t KH, Py_ssize_t KW,
                  Py_ssize_t ph, Py_ssize_t pw, Py_ssize_t Ho, Py_ssize_t Wo) noexcept nogil:
    # cols: (C*KH*KW, N, Ho*Wo), zero-filled by the caller
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t n, c, a, b, i, j, i0, i1, j0, j1, di, dj, r
    for c in range(C):
        for a in range(KH):
            di = a - ph
            i0 = _imax(0, -di)
            i1 = _imin(Ho, H - di)
            for b in range(KW):
                dj = b - pw
                j0 = _imax(0, -dj)
                j1 = _imin(Wo, W - dj)
                r = (c * KH + a) * KW + b
                for n in range(N):
                    for i in range(i0, i1):
                        for j in range(j0, j1):
                            cols[r, n, i * Wo + j] = x[n, c, i + di, j + dj]


cdef void _col2im(real[:, :, ::1] cols, real[:, :, :, ::1] gx, Py_ssize_t KH, Py_ssize_t KW,
                  Py_ssize_t ph, Py_ssize_t pw, Py_ssize_t Ho, Py_ssize_t Wo) noexcept nogil:
    cdef Py_ssize_t N = gx.shape[0], C = gx.shape[1], H = gx.shape[2], W = gx.shape[3]
    cdef Py_ssize_t n, c, a, b, i, j, i0, i1, j0, j1, di, dj, r
    for c in range(C):
        for a in range(KH):
            di = a - ph
            i0 = _imax(0, -di)
            i1 = _imin(Ho, H - di)
            for b in range(KW):
                dj = b - pw
                j0 = _imax(0, -dj)
                j1 = _imin(Wo, W - dj)
                r = (c * KH + a) * KW + b
                for n in range(N):
                    for i in range(i0, i1):
                        for j in range(j0, j1):
                            gx[n, c, i + di, j + dj] += cols[r, n, i * Wo + j]


def _cols(x, Py_ssize_t KH, Py_ssize_t KW, Py_ssize_t ph, Py_ssize_t pw):
    N, C, H, W = x.shape
    Ho = H + 2 * ph - KH + 1
    Wo = W + 2 * pw - KW + 1
    cols = np.zeros((C * KH * KW, N, Ho * Wo), dtype=x.dtype)
    if x.dtype == np.float32:
        _im2col[float](x, cols, KH, KW, ph, pw, Ho, Wo)
    else:
        _im2col[double](x, cols, KH, KW, ph, pw, Ho, Wo)
    return cols, Ho, Wo


def conv2d_forward(x, k, Py_ssize_t ph, Py_ssize_t pw):
    x = np.ascontiguousarray(x)
    k = np.ascontiguousarray(k, dtype=x.dtype)
    N = x.shape[0]
    O, C, KH, KW = k.shape
    cols, Ho, Wo = _cols(x, KH, KW, ph, pw)
    out = np.dot(k.reshape(O, -1), cols.reshape(C * KH * KW, -1))  # O, N*Ho*Wo
    return np.ascontiguousarray(out.reshape(O, N, Ho, Wo).transpose(1, 0, 2, 3))


def conv2d_backward(x, k, g, Py_ssize_t ph, Py_ssize_t pw):
    x = np.ascontiguousarray(x)
    k = np.ascontiguousarray(k, dtype=x.dtype)
    N = x.shape[0]
    O, C, KH, KW = k.shape
    cols, Ho, Wo = _cols(x, KH, KW, ph, pw)
    g2 = np.ascontiguousarray(np.asarray(g, dtype=x.dtype).transpose(1, 0, 2, 3)).reshape(O, -1)
    ckk = C * KH * KW
    gk = np.dot(g2, cols.reshape(ckk, -1).T).reshape(O, C, KH, KW)
    dcols = np.ascontiguousarray(np.dot(k.reshape(O, -1).T, g2)).reshape(ckk, N, Ho * Wo)
    gx = np.zeros_like(x)
    if x.dtype == np.float32:
        _col2im[float](dcols, gx, KH, KW, ph, pw, Ho, Wo)
    else:
        _col2im[double](dcols, gx, KH, KW, ph, pw, Ho, Wo)
    return gx, gk


cdef void _conv1t_acc(real[:, :, ::1] x, real[:, :, ::1] k, real[:, :, ::1] out,
                      Py_ssize_t pad) noexcept nogil:
    # x: T,C,S  k: O,C,KT  out: To,O,S  (S = flattened H*W)
    cdef Py_ssize_t T = x.shape[0], C = x.shape[1], S = x.shape[2]
    cdef Py_ssize_t O = k.shape[0], KT = k.shape[2], To = out.shape[0]
    cdef Py_ssize_t t, o, c, q, s, src
    cdef real w
    for t in range(To):
        for q in range(KT):
            src = t + q - pad
            if src < 0 or src >= T:
                continue
            for o in range(O):
                for c in range(C):
                    w = k[o, c, q]
                    for s in range(S):
                        out[t, o, s] += w * x[src, c, s]


cdef void _conv1t_back(real[:, :, ::1] x, real[:, :, ::1] k, real[:, :, ::1] g,
                       real[:, :, ::1] gx, real[:, :, ::1] gk, Py_ssize_t pad) noexcept nogil:
    cdef Py_ssize_t T = x.shape[0], C = x.shape[1], S = x.shape[2]
    cdef Py_ssize_t O = k.shape[0], KT = k.shape[2], To = g.shape[0]
    cdef Py_ssize_t t, o, c, q, s, src
    cdef real w, acc
    for t in range(To):
        for q in range(KT):
            src = t + q - pad
            if src < 0 or src >= T:
                continue
            for o in range(O):
                for c in range(C):
                    w = k[o, c, q]
                    acc = 0
                    for s in range(S):
                        gx[src, c, s] += w * g[t, o, s]
                        acc = acc + g[t, o, s] * x[src, c, s]
                    gk[o, c, q] += acc


def conv1d_time_forward(x, k, Py_ssize_t pad):
    x = np.ascontiguousarray(x)
    k = np.ascontiguousarray(k, dtype=x.dtype)
    T, C, H, W = x.shape
    To = T + 2 * pad - k.shape[2] + 1
    out = np.zeros((To, k.shape[0], H * W), dtype=x.dtype)
    x3 = x.reshape(T, C, H * W)
    if x.dtype == np.float32:
        _conv1t_acc[float](x3, k, out, pad)
    else:
        _conv1t_acc[double](x3, k, out, pad)
    return out.reshape(To, k.shape[0], H, W)


def conv1d_time_backward(x, k, g, Py_ssize_t pad):
    x = np.ascontiguousarray(x)
    k = np.ascontiguousarray(k, dtype=x.dtype)
    g = np.ascontiguousarray(g, dtype=x.dtype)
    T, C, H, W = x.shape
    gx = np.zeros((T, C, H * W), dtype=x.dtype)
    gk = np.zeros_like(k)
    x3 = x.reshape(T, C, H * W)
    g3 = g.reshape(g.shape[0], g.shape[1], H * W)
    if x.dtype == np.float32:
        _conv1t_back[float](x3, k, g3, gx, gk, pad)
    else:
        _conv1t_back[double](x3, k, g3, gx, gk, pad)
    return gx.reshape(T, C, H, W), gk
