# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: xoshiro256++ bulk draws, im2col/col2im, 2x2 max-pool.

Every routine here has a numpy twin in ``_kernels_py``; both must produce
bit-identical results (same accumulation order in col2im).
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.stdint cimport uint64_t, uint8_t

cnp.import_array()


cdef inline uint64_t _rotl(uint64_t x, int k) nogil:
    return (x << k) | (x >> (64 - k))


def xoshiro_fill(uint64_t[::1] state, Py_ssize_t n):
    """Advance a xoshiro256++ state in place, returning ``n`` raw u64 outputs."""
    out = np.empty(n, dtype=np.uint64)
    cdef uint64_t[::1] o = out
    cdef uint64_t s0 = state[0], s1 = state[1], s2 = state[2], s3 = state[3]
    cdef uint64_t t
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            o[i] = _rotl(s0 + s3, 23) + s0
            t = s1 << 17
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = _rotl(s3, 45)
    state[0] = s0
    state[1] = s1
    state[2] = s2
    state[3] = s3
    return out


cdef inline Py_ssize_t _lo(Py_ssize_t off, int stride, Py_ssize_t n_out) nogil:
    # first output index o with o * stride + off >= 0
    if off >= 0:
        return 0
    cdef Py_ssize_t o = (-off + stride - 1) // stride
    return o if o < n_out else n_out


cdef inline Py_ssize_t _hi(Py_ssize_t off, int stride, Py_ssize_t n_out, Py_ssize_t size) nogil:
    # one past the last output index o with o * stride + off < size
    if off >= size:
        return 0
    cdef Py_ssize_t o = (size - 1 - off) // stride + 1
    return o if o < n_out else n_out


def im2col(floating[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t OH = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t OW = (W + 2 * pad - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    cols = np.zeros((C * kh * kw, N * OH * OW), dtype=dtype)
    cdef floating[:, ::1] c = cols
    cdef floating* src
    cdef floating* dst
    cdef Py_ssize_t ch, i, j, n, oh, ow, row, oh0, oh1, ow0, ow1, ih, iw0
    with nogil:
        for ch in range(C):
            for i in range(kh):
                oh0 = _lo(i - pad, stride, OH)
                oh1 = _hi(i - pad, stride, OH, H)
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    ow0 = _lo(j - pad, stride, OW)
                    ow1 = _hi(j - pad, stride, OW, W)
                    for n in range(N):
                        for oh in range(oh0, oh1):
                            ih = oh * stride + i - pad
                            iw0 = j - pad
                            src = &x[n, ch, ih, 0]
                            dst = &c[row, (n * OH + oh) * OW]
                            if stride == 1:
                                for ow in range(ow0, ow1):
                                    dst[ow] = src[ow + iw0]
                            else:
                                for ow in range(ow0, ow1):
                                    dst[ow] = src[ow * stride + iw0]
    return cols


def col2im(floating[:, ::1] cols, Py_ssize_t N, Py_ssize_t C, Py_ssize_t H,
           Py_ssize_t W, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t OH = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t OW = (W + 2 * pad - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((N, C, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] p = out
    cdef floating* src
    cdef floating* dst
    cdef Py_ssize_t ch, i, j, n, oh, ow, row, oh0, oh1, ow0, ow1, ih, iw0
    # (i, j) outermost per output cell: same summation order as the numpy twin
    with nogil:
        for i in range(kh):
            oh0 = _lo(i - pad, stride, OH)
            oh1 = _hi(i - pad, stride, OH, H)
            for j in range(kw):
                ow0 = _lo(j - pad, stride, OW)
                ow1 = _hi(j - pad, stride, OW, W)
                iw0 = j - pad
                for ch in range(C):
                    row = (ch * kh + i) * kw + j
                    for n in range(N):
                        for oh in range(oh0, oh1):
                            ih = oh * stride + i - pad
                            dst = &p[n, ch, ih, 0]
                            src = &cols[row, (n * OH + oh) * OW]
                            if stride == 1:
                                for ow in range(ow0, ow1):
                                    dst[ow + iw0] += src[ow]
                            else:
                                for ow in range(ow0, ow1):
                                    dst[ow * stride + iw0] += src[ow]
    return out


def maxpool2x2_forward(floating[:, :, :, ::1] x):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t OH = x.shape[2] // 2, OW = x.shape[3] // 2
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((N, C, OH, OW), dtype=dtype)
    arg = np.empty((N, C, OH, OW), dtype=np.uint8)
    cdef floating[:, :, :, ::1] o = out
    cdef uint8_t[:, :, :, ::1] a = arg
    cdef Py_ssize_t n, ch, i, j
    cdef floating best, v
    cdef uint8_t k
    with nogil:
        for n in range(N):
            for ch in range(C):
                for i in range(OH):
                    for j in range(OW):
                        best = x[n, ch, 2 * i, 2 * j]
                        k = 0
                        v = x[n, ch, 2 * i, 2 * j + 1]
                        if v > best:
                            best = v
                            k = 1
                        v = x[n, ch, 2 * i + 1, 2 * j]
                        if v > best:
                            best = v
                            k = 2
                        v = x[n, ch, 2 * i + 1, 2 * j + 1]
                        if v > best:
                            best = v
                            k = 3
                        o[n, ch, i, j] = best
                        a[n, ch, i, j] = k
    return out, arg


def maxpool2x2_backward(floating[:, :, :, ::1] dout, uint8_t[:, :, :, ::1] arg,
                        Py_ssize_t H, Py_ssize_t W):
    cdef Py_ssize_t N = dout.shape[0], C = dout.shape[1]
    cdef Py_ssize_t OH = dout.shape[2], OW = dout.shape[3]
    dtype = np.float32 if floating is float else np.float64
    dx = np.zeros((N, C, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] d = dx
    cdef Py_ssize_t n, ch, i, j
    cdef uint8_t k
    with nogil:
        for n in range(N):
            for ch in range(C):
                for i in range(OH):
                    for j in range(OW):
                        k = arg[n, ch, i, j]
                        d[n, ch, 2 * i + (k >> 1), 2 * j + (k & 1)] = dout[n, ch, i, j]
    return dx


def bn_train_forward(floating[:, :, :, ::1] x, floating[::1] gamma, floating[::1] beta, double eps):
    """Batch-statistics normalisation; returns (out, xhat, mean, biased var, inv_std)."""
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((N, C, x.shape[2], x.shape[3]), dtype=dtype)
    xhat = np.empty_like(out)
    mean = np.empty(C, dtype=dtype)
    var = np.empty(C, dtype=dtype)
    inv = np.empty(C, dtype=dtype)
    cdef floating[:, :, :, ::1] o = out
    cdef floating[:, :, :, ::1] xh = xhat
    cdef floating[::1] mv = mean, vv = var, iv = inv
    cdef Py_ssize_t n, c, k
    cdef double s, d, m, cnt = N * HW
    cdef floating fm, fi, fg, fb, t
    cdef floating* px
    cdef floating* po
    cdef floating* ph
    with nogil:
        for c in range(C):
            s = 0.0
            for n in range(N):
                px = &x[n, c, 0, 0]
                for k in range(HW):
                    s += px[k]
            m = s / cnt
            s = 0.0
            for n in range(N):
                px = &x[n, c, 0, 0]
                for k in range(HW):
                    d = px[k] - m
                    s += d * d
            fm = <floating>m
            mv[c] = fm
            vv[c] = <floating>(s / cnt)
            fi = <floating>(1.0 / (s / cnt + eps) ** 0.5)
            iv[c] = fi
            fg = gamma[c]
            fb = beta[c]
            for n in range(N):
                px = &x[n, c, 0, 0]
                ph = &xh[n, c, 0, 0]
                po = &o[n, c, 0, 0]
                for k in range(HW):
                    t = (px[k] - fm) * fi
                    ph[k] = t
                    po[k] = t * fg + fb
    return out, xhat, mean, var, inv


def bn_backward(floating[:, :, :, ::1] g, floating[:, :, :, ::1] xhat, floating[::1] gamma,
                floating[::1] inv_std, bint train, bint need_dx):
    """Returns (dx or None, dgamma, dbeta)."""
    cdef Py_ssize_t N = g.shape[0], C = g.shape[1], HW = g.shape[2] * g.shape[3]
    dtype = np.float32 if floating is float else np.float64
    dgamma = np.empty(C, dtype=dtype)
    dbeta = np.empty(C, dtype=dtype)
    dx = np.empty((N, C, g.shape[2], g.shape[3]), dtype=dtype) if need_dx else None
    cdef floating[::1] dg = dgamma, db = dbeta
    cdef floating[:, :, :, ::1] d
    if need_dx:
        d = dx
    cdef Py_ssize_t n, c, k
    cdef double sg, sgx, cnt = N * HW
    cdef floating a, b, sc
    cdef floating* pg
    cdef floating* ph
    cdef floating* pd
    with nogil:
        for c in range(C):
            sg = 0.0
            sgx = 0.0
            for n in range(N):
                pg = &g[n, c, 0, 0]
                ph = &xhat[n, c, 0, 0]
                for k in range(HW):
                    sg += pg[k]
                    sgx += pg[k] * ph[k]
            dg[c] = <floating>sgx
            db[c] = <floating>sg
            if not need_dx:
                continue
            sc = gamma[c] * inv_std[c]
            if train:
                a = <floating>(sg / cnt)
                b = <floating>(sgx / cnt)
            else:
                a = 0
                b = 0
            for n in range(N):
                pg = &g[n, c, 0, 0]
                ph = &xhat[n, c, 0, 0]
                pd = &d[n, c, 0, 0]
                for k in range(HW):
                    pd[k] = (pg[k] - a - ph[k] * b) * sc
    return dx, dgamma, dbeta
