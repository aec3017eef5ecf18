"""Pure numpy/Python versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_MASK = (1 << 64) - 1


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & _MASK


def xoshiro_fill(state, n):
    s0, s1, s2, s3 = (int(v) for v in state)
    out = np.empty(n, dtype=np.uint64)
    for i in range(n):
        out[i] = (_rotl((s0 + s3) & _MASK, 23) + s0) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
    state[0], state[1], state[2], state[3] = s0, s1, s2, s3
    return out


def im2col(x, kh, kw, stride, pad):
    N, C, H, W = x.shape
    oh = (H + 2 * pad - kh) // stride + 1
    ow = (W + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    # (N, C, OH, OW, kh, kw) -> (C, kh, kw, N, OH, OW)
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(C * kh * kw, N * oh * ow)


def col2im(cols, N, C, H, W, kh, kw, stride, pad):
    oh = (H + 2 * pad - kh) // stride + 1
    ow = (W + 2 * pad - kw) // stride + 1
    padded = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    c6 = cols.reshape(C, kh, kw, N, oh, ow)
    for i in range(kh):
        for j in range(kw):
            padded[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += (
                c6[:, i, j].transpose(1, 0, 2, 3)
            )
    if pad == 0:
        return padded
    return np.ascontiguousarray(padded[:, :, pad:pad + H, pad:pad + W])


def maxpool2x2_forward(x):
    N, C, H, W = x.shape
    oh, ow = H // 2, W // 2
    blocks = x[:, :, :2 * oh, :2 * ow].reshape(N, C, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(N, C, oh, ow, 4)
    arg = blocks.argmax(axis=-1).astype(np.uint8)
    out = np.take_along_axis(blocks, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2x2_backward(dout, arg, H, W):
    N, C, oh, ow = dout.shape
    dx = np.zeros((N, C, H, W), dtype=dout.dtype)
    n, c, i, j = np.indices((N, C, oh, ow), sparse=True)
    a = arg.astype(np.intp)
    dx[n, c, 2 * i + (a >> 1), 2 * j + (a & 1)] = dout
    return dx


def bn_train_forward(x, gamma, beta, eps):
    dt = x.dtype
    mean64 = x.mean(axis=(0, 2, 3), dtype=np.float64)
    var64 = ((x - mean64.astype(dt)[None, :, None, None]).astype(np.float64) ** 2).mean(axis=(0, 2, 3))
    mean = mean64.astype(dt)
    inv = (1.0 / np.sqrt(var64 + eps)).astype(dt)
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return out, xhat, mean, var64.astype(dt), inv


def bn_backward(g, xhat, gamma, inv_std, train, need_dx):
    dt = g.dtype
    sg = g.sum(axis=(0, 2, 3), dtype=np.float64)
    sgx = (g * xhat).sum(axis=(0, 2, 3), dtype=np.float64)
    if not need_dx:
        return None, sgx.astype(dt), sg.astype(dt)
    cnt = g.shape[0] * g.shape[2] * g.shape[3]
    sc = (gamma * inv_std)[None, :, None, None]
    if train:
        a = (sg / cnt).astype(dt)[None, :, None, None]
        b = (sgx / cnt).astype(dt)[None, :, None, None]
        dx = (g - a - xhat * b) * sc
    else:
        dx = g * sc
    return dx, sgx.astype(dt), sg.astype(dt)
