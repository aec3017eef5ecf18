"""Slow, obviously-correct reference computations used by the tests."""

import math

import numpy as np

from refinelab.tensor import Tensor


def conv2d_direct(x, w, stride, pad):
    N, C, H, W = x.shape
    O, _, kh, kw = w.shape
    OH = (H + 2 * pad - kh) // stride + 1
    OW = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((N, O, OH, OW))
    for n in range(N):
        for o in range(O):
            for i in range(OH):
                for j in range(OW):
                    acc = 0.0
                    for c in range(C):
                        for a in range(kh):
                            for b in range(kw):
                                y, xx = i * stride + a - pad, j * stride + b - pad
                                if 0 <= y < H and 0 <= xx < W:
                                    acc += x[n, c, y, xx] * w[o, c, a, b]
                    out[n, o, i, j] = acc
    return out


def softmax_ce_rows(z, y):
    total = 0.0
    for row, lab in zip(z, y):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[lab]
    return total / len(y)


def nt_xent_pairwise(z, tau):
    rows = len(z)

    def cos(a, b):
        return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))

    total = 0.0
    for i in range(rows):
        j = i + 1 if i % 2 == 0 else i - 1
        num = math.exp(cos(z[i], z[j]) / tau)
        den = sum(math.exp(cos(z[i], z[k]) / tau) for k in range(rows) if k != i)
        total += -math.log(num / den)
    return total / rows


def finite_diff_rel_err(f, arrays, wrt, h=1e-4):
    """Norm-wise relative error between the autodiff gradient and central differences.

    ``f`` maps float64 tensors to a scalar tensor; ``wrt`` indexes ``arrays``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    f(*leaves).backward()
    analytic = leaves[wrt].grad
    numeric = np.zeros_like(arrays[wrt])
    it = np.nditer(arrays[wrt], flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        vals = []
        for sign in (1, -1):
            pert = [a.copy() for a in arrays]
            pert[wrt][idx] += sign * h
            vals.append(f(*[Tensor(p) for p in pert]).item())
        numeric[idx] = (vals[0] - vals[1]) / (2 * h)
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)
