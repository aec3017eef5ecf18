"""Reverse-mode autodiff over numpy arrays, sized for a small residual CNN.

Ops keep the dtype of their inputs: float32 for training, float64 when a test
wants finite-difference gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, MutableMapping, Sequence

import numpy as np

from refinelab import kernels

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    pass


class GraphConsumedError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, path: str):
        super().__init__(f"non-finite gradient for parameter {path!r}")
        self.path = path


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_spent")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._spent = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def _accumulate(self, g: np.ndarray, owned: bool = False) -> None:
        # owned: g is a fresh array nobody else references, safe to keep as-is
        if self.grad is None:
            if owned and g.dtype == self.data.dtype and g.flags.writeable:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Populate ``.grad`` on every reachable tensor that requires grad."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._spent:
            raise GraphConsumedError("backward already ran on this graph; run the forward pass again")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in order:
            # free the graph; interior grads are not needed afterwards
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._spent = True
        self._spent = True


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- elementwise / reshaping ------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Residual sum of two same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _result(a.data + b.data, (a, b), backward)


add_residual = add


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _result(a.data * b.data, (a, b), backward)


def tsum(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(np.broadcast_to(g, a.shape))

    return _result(np.asarray(a.data.sum(), dtype=a.dtype), (a,), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward(g):
        x._accumulate(g * (out > 0), owned=True)

    return _result(out, (x,), backward)


def flatten(x: Tensor) -> Tensor:
    shape = x.shape

    def backward(g):
        x._accumulate(g.reshape(shape))

    return _result(x.data.reshape(shape[0], -1), (x,), backward)


def maxpool2x2(x: Tensor) -> Tensor:
    if x.data.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError(f"maxpool2x2 needs NCHW with H, W >= 2, got {x.shape}")
    H, W = x.shape[2], x.shape[3]
    out, arg = kernels.maxpool2x2_forward(np.ascontiguousarray(x.data))

    def backward(g):
        x._accumulate(kernels.maxpool2x2_backward(np.ascontiguousarray(g), arg, H, W), owned=True)

    return _result(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool needs NCHW, got {x.shape}")
    N, C, H, W = x.shape
    scale = x.dtype.type(1.0 / (H * W))

    def backward(g):
        x._accumulate(np.broadcast_to((g * scale)[:, :, None, None], x.shape))

    return _result(x.data.mean(axis=(2, 3), dtype=x.dtype), (x,), backward)


# -- layers ------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Bias-free 2-D convolution (cross-correlation) of NCHW by OIHW."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIHW weight, got {x.shape} and {weight.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} padding={padding}")
    N, C, H, W = x.shape
    O, Ci, kh, kw = weight.shape
    if C != Ci:
        raise ShapeError(f"conv2d: input has {C} channels but weight expects {Ci}")
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: padded input {H + 2 * padding}x{W + 2 * padding} smaller than kernel {kh}x{kw}"
        )
    OH = (H + 2 * padding - kh) // stride + 1
    OW = (W + 2 * padding - kw) // stride + 1
    if OH <= 0 or OW <= 0:
        raise ShapeError("conv2d: zero-size output")
    xd = np.ascontiguousarray(x.data)
    if weight.dtype != xd.dtype:
        raise ShapeError(f"conv2d: dtype mismatch {xd.dtype} vs {weight.dtype}")
    cols = kernels.im2col(xd, kh, kw, stride, padding)
    w2 = weight.data.reshape(O, -1)
    out = (w2 @ cols).reshape(O, N, OH, OW).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(O, -1)
        if weight.requires_grad:
            weight._accumulate((g2 @ cols.T).reshape(weight.shape), owned=True)
        if x.requires_grad:
            dcols = np.ascontiguousarray(w2.T @ g2)
            x._accumulate(kernels.col2im(dcols, N, C, H, W, kh, kw, stride, padding), owned=True)

    return _result(out, (x, weight), backward)


@dataclass
class BatchNormState:
    """Per-channel affine parameters plus running statistics of one BN layer."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPS

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(
            np.ones(channels, dtype),
            np.zeros(channels, dtype),
            np.zeros(channels, dtype),
            np.ones(channels, dtype),
        )

    def __post_init__(self):
        c = self.gamma.shape
        if not (self.beta.shape == self.running_mean.shape == self.running_var.shape == c):
            raise ShapeError("BatchNormState: gamma/beta/running stats lengths differ")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("BatchNormState: momentum must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ValueError("BatchNormState: epsilon must be positive")


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Batch normalisation over (N, H, W) per channel.

    In train mode the running statistics are updated in place:
    ``running <- (1 - momentum) * running + momentum * batch`` with the
    unbiased batch variance. Eval mode reads them and mutates nothing.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d expects NCHW, got {x.shape}")
    N, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,) or running_mean.shape != (C,) or running_var.shape != (C,):
        raise ShapeError(f"batchnorm2d: parameters do not match {C} channels")
    dt = x.dtype.type
    shape = (1, C, 1, 1)
    xd = np.ascontiguousarray(x.data)
    g_arr = np.ascontiguousarray(gamma.data, dtype=x.dtype)
    if train:
        m = N * H * W
        if m < 2:
            raise ShapeError("batchnorm2d: train mode needs more than one value per channel")
        out, xhat, mean, var, inv_std = kernels.bn_train_forward(
            xd, g_arr, np.ascontiguousarray(beta.data, dtype=x.dtype), eps
        )
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        inv_std = (dt(1.0) / np.sqrt(running_var.astype(x.dtype) + dt(eps))).astype(x.dtype)
        xhat = (xd - running_mean.astype(x.dtype).reshape(shape)) * inv_std.reshape(shape)
        out = xhat * g_arr.reshape(shape) + beta.data.astype(x.dtype).reshape(shape)

    def backward(g):
        dx, dgamma, dbeta = kernels.bn_backward(
            np.ascontiguousarray(g), xhat, g_arr, inv_std, train, x.requires_grad
        )
        if gamma.requires_grad:
            gamma._accumulate(dgamma)
        if beta.requires_grad:
            beta._accumulate(dbeta)
        if x.requires_grad:
            x._accumulate(dx, owned=True)

    return _result(out, (x, gamma, beta), backward)


def batchnorm_state(x: Tensor, state: BatchNormState, train: bool) -> Tensor:
    """Convenience wrapper running :func:`batchnorm2d` against a state object."""
    return batchnorm2d(
        x,
        Tensor(state.gamma),
        Tensor(state.beta),
        state.running_mean,
        state.running_var,
        train,
        state.momentum,
        state.epsilon,
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match {weight.shape[0]} outputs")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if weight.requires_grad:
            weight._accumulate(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))
        if x.requires_grad:
            x._accumulate(g @ weight.data)

    return _result(out, parents, backward)


# -- losses ------------------------------------------------------------------


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects N x C logits, got {logits.shape}")
    N, C = logits.shape
    if C < 2:
        raise ShapeError("softmax_cross_entropy needs at least two classes")
    if labels.shape != (N,):
        raise ShapeError(f"expected {N} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    logp = _log_softmax(logits.data)
    rows = np.arange(N)
    loss = -logp[rows, labels].mean()
    loss = max(loss, 0.0)

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        logits._accumulate(p * (g / N))

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def pair_index(rows: int) -> np.ndarray:
    """Partner row of each anchor when views are laid out as (0,1), (2,3), ..."""
    return np.arange(rows) ^ 1


def nt_xent(z: Tensor, temperature: float) -> Tensor:
    """NT-Xent contrastive loss over ``2N`` rows holding N consecutive view pairs."""
    if z.data.ndim != 2:
        raise ShapeError(f"nt_xent expects a 2N x p matrix, got {z.shape}")
    rows = z.shape[0]
    if rows == 0 or rows % 2:
        raise ShapeError(f"nt_xent needs an even, non-zero row count, got {rows}")
    if not temperature > 0:
        raise ValueError("nt_xent temperature must be positive")
    norms = np.sqrt((z.data * z.data).sum(axis=1, keepdims=True))
    if np.any(norms == 0):
        raise ValueError("nt_xent: zero-norm embedding row (cosine undefined)")
    zn = z.data / norms
    sim = (zn @ zn.T) / z.dtype.type(temperature)
    idx = np.arange(rows)
    pos = pair_index(rows)
    masked = sim.copy()
    masked[idx, idx] = -np.inf
    mx = masked.max(axis=1, keepdims=True)
    ex = np.exp(masked - mx)
    denom = ex.sum(axis=1, keepdims=True)
    lse = (np.log(denom) + mx)[:, 0]
    per_anchor = lse - sim[idx, pos]
    loss = max(float(per_anchor.mean()), 0.0)

    def backward(g):
        gs = ex / denom
        gs[idx, pos] -= 1.0
        gs *= g / rows
        dzn = (gs + gs.T) @ zn / z.dtype.type(temperature)
        dz = (dzn - zn * (dzn * zn).sum(axis=1, keepdims=True)) / norms
        z._accumulate(dz)

    return _result(np.asarray(loss, dtype=z.dtype), (z,), backward)


# -- optimisation ------------------------------------------------------------


def sgd_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    velocity: MutableMapping[str, np.ndarray] | None = None,
) -> MutableMapping[str, np.ndarray]:
    """In-place SGD with heavy-ball momentum and L2 weight decay.

    ``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr * v``.
    Returns the velocity map so callers can thread it through steps.
    """
    if velocity is None:
        velocity = {}
    missing = set(params) - set(grads)
    if missing:
        raise KeyError(f"no gradient for {sorted(missing)[0]!r}")
    for path, p in params.items():
        g = grads[path]
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(path)
        step = g + weight_decay * p if weight_decay else g.astype(p.dtype, copy=True)
        v = velocity.get(path)
        if v is None:
            v = step.astype(p.dtype, copy=False)
        else:
            v *= momentum
            v += step
        velocity[path] = v
        if lr != 0:
            p -= lr * v
    return velocity


def collect_grads(leaves: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of parameter leaves; unreached leaves get zeros."""
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}


def params_as_leaves(arrays: Mapping[str, np.ndarray], trainable: Iterable[str] | None = None) -> dict[str, Tensor]:
    keys = set(arrays) if trainable is None else set(trainable)
    return {k: Tensor(a, requires_grad=k in keys) for k, a in arrays.items()}
