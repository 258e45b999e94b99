"""Small reverse-mode autodiff over float64 numpy arrays.

Only the operations the residual flow network needs are provided.  Every op
accepts an optional leading batch axis (``N x C x H x W`` for images,
``N x n`` for vectors).  A graph is recorded implicitly through each output's
parent links; :func:`backward` walks it once in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.99


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return hadamard(self, other)

    def __sub__(self, other):
        return add(self, hadamard(as_tensor(other), -1.0))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced in forward pass")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), back)


def hadamard(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def back(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), back)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0  # subgradient at 0 is 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh_op(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mse_loss(pred, target) -> Tensor:
    """Mean over all elements of the squared difference."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def back(g):
        gp = g * 2.0 * diff / n
        return gp, (-gp if target.requires_grad else None)

    return _node(np.asarray(np.mean(diff * diff)), (pred, target), back)


# --- linear layers --------------------------------------------------------

def fully_connected(x, weight, bias) -> Tensor:
    """``weight @ x + bias`` for ``x`` of shape (n,) or (N, n); weight is (m, n)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.data.ndim != 2 or x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ValueError(f"fully_connected shapes x={x.shape} w={weight.shape} b={bias.shape}")
    out = x.data @ weight.data.T + bias.data

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        gx = (g @ weight.data) if x.requires_grad else None
        return gx, g2.T @ x2, g2.sum(axis=0)

    return _node(out, (x, weight, bias), back)


def _same_pads(k: int) -> tuple[int, int]:
    lo = (k - 1) // 2
    return lo, k - 1 - lo


def _im2col(x: np.ndarray, k: int, pad_lo: int, pad_hi: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C*k*k, H*W) patches of the zero-padded input."""
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + pad_lo + pad_hi, w + pad_lo + pad_hi))
    xp[:, :, pad_lo:pad_lo + h, pad_lo:pad_lo + w] = x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))      # (N, C, H, W, k, k)
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, h * w)


def conv2d_same(x, weight, bias) -> Tensor:
    """Stride-1 zero-padded convolution preserving spatial size.

    ``x`` is (C_in, H, W) or (N, C_in, H, W); ``weight`` is (C_out, C_in, k, k).
    For even ``k`` the extra row/column of padding goes on the high side.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    batched = x.data.ndim == 4
    xd = x.data if batched else x.data[None]
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"weight must be (C_out, C_in, k, k), got {weight.shape}")
    c_out, c_in, k, _ = weight.shape
    n, c, h, w = xd.shape
    if c != c_in or bias.shape != (c_out,):
        raise ValueError(f"conv2d_same shapes x={x.shape} w={weight.shape} b={bias.shape}")
    lo, hi = _same_pads(k)
    cols = _im2col(xd, k, lo, hi)
    wmat = weight.data.reshape(c_out, -1)
    out = np.matmul(wmat, cols).reshape(n, c_out, h, w) + bias.data[None, :, None, None]
    if not batched:
        out = out[0]

    def back(g):
        g4 = g if batched else g[None]
        g3 = g4.reshape(n, c_out, h * w)
        gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape) \
            if weight.requires_grad else None
        gbias = g3.sum(axis=(0, 2))
        gx = None
        if x.requires_grad:
            # input gradient: correlate the output gradient with the flipped kernel
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c_in, -1)
            gx = np.matmul(wflip, _im2col(g4, k, hi, lo)).reshape(n, c_in, h, w)
            if not batched:
                gx = gx[0]
        return gx, gw, gbias

    return _node(out, (x, weight, bias), back)


class BatchNormStats:
    """Running mean/variance buffers for one batch-norm layer (mutable)."""

    def __init__(self, mean: np.ndarray, var: np.ndarray):
        self.mean = mean
        self.var = var


def batch_norm(x, gamma, beta, stats: BatchNormStats, training: bool,
               eps: float = BN_EPS, momentum: float = BN_MOMENTUM) -> Tensor:
    """Per-channel normalization over batch and spatial axes.

    In training mode the batch statistics are used and ``stats`` is updated as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    batched = x.data.ndim == 4
    xd = x.data if batched else x.data[None]
    c = xd.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm params must be ({c},)")
    shape = (1, c, 1, 1)
    if training:
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        stats.mean = momentum * stats.mean + (1.0 - momentum) * mean
        stats.var = momentum * stats.var + (1.0 - momentum) * var
    else:
        mean, var = stats.mean, stats.var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean.reshape(shape)) * inv.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]

    def back(g):
        gb = g if batched else g[None]
        ggamma = (gb * xhat).sum(axis=(0, 2, 3))
        gbeta = gb.sum(axis=(0, 2, 3))
        gxhat = gb * gamma.data.reshape(shape)
        if training:
            gx = (inv.reshape(shape) / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        else:
            gx = gxhat * inv.reshape(shape)
        if not batched:
            gx = gx[0]
        return gx, ggamma, gbeta

    return _node(out if batched else out[0], (x, gamma, beta), back)


# --- backward -------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Set ``grad`` on every leaf that ``loss`` depends on.

    ``loss`` must be a scalar.  When ``params`` is given, their gradients are
    also returned in order; a parameter the loss ignores gets exact zeros.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[int, np.ndarray] = {}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g
            leaf_grads[id(node)] = g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    if params is None:
        return None
    return [leaf_grads.get(id(p), np.zeros_like(p.data)) for p in params]
