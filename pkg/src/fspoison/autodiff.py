"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Only the operations the meta-learner needs are implemented: 3x3 same-padding
convolution, per-channel affine modulation, ReLU, 2x2 average pooling,
order-invariant means, gathering/pasting rows, negative squared distances,
and cross-entropy. Graphs are built dynamically and freed with the tape.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """Node in a dynamically built computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, parents=(), vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.data.shape


def _make(data, parents, vjp):
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, vjp=vjp)
    return Tensor(data)


def backward(root: Tensor) -> None:
    """Accumulate gradients of a scalar root into every requiring leaf."""
    if root.data.ndim != 0:
        raise ValueError("backward expects a scalar root")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    root.grad = np.float64(1.0)
    for node in reversed(order):
        if node._vjp is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to the given shape (inverse of numpy broadcasting)."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def add_scalar(a: Tensor, s: float) -> Tensor:
    return _make(a.data + s, (a,), lambda g: (g,))


def scale(a: Tensor, s: float) -> Tensor:
    return _make(a.data * s, (a,), lambda g: (g * s,))


def matvec(w: Tensor, x: Tensor) -> Tensor:
    """(m, k) @ (k,) -> (m,)."""
    out = w.data @ x.data
    return _make(out, (w, x), lambda g: (np.outer(g, x.data), w.data.T @ g))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (np.asarray(g).reshape(old),))


def _im2col3(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B, C*9, H*W) patches of the zero-padded input."""
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    cols = np.empty((b, c, 9, h, w), dtype=x.dtype)
    n = 0
    for di in range(3):
        for dj in range(3):
            cols[:, :, n] = xp[:, :, di:di + h, dj:dj + w]
            n += 1
    return cols.reshape(b, c * 9, h * w)


def _col2im3(dcols: np.ndarray, shape: tuple) -> np.ndarray:
    """Fold (B, C*9, H*W) patch gradients back onto the input."""
    b, c, h, w = shape
    dcols = dcols.reshape(b, c, 9, h, w)
    dxp = np.zeros((b, c, h + 2, w + 2), dtype=dcols.dtype)
    n = 0
    for di in range(3):
        for dj in range(3):
            dxp[:, :, di:di + h, dj:dj + w] += dcols[:, :, n]
            n += 1
    return dxp[:, :, 1:-1, 1:-1]


def conv3x3(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Same-padding stride-1 3x3 convolution over (B, C_in, H, W) batches.

    The contraction runs one GEMM per image, so each image's output is a
    function of that image alone and batching order cannot perturb values.
    """
    b, c_in, h, w = x.data.shape
    c_out = kernel.data.shape[0]
    kflat = kernel.data.reshape(c_out, c_in * 9)
    cols = _im2col3(x.data)
    out = np.matmul(kflat, cols).reshape(b, c_out, h, w) + bias.data[None, :, None, None]

    def vjp(g):
        gf = np.asarray(g).reshape(b, c_out, h * w)
        db = gf.sum(axis=(0, 2))
        dk = np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.data.shape)
        dcols = np.matmul(kflat.T, gf)
        dx = _col2im3(dcols, x.data.shape)
        return dx, dk, db

    return _make(out, (x, kernel, bias), vjp)


def avgpool2(x: Tensor) -> Tensor:
    b, c, h, w = x.data.shape
    out = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def vjp(g):
        g = np.asarray(g) * 0.25
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3),)

    return _make(out, (x,), vjp)


def film(x: Tensor, zeta: Tensor, beta: Tensor) -> Tensor:
    """Per-channel affine modulation zeta * x + beta over (B, C, H, W)."""
    z = zeta.data[None, :, None, None]
    out = x.data * z + beta.data[None, :, None, None]

    def vjp(g):
        g = np.asarray(g)
        dx = g * z
        dz = (g * x.data).sum(axis=(0, 2, 3))
        db = g.sum(axis=(0, 2, 3))
        return dx, dz, db

    return _make(out, (x, zeta, beta), vjp)


def ordered_sum(values: np.ndarray, axis: int = 0) -> np.ndarray:
    """Permutation- and duplication-invariant float sum along an axis.

    Values are sorted, zero-padded to a power of two, and reduced pairwise,
    so any reordering of the inputs (and exact duplication of every input)
    produces the identical float result.
    """
    v = np.sort(np.moveaxis(np.asarray(values), axis, 0), axis=0)
    n = v.shape[0]
    size = 1
    while size < n:
        size *= 2
    if size != n:
        pad = np.zeros((size - n, *v.shape[1:]), dtype=v.dtype)
        v = np.concatenate([v, pad], axis=0)
    while v.shape[0] > 1:
        v = v[0::2] + v[1::2]
    return v[0]


def omean(x: Tensor) -> Tensor:
    """Order-invariant mean over axis 0 (see ordered_sum)."""
    n = x.data.shape[0]
    out = ordered_sum(x.data, axis=0) / n

    def vjp(g):
        return (np.broadcast_to(np.asarray(g) / n, x.data.shape).copy(),)

    return _make(out, (x,), vjp)


def gather(x: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    out = x.data[idx]

    def vjp(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, np.asarray(g))
        return (dx,)

    return _make(out, (x,), vjp)


def paste(base: Tensor, rows: Tensor, idx: np.ndarray) -> Tensor:
    """Copy of base with rows written at the given axis-0 positions."""
    idx = np.asarray(idx, dtype=np.int64)
    out = base.data.copy()
    out[idx] = rows.data

    def vjp(g):
        g = np.asarray(g)
        dbase = g.copy()
        dbase[idx] = 0.0
        return dbase, g[idx]

    return _make(out, (base, rows), vjp)


def stack0(tensors: list[Tensor]) -> Tensor:
    out = np.stack([t.data for t in tensors])

    def vjp(g):
        g = np.asarray(g)
        return tuple(g[i] for i in range(len(tensors)))

    return _make(out, tuple(tensors), vjp)


def slice0(x: Tensor, start: int, stop: int) -> Tensor:
    out = x.data[start:stop]

    def vjp(g):
        dx = np.zeros_like(x.data)
        dx[start:stop] = np.asarray(g)
        return (dx,)

    return _make(out, (x,), vjp)


def neg_sqdist(e: Tensor, p: Tensor) -> Tensor:
    """Logits -(||e_m - p_c||^2) for embeddings (M, E) and prototypes (C, E)."""
    diff = e.data[:, None, :] - p.data[None, :, :]
    out = -np.einsum("mce,mce->mc", diff, diff)

    def vjp(g):
        g = np.asarray(g)[:, :, None]
        de = (-2.0 * g * diff).sum(axis=1)
        dp = (2.0 * g * diff).sum(axis=0)
        return de, dp

    return _make(out, (e, p), vjp)


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, labels: np.ndarray, reduction: str = "mean") -> Tensor:
    """Cross-entropy of integer labels; reduction is 'mean' or 'sum'."""
    labels = np.asarray(labels, dtype=np.int64)
    m = logits.data.shape[0]
    lp = log_softmax_rows(logits.data)
    nll = -lp[np.arange(m), labels]
    out = nll.mean() if reduction == "mean" else nll.sum()

    def vjp(g):
        p = np.exp(lp)
        p[np.arange(m), labels] -= 1.0
        if reduction == "mean":
            p /= m
        return (np.float64(g) * p,)

    return _make(np.float64(out), (logits,), vjp)
