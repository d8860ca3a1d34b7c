"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: every op builds the graph as it executes, and the graph is
discarded after backward. Broadcasting is deliberately narrow (scalars,
row vectors against matrices, column vectors against matrices) so every
backward rule stays hand-checkable.
"""

from __future__ import annotations

import json
import struct
import threading
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible for the requested op."""


class NumericError(ValueError):
    """Non-finite values where finite ones are required."""


_MODE = threading.local()


def grad_enabled() -> bool:
    return getattr(_MODE, "on", True)


@contextmanager
def no_grad():
    """Disable graph construction inside the block (forward-only evaluation)."""
    prev = grad_enabled()
    _MODE.on = False
    try:
        yield
    finally:
        _MODE.on = prev


class Tensor:
    """A float64 array plus an optional gradient accumulator and graph links."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        # Additive by contract: repeated backward passes sum into the same slot.
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Reverse-mode sweep from this node; seed defaults to ones."""
        self.accumulate(np.ones_like(self.data) if seed is None else seed)
        for node in reversed(topo_order(self)):
            if node._backward is not None:
                node._backward()

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap an op result; builds graph links only when gradients are live."""
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn(out)
    return out


def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes of the graph below root, parents before children (iterative DFS)."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    """Elementwise add; also scalar + tensor and row vector [d] + matrix [T, d]."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < b.ndim or (a.ndim == 0 and b.ndim > 0):
        a, b = b, a  # keep the larger operand first
    if a.shape == b.shape:
        mode = "same"
    elif b.ndim == 0:
        mode = "scalar"
    elif a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        mode = "row"
    else:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out_data = a.data + b.data

    def bw(out):
        def run():
            g = out.grad
            if a.requires_grad:
                a.accumulate(g)
            if b.requires_grad:
                if mode == "same":
                    b.accumulate(g)
                elif mode == "scalar":
                    b.accumulate(g.sum())
                else:
                    b.accumulate(g.sum(axis=0))

        return run

    return _node(out_data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def bw(out):
        def run():
            if a.requires_grad:
                a.accumulate(-out.grad)

        return run

    return _node(-a.data, (a,), bw)


def mul(a, b) -> Tensor:
    """Elementwise product; also scalar, row [N] * [T, N], column [T, 1] * [T, d]."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < b.ndim or (a.ndim == 0 and b.ndim > 0):
        a, b = b, a
    if a.shape == b.shape:
        mode = "same"
    elif b.ndim == 0:
        mode = "scalar"
    elif a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        mode = "row"
    elif (
        a.ndim == 2
        and b.ndim == 2
        and b.shape == (a.shape[0], 1)
        and a.shape[1] != 1
    ):
        mode = "col"
    else:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out_data = a.data * b.data

    def bw(out):
        def run():
            g = out.grad
            if a.requires_grad:
                a.accumulate(g * b.data)
            if b.requires_grad:
                if mode == "same":
                    b.accumulate(g * a.data)
                elif mode == "scalar":
                    b.accumulate((g * a.data).sum())
                elif mode == "row":
                    b.accumulate((g * a.data).sum(axis=0))
                else:
                    b.accumulate((g * a.data).sum(axis=1, keepdims=True))

        return run

    return _node(out_data, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(out):
        def run():
            g = out.grad
            if a.requires_grad:
                a.accumulate(g @ b.data.T)
            if b.requires_grad:
                b.accumulate(a.data.T @ g)

        return run

    return _node(a.data @ b.data, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got shape {a.shape}")

    def bw(out):
        def run():
            if a.requires_grad:
                a.accumulate(out.grad.T)

        return run

    return _node(a.data.T.copy(), (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)

    def bw(out):
        def run():
            if a.requires_grad:
                a.accumulate(out.grad.reshape(a.shape))

        return run

    return _node(a.data.reshape(shape), (a,), bw)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns [start, stop) of a 2-D tensor; backward pads zeros elsewhere."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"slice_cols: expected 2-D, got shape {a.shape}")

    def bw(out):
        def run():
            if a.requires_grad:
                g = np.zeros_like(a.data)
                g[:, start:stop] = out.grad
                a.accumulate(g)

        return run

    return _node(a.data[:, start:stop].copy(), (a,), bw)


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat: empty input list")
    nd = parts[0].ndim
    if axis >= nd or axis < -nd:
        raise ShapeError(f"concat: axis {axis} out of range for {nd}-D input")
    extents = [p.shape[axis] for p in parts]
    offsets = np.cumsum(extents)[:-1]

    def bw(out):
        def run():
            pieces = np.split(out.grad, offsets, axis=axis)
            for p, g in zip(parts, pieces):
                if p.requires_grad:
                    p.accumulate(g)

        return run

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _check_axis(a: Tensor, axis: int) -> int:
    if axis < -a.ndim or axis >= a.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {a.shape}")
    return axis % a.ndim


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        def bw(out):
            def run():
                if a.requires_grad:
                    a.accumulate(np.full_like(a.data, out.grad))

            return run

        return _node(a.data.sum(), (a,), bw)
    ax = _check_axis(a, axis)

    def bw(out):
        def run():
            if a.requires_grad:
                a.accumulate(np.broadcast_to(np.expand_dims(out.grad, ax), a.shape).copy())

        return run

    return _node(a.data.sum(axis=ax), (a,), bw)


def tmean(a: Tensor, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.data.size

        def bw(out):
            def run():
                if a.requires_grad:
                    a.accumulate(np.full_like(a.data, out.grad / n))

            return run

        return _node(a.data.mean(), (a,), bw)
    ax = _check_axis(a, axis)
    n = a.shape[ax]

    def bw(out):
        def run():
            if a.requires_grad:
                a.accumulate(
                    np.broadcast_to(np.expand_dims(out.grad / n, ax), a.shape).copy()
                )

        return run

    return _node(a.data.mean(axis=ax), (a,), bw)


def max_reduce(a: Tensor, axis: int) -> Tensor:
    """Max along an axis; gradient flows to the first (lowest-index) argmax."""
    a = _as_tensor(a)
    ax = _check_axis(a, axis)
    idx = np.argmax(a.data, axis=ax)  # first occurrence breaks ties

    def bw(out):
        def run():
            if a.requires_grad:
                g = np.zeros_like(a.data)
                np.put_along_axis(
                    g, np.expand_dims(idx, ax), np.expand_dims(out.grad, ax), axis=ax
                )
                a.accumulate(g)

        return run

    return _node(np.max(a.data, axis=ax), (a,), bw)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along axis. -inf entries come out as exact zeros."""
    a = _as_tensor(a)
    if np.isnan(a.data).any():
        raise NumericError("softmax: NaN in input")
    ax = _check_axis(a, axis)
    shifted = a.data - np.max(a.data, axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)

    def bw(out):
        def run():
            if a.requires_grad:
                g = out.grad
                dot = (g * y).sum(axis=ax, keepdims=True)
                a.accumulate(y * (g - dot))

        return run

    return _node(y, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bw(out):
        def run():
            if a.requires_grad:
                a.accumulate(out.grad * y * (1.0 - y))

        return run

    return _node(y, (a,), bw)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def bw(out):
        def run():
            if a.requires_grad:
                a.accumulate(out.grad * (a.data > 0))

        return run

    return _node(np.maximum(a.data, 0.0), (a,), bw)


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)

    def bw(out):
        def run():
            if a.requires_grad:
                a.accumulate(out.grad * (1.0 - y * y))

        return run

    return _node(y, (a,), bw)


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)

    def bw(out):
        def run():
            if a.requires_grad:
                a.accumulate(out.grad * y)

        return run

    return _node(y, (a,), bw)


def log(a: Tensor, eps: float = 0.0) -> Tensor:
    """Natural log; with eps > 0 the argument is clamped below at eps.

    The clamped branch keeps gradient 1/eps flowing (not severed), matching
    the usual safe-log convention.
    """
    a = _as_tensor(a)
    x = np.maximum(a.data, eps) if eps > 0.0 else a.data

    def bw(out):
        def run():
            if a.requires_grad:
                a.accumulate(out.grad / x)

        return run

    return _node(np.log(x), (a,), bw)


def pow_const(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)

    def bw(out):
        def run():
            if a.requires_grad:
                a.accumulate(out.grad * c * a.data ** (c - 1.0))

        return run

    return _node(a.data ** c, (a,), bw)


# ---------------------------------------------------------------------------
# indexing
# ---------------------------------------------------------------------------


def gather_rows(a: Tensor, ids) -> Tensor:
    """Rows a[ids]; duplicate ids are allowed, backward sums into shared rows."""
    a = _as_tensor(a)
    ids = np.asarray(ids, dtype=np.intp)
    if a.ndim != 2:
        raise ShapeError(f"gather_rows: expected 2-D, got shape {a.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {a.shape[0]} rows")

    def bw(out):
        def run():
            if a.requires_grad:
                g = np.zeros_like(a.data)
                np.add.at(g, ids, out.grad)
                a.accumulate(g)

        return run

    return _node(a.data[ids], (a,), bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Embedding lookup: rows of the table by integer id."""
    return gather_rows(table, ids)


def scatter_rows(a: Tensor, ids, num_rows: int) -> Tensor:
    """Place rows of a at positions ids in a zero [num_rows, d] tensor."""
    a = _as_tensor(a)
    ids = np.asarray(ids, dtype=np.intp)
    if a.ndim != 2 or ids.shape[0] != a.shape[0]:
        raise ShapeError(f"scatter_rows: {a.shape} rows vs {ids.shape[0]} ids")
    data = np.zeros((num_rows, a.shape[1]))
    data[ids] = a.data

    def bw(out):
        def run():
            if a.requires_grad:
                a.accumulate(out.grad[ids])

        return run

    return _node(data, (a,), bw)


def take_entries(a: Tensor, rows, cols) -> Tensor:
    """Entries a[rows[i], cols[i]] as a 1-D tensor."""
    a = _as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)

    def bw(out):
        def run():
            if a.requires_grad:
                g = np.zeros_like(a.data)
                np.add.at(g, (rows, cols), out.grad)
                a.accumulate(g)

        return run

    return _node(a.data[rows, cols], (a,), bw)


def pick(a: Tensor, index: int) -> Tensor:
    """Single entry of a 1-D tensor as a 0-D scalar."""
    a = _as_tensor(a)
    if a.ndim != 1:
        raise ShapeError(f"pick: expected 1-D, got shape {a.shape}")

    def bw(out):
        def run():
            if a.requires_grad:
                g = np.zeros_like(a.data)
                g[index] = out.grad
                a.accumulate(g)

        return run

    return _node(np.asarray(a.data[index]), (a,), bw)


# ---------------------------------------------------------------------------
# fused blocks
# ---------------------------------------------------------------------------


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    d = a.shape[-1]

    def bw(out):
        def run():
            g = out.grad
            if gain.requires_grad:
                red = tuple(range(g.ndim - 1))
                gain.accumulate((g * xhat).sum(axis=red))
            if bias.requires_grad:
                red = tuple(range(g.ndim - 1))
                bias.accumulate(g.sum(axis=red))
            if a.requires_grad:
                gx = g * gain.data
                # d/dx of (x - mu) * inv with mu, inv both functions of x
                term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(
                    axis=-1, keepdims=True
                )
                a.accumulate(term * inv)

        return run

    return _node(xhat * gain.data + bias.data, (a, gain, bias), bw)


def cross_entropy_rows(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of targets over unmasked rows of [T, V] logits."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.intp)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy_rows: logits {logits.shape} vs targets {targets.shape}"
        )
    m = np.ones(logits.shape[0]) if mask is None else np.asarray(mask, dtype=np.float64)
    total = m.sum()
    if total <= 0:
        raise ValueError("cross_entropy_rows: every position is masked out")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax
    nll = lse[:, 0] - z[np.arange(z.shape[0]), targets]
    loss = (nll * m).sum() / total

    def bw(out):
        def run():
            if logits.requires_grad:
                p = np.exp(z - lse)
                p[np.arange(z.shape[0]), targets] -= 1.0
                logits.accumulate(out.grad * p * (m / total)[:, None])

        return run

    return _node(np.asarray(loss), (logits,), bw)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def tensor_to_bytes(t: Tensor) -> bytes:
    """Header (u32 rank, u32 extents...) then row-major little-endian f64 values."""
    shape = t.shape
    header = struct.pack("<I", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)
    return header + t.data.astype("<f8").tobytes(order="C")


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one tensor starting at offset; returns (tensor, next offset)."""
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    shape = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    n = int(np.prod(shape)) if rank else 1
    values = np.frombuffer(buf, dtype="<f8", count=n, offset=offset)
    offset += 8 * n
    return Tensor(values.reshape(shape).astype(np.float64)), offset


def tensor_to_json(t: Tensor) -> str:
    return json.dumps({"shape": list(t.shape), "values": t.data.ravel().tolist()})


def tensor_from_json(s: str) -> Tensor:
    obj = json.loads(s)
    return Tensor(np.asarray(obj["values"], dtype=np.float64).reshape(obj["shape"]))
