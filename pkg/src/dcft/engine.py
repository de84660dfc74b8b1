"""Dense 2-D float64 matrices with reverse-mode differentiation.

Every operation returns a new :class:`Matrix`. When at least one operand
requires gradients the result remembers its operands and a backward rule;
:func:`backward` replays those rules in reverse topological order and
accumulates into the ``grad`` buffers of leaf matrices.

Intermediate gradients live only for the duration of one ``backward`` call,
so a sub-graph (e.g. a cached adapter delta) can be reused by several losses.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError, UsageError

BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_grad_enabled = True


def grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Matrix:
    """A rows x cols array of 64-bit reals with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "version", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2 or arr.size == 0:
            raise ShapeError(f"Matrix needs a non-empty 2-D array, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        # bumped by optimizers on every in-place update; used for cache invalidation
        self.version = 0
        self._parents: tuple[Matrix, ...] = ()
        self._backward: BackwardRule | None = None

    @classmethod
    def _node(cls, data: np.ndarray, parents=(), rule: BackwardRule | None = None) -> "Matrix":
        out = cls.__new__(cls)
        data.flags.writeable = False
        out.data = data
        out.grad = None
        out.name = None
        out.version = 0
        tracked = _grad_enabled and rule is not None and any(p.requires_grad for p in parents)
        out.requires_grad = tracked
        out._parents = tuple(parents) if tracked else ()
        out._backward = rule if tracked else None
        return out

    # -- constructors ------------------------------------------------------

    @classmethod
    def zeros(cls, rows: int, cols: int, **kw) -> "Matrix":
        return cls(np.zeros((rows, cols)), **kw)

    @classmethod
    def ones(cls, rows: int, cols: int, **kw) -> "Matrix":
        return cls(np.ones((rows, cols)), **kw)

    @classmethod
    def eye(cls, n: int, **kw) -> "Matrix":
        return cls(np.eye(n), **kw)

    @classmethod
    def randn(cls, rows: int, cols: int, rng: np.random.Generator, std: float = 1.0, **kw) -> "Matrix":
        return cls(rng.normal(0.0, std, size=(rows, cols)), **kw)

    # -- basic protocol ----------------------------------------------------

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.shape != (1, 1):
            raise UsageError(f"item() needs a 1x1 matrix, got {self.rows}x{self.cols}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Matrix":
        return Matrix(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Matrix({self.rows}x{self.cols}{tag}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self) -> "Matrix":
        return transpose(self)


def _lift(x) -> Matrix:
    return x if isinstance(x, Matrix) else Matrix(x)


def make_node(value: np.ndarray, parents: Sequence[Matrix], rule: BackwardRule) -> Matrix:
    """Register a custom differentiable operation.

    ``rule`` receives the output gradient and returns one gradient (or None)
    per parent, in order.
    """
    return Matrix._node(np.asarray(value, dtype=np.float64), parents, rule)


# -- backward pass ---------------------------------------------------------


class ComputationRecord:
    """Topologically ordered nodes reachable from an output.

    Operands always precede the nodes that consume them.
    """

    def __init__(self, nodes: list[Matrix]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Matrix) -> "ComputationRecord":
        order: list[Matrix] = []
        seen: set[int] = set()
        stack: list[tuple[Matrix, bool]] = [(out, False)]
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, seed: np.ndarray) -> None:
        out = self.nodes[-1]
        grads: dict[int, np.ndarray] = {id(out): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(loss: Matrix) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.shape != (1, 1):
        raise UsageError(f"backward() needs a scalar (1x1) loss, got {loss.rows}x{loss.cols}")
    if not loss.requires_grad:
        return
    ComputationRecord.from_output(loss).replay(np.ones((1, 1)))


# -- elementwise and structural ops ----------------------------------------


def _broadcast_ok(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return all(x == y or y == 1 for x, y in zip(a, b))


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i in range(2) if shape[i] == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True)


def _check_binary(a: Matrix, b: Matrix, op: str) -> None:
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"{op}: shapes {a.rows}x{a.cols} and {b.rows}x{b.cols} are incompatible")


def add(a: Matrix, b: Matrix) -> Matrix:
    """a + b; b may be a column (rows x 1), row (1 x cols) or 1x1 broadcast."""
    _check_binary(a, b, "add")
    return Matrix._node(a.data + b.data, (a, b), lambda g: (g, _unbroadcast(g, b.shape)))


def sub(a: Matrix, b: Matrix) -> Matrix:
    _check_binary(a, b, "sub")
    return Matrix._node(a.data - b.data, (a, b), lambda g: (g, -_unbroadcast(g, b.shape)))


def mul(a: Matrix, b: Matrix) -> Matrix:
    """Elementwise product with the same broadcasting as :func:`add`."""
    _check_binary(a, b, "mul")
    return Matrix._node(
        a.data * b.data, (a, b), lambda g: (g * b.data, _unbroadcast(g * a.data, b.shape))
    )


def scale(a: Matrix, alpha: float) -> Matrix:
    return Matrix._node(a.data * alpha, (a,), lambda g: (g * alpha,))


def transpose(a: Matrix) -> Matrix:
    return Matrix._node(a.data.T.copy(), (a,), lambda g: (g.T,))


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dims differ for {a.rows}x{a.cols} @ {b.rows}x{b.cols}")
    return Matrix._node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def tanh(a: Matrix) -> Matrix:
    y = np.tanh(a.data)
    return Matrix._node(y, (a,), lambda g: (g * (1.0 - y * y),))


def sum_all(a: Matrix) -> Matrix:
    return Matrix._node(np.array([[a.data.sum()]]), (a,), lambda g: (np.full(a.shape, g[0, 0]),))


def mean_all(a: Matrix) -> Matrix:
    n = a.data.size
    return Matrix._node(
        np.array([[a.data.mean()]]), (a,), lambda g: (np.full(a.shape, g[0, 0] / n),)
    )


def frobenius_norm_sq(a: Matrix) -> Matrix:
    """Sum of squared entries."""
    return Matrix._node(np.array([[np.sum(a.data * a.data)]]), (a,), lambda g: (2.0 * a.data * g[0, 0],))


def slice_rows(a: Matrix, start: int, stop: int) -> Matrix:
    if not 0 <= start < stop <= a.rows:
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for {a.rows} rows")

    def rule(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return Matrix._node(a.data[start:stop].copy(), (a,), rule)


def vstack(parts: Sequence[Matrix]) -> Matrix:
    cols = {p.cols for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"vstack: column counts differ: {sorted(cols)}")
    offsets = np.cumsum([0] + [p.rows for p in parts])

    def rule(g):
        return tuple(g[offsets[i] : offsets[i + 1]] for i in range(len(parts)))

    return Matrix._node(np.vstack([p.data for p in parts]), parts, rule)


def gather_cols(table: Matrix, ids: Iterable[int]) -> Matrix:
    """Columns of ``table`` picked by integer ``ids`` (embedding lookup)."""
    idx = np.asarray(list(ids), dtype=np.int64)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= table.cols:
        raise ShapeError(f"gather_cols: ids out of range for {table.cols} columns")

    def rule(g):
        full = np.zeros_like(table.data)
        np.add.at(full.T, idx, g.T)
        return (full,)

    return Matrix._node(table.data[:, idx], (table,), rule)


def softmax_rows(a: Matrix, mask: np.ndarray | None = None) -> Matrix:
    """Row-wise softmax of ``a + mask``; the additive mask is a constant."""
    z = a.data if mask is None else a.data + mask
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        return (y * (g - np.sum(g * y, axis=1, keepdims=True)),)

    return Matrix._node(y, (a,), rule)


def cross_entropy(logits: Matrix, labels: Sequence[int]) -> Matrix:
    """Mean cross-entropy of row-wise logits (batch x classes) against integer labels."""
    y = np.asarray(labels, dtype=np.int64)
    n = logits.rows
    if y.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} logit rows but {y.size} labels")
    if y.min() < 0 or y.max() >= logits.cols:
        raise ShapeError(f"cross_entropy: labels outside [0, {logits.cols})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), y].mean()

    def rule(g):
        p = np.exp(logp)
        p[np.arange(n), y] -= 1.0
        return (p * (g[0, 0] / n),)

    return Matrix._node(np.array([[loss]]), (logits,), rule)


# -- convolution family (single channel, no padding) -----------------------


def _check_stride(stride: int) -> None:
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ConfigError(f"stride must be a positive integer, got {stride!r}")


def _square_kernel(k: Matrix, op: str) -> int:
    if k.rows != k.cols:
        raise ShapeError(f"{op}: kernel must be square, got {k.rows}x{k.cols}")
    return k.rows


def conv_output_dim(n: int, d: int, stride: int) -> int:
    """Valid-convolution output length; raises when it is not integral."""
    if n < d or (n - d) % stride:
        raise ShapeError(f"conv2d_valid: ({n} - {d}) is not a non-negative multiple of stride {stride}")
    return (n - d) // stride + 1


def deconv_output_dim(n: int, d: int, stride: int) -> int:
    return stride * (n - 1) + d


def conv2d_valid(x: Matrix, k: Matrix, stride: int = 1) -> Matrix:
    """Y(i, j) = sum_{m,n} X(i*s + m, j*s + n) * K(m, n), no padding."""
    _check_stride(stride)
    d = _square_kernel(k, "conv2d_valid")
    p = conv_output_dim(x.rows, d, stride)
    q = conv_output_dim(x.cols, d, stride)
    span_r, span_c = stride * (p - 1) + 1, stride * (q - 1) + 1
    out = np.zeros((p, q))
    for m in range(d):
        for n in range(d):
            out += k.data[m, n] * x.data[m : m + span_r : stride, n : n + span_c : stride]

    def rule(g):
        gx = np.zeros_like(x.data)
        gk = np.empty_like(k.data)
        for m in range(d):
            for n in range(d):
                window = x.data[m : m + span_r : stride, n : n + span_c : stride]
                gk[m, n] = np.sum(g * window)
                gx[m : m + span_r : stride, n : n + span_c : stride] += k.data[m, n] * g
        return gx, gk

    return Matrix._node(out, (x, k), rule)


def deconv2d(f: Matrix, c: Matrix, stride: int) -> Matrix:
    """Strided transposed convolution (scatter-add).

    Output is (s*(p-1)+d) x (s*(q-1)+d) with
    out[s*i+u, s*j+v] += F[i, j] * C[u, v].
    """
    _check_stride(stride)
    d = _square_kernel(c, "deconv2d")
    if stride > d:
        raise ConfigError(f"deconv2d: stride {stride} exceeds kernel size {d}; some outputs get no kernel")
    p, q = f.shape
    span_r, span_c = stride * (p - 1) + 1, stride * (q - 1) + 1
    out = np.zeros((deconv_output_dim(p, d, stride), deconv_output_dim(q, d, stride)))
    if stride == d:
        # disjoint blocks: out[(i,u),(j,v)] = F[i,j] C[u,v]
        out[:] = (f.data[:, None, :, None] * c.data[None, :, None, :]).reshape(out.shape)
    else:
        for u in range(d):
            for v in range(d):
                out[u : u + span_r : stride, v : v + span_c : stride] += c.data[u, v] * f.data

    def rule(g):
        gf = np.zeros_like(f.data)
        gc = np.empty_like(c.data)
        for u in range(d):
            for v in range(d):
                block = g[u : u + span_r : stride, v : v + span_c : stride]
                gf += c.data[u, v] * block
                gc[u, v] = np.sum(block * f.data)
        return gf, gc

    return Matrix._node(out, (f, c), rule)


def kron(f: Matrix, c: Matrix) -> Matrix:
    """Kronecker product; block (i, j) of the result is F[i, j] * C."""
    p, q = f.shape
    r, t = c.shape
    out = np.empty((p * r, q * t))
    for i in range(p):
        for j in range(q):
            out[i * r : (i + 1) * r, j * t : (j + 1) * t] = f.data[i, j] * c.data

    def rule(g):
        blocks = g.reshape(p, r, q, t)
        gf = np.einsum("iujv,uv->ij", blocks, c.data)
        gc = np.einsum("iujv,ij->uv", blocks, f.data)
        return gf, gc

    return Matrix._node(out, (f, c), rule)


def inner(a: Matrix, b: Matrix) -> float:
    """Frobenius inner product of two same-shape matrices (no graph)."""
    if a.shape != b.shape:
        raise ShapeError(f"inner: shapes {a.shape} and {b.shape} differ")
    return float(np.sum(a.data * b.data))
