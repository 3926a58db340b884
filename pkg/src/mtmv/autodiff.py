"""Reverse-mode automatic differentiation over dense tensors and constant sparse matrices.

All dense values are float64 numpy arrays (row-major). Each operation records
its operands and a backward closure on the result tensor; ``backward(loss)``
walks the recorded graph once in reverse topological order and accumulates
gradients additively into every tensor that requires them.

The operator set is deliberately small and closed: it is exactly what the
multi-view graph model needs, plus a central-finite-difference oracle used by
the test suite to pin every backward rule.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

# When enabled, every op asserts its output is finite. Off by default (hot path).
DEBUG_CHECK_FINITE = False


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class UnsupportedOpError(RuntimeError):
    """Operation outside the supported set (e.g. trainable sparse values)."""


class Tensor:
    """Dense float64 array with optional gradient tracking.

    ``grad`` is a same-shape accumulator, zero-initialized for leaf tensors
    created with ``requires_grad=True`` and allocated on demand for
    intermediate results during backward.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._backward_done = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class SparseMatrix:
    """CSR matrix with immutable, non-trainable float64 entries.

    Rows are stored with strictly ascending column indices; all products
    accumulate per row in that order, which pins a reproducible summation
    order.
    """

    __slots__ = ("rows", "cols", "row_offsets", "col_indices", "entry_values",
                 "trainable", "_csr", "_csr_t")

    def __init__(self, rows: int, cols: int, row_offsets, col_indices, entry_values,
                 trainable: bool = False):
        self.rows = int(rows)
        self.cols = int(cols)
        self.row_offsets = np.asarray(row_offsets, dtype=np.int64)
        self.col_indices = np.asarray(col_indices, dtype=np.int64)
        self.entry_values = np.asarray(entry_values, dtype=np.float64)
        self.trainable = trainable
        self._csr = None
        self._csr_t = None
        self._validate()

    def _validate(self) -> None:
        off = self.row_offsets
        if off.shape != (self.rows + 1,):
            raise ShapeError(f"row_offsets length {off.shape} != rows+1 ({self.rows + 1})")
        if off[0] != 0 or off[-1] != self.col_indices.size:
            raise ValueError("row_offsets must start at 0 and end at nnz")
        if np.any(np.diff(off) < 0):
            raise ValueError("row_offsets must be monotone")
        if self.col_indices.size != self.entry_values.size:
            raise ValueError("col_indices and entry_values length mismatch")
        if self.col_indices.size:
            if self.col_indices.min() < 0 or self.col_indices.max() >= self.cols:
                raise ValueError("column index out of range")
            for r in range(self.rows):
                cols_r = self.col_indices[off[r]:off[r + 1]]
                if cols_r.size > 1 and np.any(np.diff(cols_r) <= 0):
                    raise ValueError(f"row {r} has unsorted or duplicate column indices")
        if not np.all(np.isfinite(self.entry_values)):
            raise ValueError("sparse entries must be finite")

    @classmethod
    def from_coo(cls, rows: int, cols: int, row_idx, col_idx, values) -> "SparseMatrix":
        """Build from coordinate triples; entries are sorted, duplicates are an error."""
        row_idx = np.asarray(row_idx, dtype=np.int64)
        col_idx = np.asarray(col_idx, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        order = np.lexsort((col_idx, row_idx))
        row_idx, col_idx, values = row_idx[order], col_idx[order], values[order]
        if row_idx.size > 1:
            same = (np.diff(row_idx) == 0) & (np.diff(col_idx) == 0)
            if np.any(same):
                k = int(np.argmax(same))
                raise ValueError(f"duplicate entry at ({row_idx[k]}, {col_idx[k]})")
        offsets = np.zeros(rows + 1, dtype=np.int64)
        np.add.at(offsets, row_idx + 1, 1)
        np.cumsum(offsets, out=offsets)
        return cls(rows, cols, offsets, col_idx, values)

    @classmethod
    def from_dense(cls, dense) -> "SparseMatrix":
        dense = np.asarray(dense, dtype=np.float64)
        r, c = np.nonzero(dense)
        return cls.from_coo(dense.shape[0], dense.shape[1], r, c, dense[r, c])

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        idx = np.arange(n, dtype=np.int64)
        return cls(n, n, np.arange(n + 1, dtype=np.int64), idx, np.ones(n))

    @property
    def nnz(self) -> int:
        return self.entry_values.size

    @property
    def shape(self) -> tuple:
        return (self.rows, self.cols)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.rows, self.cols))
        for r in range(self.rows):
            lo, hi = self.row_offsets[r], self.row_offsets[r + 1]
            out[r, self.col_indices[lo:hi]] = self.entry_values[lo:hi]
        return out

    def _scipy(self):
        if self._csr is None:
            self._csr = sp.csr_matrix(
                (self.entry_values, self.col_indices, self.row_offsets),
                shape=(self.rows, self.cols))
        return self._csr

    def _scipy_t(self):
        if self._csr_t is None:
            self._csr_t = self._scipy().T.tocsr()
        return self._csr_t

    def transpose(self) -> "SparseMatrix":
        t = self._scipy_t()
        return SparseMatrix(self.cols, self.rows, t.indptr, t.indices, t.data)

    def max_abs_asymmetry(self) -> float:
        if self.rows != self.cols:
            raise ShapeError("asymmetry defined for square matrices only")
        d = self._scipy() - self._scipy().T
        return 0.0 if d.nnz == 0 else float(np.abs(d.data).max())


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result, recording the graph edge only when a parent needs grad."""
    out = Tensor(data)
    if DEBUG_CHECK_FINITE and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite value produced by forward op")
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} incompatible")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), backward)


def spmm(s: SparseMatrix, b: Tensor) -> Tensor:
    """Sparse-dense product; the sparse operand is a constant."""
    if s.trainable:
        raise UnsupportedOpError("trainable sparse values are not supported")
    if b.data.ndim != 2 or s.cols != b.shape[0]:
        raise ShapeError(f"spmm: shapes {s.shape} and {b.shape} incompatible")
    out = s._scipy() @ b.data

    def backward(g):
        return (s._scipy_t() @ g,)

    return _make(out, (b,), backward)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product."""
    _check_same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def shift(x: Tensor, c: float) -> Tensor:
    return _make(x.data + float(c), (x,), lambda g: (g,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = np.empty_like(x.data)
    pos = x.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def power(x: Tensor, p: float) -> Tensor:
    p = float(p)
    y = x.data ** p
    return _make(y, (x,), lambda g: (g * p * x.data ** (p - 1.0),))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    y = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(y, (x,), lambda g: (g * inside,))


def softmax(x: Tensor, axis: int) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward)


# ---------------------------------------------------------------------------
# reductions and structure
# ---------------------------------------------------------------------------

def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    out = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.full_like(x.data, g),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(out, (x,), backward)


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    out = x.data.mean(axis=axis)

    def backward(g):
        if axis is None:
            return (np.full_like(x.data, g / count),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape) / count,)

    return _make(out, (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not xs:
        raise ShapeError("concat of empty sequence")
    out = np.concatenate([x.data for x in xs], axis=axis)
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes[:-1])

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(xs), backward)


def slice_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= lo < hi <= x.shape[1]):
        raise ShapeError(f"slice_cols: [{lo}:{hi}] invalid for shape {x.shape}")
    out = x.data[:, lo:hi].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, lo:hi] = g
        return (gx,)

    return _make(out, (x,), backward)


def row_dot(a: Tensor, b: Tensor) -> Tensor:
    """Per-row inner product of two [n, d] tensors, returning a length-n vector."""
    if a.data.ndim != 2 or a.shape != b.shape:
        raise ShapeError(f"row_dot: shapes {a.shape} and {b.shape} must be equal 2-D")
    out = np.einsum("ij,ij->i", a.data, b.data)
    return _make(out, (a, b), lambda g: (g[:, None] * b.data, g[:, None] * a.data))


def stack_columns(xs: Sequence[Tensor]) -> Tensor:
    """Stack 1-D vectors of equal length into a matrix, one per column."""
    if not xs or any(x.data.ndim != 1 for x in xs):
        raise ShapeError("stack_columns expects 1-D tensors")
    out = np.stack([x.data for x in xs], axis=1)

    def backward(g):
        return tuple(g[:, i].copy() for i in range(len(xs)))

    return _make(out, tuple(xs), backward)


def column(x: Tensor, j: int) -> Tensor:
    """Extract column j of a 2-D tensor as a 1-D vector."""
    if x.data.ndim != 2 or not (0 <= j < x.shape[1]):
        raise ShapeError(f"column: index {j} invalid for shape {x.shape}")
    out = x.data[:, j].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, j] = g
        return (gx,)

    return _make(out, (x,), backward)


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Scale row i of x by s[i]."""
    if x.data.ndim != 2 or s.data.ndim != 1 or s.shape[0] != x.shape[0]:
        raise ShapeError(f"scale_rows: shapes {x.shape} and {s.shape} incompatible")
    out = x.data * s.data[:, None]

    def backward(g):
        return g * s.data[:, None], np.einsum("ij,ij->i", g, x.data)

    return _make(out, (x, s), backward)


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """Add a [1, d] row vector to every row of a [n, d] tensor."""
    if x.data.ndim != 2 or v.shape != (1, x.shape[1]):
        raise ShapeError(f"add_rowvec: shapes {x.shape} and {v.shape} incompatible")
    return _make(x.data + v.data, (x, v), lambda g: (g, g.sum(axis=0, keepdims=True)))


def mul_scalar(x: Tensor, s: Tensor) -> Tensor:
    """Multiply a tensor by a single-element tensor."""
    if s.data.size != 1:
        raise ShapeError(f"mul_scalar: scalar operand has shape {s.shape}")
    sv = s.data.item()
    out = x.data * sv

    def backward(g):
        return g * sv, np.asarray((g * x.data).sum()).reshape(s.shape)

    return _make(out, (x, s), backward)


def get(x: Tensor, i: int) -> Tensor:
    """Extract element i of a 1-D tensor as a 0-d scalar tensor."""
    if x.data.ndim != 1 or not (0 <= i < x.shape[0]):
        raise ShapeError(f"get: index {i} invalid for shape {x.shape}")
    out = np.asarray(x.data[i])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[i] = g
        return (gx,)

    return _make(out, (x,), backward)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows of a 2-D tensor; gradient scatter-adds back."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.data.ndim != 2:
        raise ShapeError(f"gather_rows: expected 2-D tensor, got shape {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError("gather_rows: row index out of range")
    out = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(out, (x,), backward)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero entries with probability ``rate`` and rescale survivors."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    if not training or rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order  # parents precede children


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tracked tensor reachable from a scalar loss."""
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tracked tensor")
    if loss._backward_done:
        raise RuntimeError("backward already ran for this loss; reset gradients first")
    order = _topo_order(loss)
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad += 1.0
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._backward(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g
    loss._backward_done = True


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_difference_gradient(f: Callable[[], float], x: np.ndarray,
                               eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` w.r.t. the entries of ``x``.

    ``x`` is perturbed in place and restored; ``f`` must recompute the loss
    from the current contents of ``x``.
    """
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f())
        flat[i] = orig - eps
        fm = float(f())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Worst-case |a-b| / max(|a|, |b|, floor) over all entries."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max()) if a.size else 0.0
