"""Dense float64 tensor arithmetic used by the layers, losses and metrics.

Tensors are plain :class:`numpy.ndarray` objects of dtype float64 and rank
1 to 3.  Every function here validates shapes strictly (no broadcasting
beyond scalars) and returns a fresh, read-only array.

Products are evaluated with a non-BLAS kernel: BLAS picks different
blocking for different row counts, which makes row ``i`` of ``x @ w``
depend on how many other rows are in ``x``.  The kernel used here computes
every output entry with the same instruction sequence wherever it sits, so
a batch of one and a batch of many agree bitwise.
"""

from __future__ import annotations

from typing import Literal

import numpy as np

from avfusion.errors import AxisOutOfRange, NonFiniteInput, RankError, ShapeMismatch

Tensor = np.ndarray

__all__ = [
    "Tensor",
    "as_tensor",
    "elementwise",
    "matmul",
    "reduce",
    "scale",
    "softmax_rows",
    "sorted_sum",
    "transpose",
    "zeros",
]


def _c(x) -> np.ndarray:
    # Reduction order follows memory layout; normalising it keeps results
    # independent of how the caller's array happens to be strided.
    return np.ascontiguousarray(x, dtype=np.float64)


def _frozen(a: np.ndarray) -> Tensor:
    a.flags.writeable = False
    return a


def as_tensor(x, *, check_finite: bool = True) -> Tensor:
    """Copy ``x`` into a read-only float64 tensor of rank 1-3."""
    a = np.array(x, dtype=np.float64, order="C", copy=True)
    if a.ndim < 1 or a.ndim > 3:
        raise RankError(f"tensor rank must be 1..3, got {a.ndim}")
    if 0 in a.shape:
        raise ShapeMismatch(f"tensor dimensions must be positive, got {a.shape}")
    if check_finite and not np.all(np.isfinite(a)):
        raise NonFiniteInput("tensor contains NaN or Inf")
    return _frozen(a)


def zeros(*shape: int) -> Tensor:
    return _frozen(np.zeros(shape, dtype=np.float64))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; rank-3 ``a`` is treated as a stack of matrices.

    Supported shapes: ``[m,k] x [k,n]``, ``[B,m,k] x [k,n]`` and
    ``[B,m,k] x [B,k,n]``.
    """
    a = _c(a)
    b = _c(b)
    if a.ndim == 2 and b.ndim == 2:
        spec = "ik,kj->ij"
    elif a.ndim == 3 and b.ndim == 2:
        spec = "bik,kj->bij"
    elif a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0]:
            raise ShapeMismatch(f"batch sizes differ: {a.shape} x {b.shape}")
        spec = "bik,bkj->bij"
    else:
        raise RankError(f"unsupported ranks for matmul: {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"inner dimensions differ: {a.shape} x {b.shape}")
    return _frozen(np.einsum(spec, a, b, optimize=False))


def transpose(a: Tensor) -> Tensor:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise RankError(f"transpose needs rank 2, got {a.ndim}")
    return _frozen(np.ascontiguousarray(a.T))


def sorted_sum(a: np.ndarray, axis: int) -> np.ndarray:
    """Sum along ``axis`` after sorting, so the result ignores input order."""
    return np.ascontiguousarray(np.sort(a, axis=axis)).sum(axis=axis)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax over the last axis with max subtraction.

    The normaliser is an order-independent sum, so permuting the entries of
    a row permutes the output bitwise.
    """
    a = _c(a)
    if a.ndim not in (2, 3):
        raise RankError(f"softmax_rows needs rank 2 or 3, got {a.ndim}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteInput("softmax_rows input contains NaN or Inf")
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return _frozen(e / sorted_sum(e, axis=-1)[..., None])


def elementwise(a: Tensor, b, op: Literal["add", "sub", "mul"]) -> Tensor:
    a = np.asarray(a, dtype=np.float64)
    if np.ndim(b) == 0:
        b = float(b)
    else:
        b = np.asarray(b, dtype=np.float64)
        if b.shape != a.shape:
            raise ShapeMismatch(f"elementwise {op}: {a.shape} vs {b.shape}")
    if op == "add":
        out = a + b
    elif op == "sub":
        out = a - b
    elif op == "mul":
        out = a * b
    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    return _frozen(np.asarray(out, dtype=np.float64))


def scale(a: Tensor, s: float) -> Tensor:
    return _frozen(np.asarray(a, dtype=np.float64) * float(s))


def reduce(a: Tensor, kind: Literal["sum", "mean"], axis: int | None = None) -> Tensor:
    """Sum or mean along ``axis`` (all axes when ``None``)."""
    a = _c(a)
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise AxisOutOfRange(f"axis {axis} out of range for rank {a.ndim}")
    total = a.sum(axis=axis)
    if kind == "sum":
        out = total
    elif kind == "mean":
        extent = a.size if axis is None else a.shape[axis]
        out = total / extent
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    return _frozen(np.asarray(out, dtype=np.float64))
