"""Differentiable building blocks with hand-written backward passes.

Every layer follows the same small protocol:

``forward(x, cache=True)``
    Returns the output.  With ``cache=True`` the inputs needed by
    ``backward`` are stored on the layer; inference paths pass
    ``cache=False`` so a frozen layer can be shared between threads.
``backward(upstream)``
    Accumulates into ``grads`` and returns the gradient with respect to the
    input.  The cache is consumed, so a second ``backward`` without a new
    ``forward`` raises :class:`BackwardBeforeForward`.
``params`` / ``grads``
    Ordered dicts of writeable float64 arrays with matching shapes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from avfusion import tensor_core as tc
from avfusion.errors import BackwardBeforeForward, NonFiniteInput, ShapeMismatch
from avfusion.rng import Philox

# Largest double below 1; keeps sigmoid outputs strictly inside (0, 1).
_ONE_MINUS = 1.0 - 2.0**-53
_TINY = np.finfo(np.float64).tiny


def _check_finite(x: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput(f"{where}: input contains NaN or Inf")


def init_uniform(rng: Philox, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform_range(-bound, bound, shape).astype(np.float64)


class Layer:
    """Base class holding parameters, gradients and the forward cache."""

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def _take_cache(self):
        if self._cache is None:
            raise BackwardBeforeForward(f"{type(self).__name__}.backward called without forward")
        cache, self._cache = self._cache, None
        return cache


class LinearLayer(Layer):
    """Fully connected layer ``y = x W^T + b`` applied over the last axis."""

    def __init__(self, in_features: int, out_features: int, rng: Philox | None = None):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        if rng is None:
            W = np.zeros((out_features, in_features))
            b = np.zeros(out_features)
        else:
            W = init_uniform(rng.child("W"), (out_features, in_features), in_features)
            b = init_uniform(rng.child("b"), (out_features,), in_features)
        self.params = {"W": W, "b": b}
        self.grads = {"W": np.zeros_like(W), "b": np.zeros_like(b)}

    @property
    def W(self) -> np.ndarray:
        return self.params["W"]

    @property
    def b(self) -> np.ndarray:
        return self.params["b"]

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim not in (2, 3) or x.shape[-1] != self.in_features:
            raise ShapeMismatch(f"linear expects [..., {self.in_features}], got {x.shape}")
        _check_finite(x, "linear_forward")
        out = np.asarray(tc.matmul(x, self.W.T)) + self.b
        if cache:
            self._cache = x
        return out

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        x = self._take_cache()
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != x.shape[:-1] + (self.out_features,):
            raise ShapeMismatch(f"linear upstream {upstream.shape} does not match input {x.shape}")
        up2 = upstream.reshape(-1, self.out_features)
        x2 = x.reshape(-1, self.in_features)
        self.grads["W"] += tc.matmul(tc.transpose(up2), x2)
        self.grads["b"] += up2.sum(axis=0)
        return np.asarray(tc.matmul(upstream, self.W))


class ReLU(Layer):
    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        _check_finite(x, "relu_forward")
        mask = x > 0
        if cache:
            self._cache = mask
        return np.where(mask, x, 0.0)

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        mask = self._take_cache()
        return np.where(mask, upstream, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return np.clip(s, _TINY, _ONE_MINUS)


class Sigmoid(Layer):
    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        _check_finite(x, "sigmoid_forward")
        s = sigmoid(x)
        if cache:
            self._cache = s
        return s

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        s = self._take_cache()
        return upstream * s * (1.0 - s)


class SelfAttentionBlock(Layer):
    """Single-head scaled dot-product self-attention over sequence positions.

    ``Q = X Wq``, ``K = X Wk``, ``V = X Wv`` and the output is
    ``softmax(Q K^T / sqrt(d)) V``.  There is no positional term, output
    projection, residual or normalisation.  Inputs are ``[T, d]`` or a
    batch ``[B, T, d]``.
    """

    def __init__(self, d: int, rng: Philox | None = None):
        super().__init__()
        self.d = d
        self.scale = 1.0 / math.sqrt(d)
        for name in ("Wq", "Wk", "Wv"):
            w = np.zeros((d, d)) if rng is None else init_uniform(rng.child(name), (d, d), d)
            self.params[name] = w
            self.grads[name] = np.zeros_like(w)
        self.last_attention: np.ndarray | None = None

    def forward(self, X: np.ndarray, cache: bool = True) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim not in (2, 3) or X.shape[-1] != self.d or X.shape[-2] < 1:
            raise ShapeMismatch(f"attention expects [..., T, {self.d}], got {X.shape}")
        _check_finite(X, "attention_forward")
        single = X.ndim == 2
        Xb = X[None] if single else X
        p = self.params
        Q = np.asarray(tc.matmul(Xb, p["Wq"]))
        K = np.asarray(tc.matmul(Xb, p["Wk"]))
        V = np.asarray(tc.matmul(Xb, p["Wv"]))
        logits = tc.matmul(Q, np.ascontiguousarray(K.transpose(0, 2, 1))) * self.scale
        A = np.asarray(tc.softmax_rows(logits))
        # Order-independent contraction over key positions: permuting the
        # rows of X permutes the output rows bitwise.
        out = tc.sorted_sum(A[:, :, :, None] * V[:, None, :, :], axis=2)
        if cache:
            self._cache = (Xb, Q, K, V, A, single)
        self.last_attention = A[0] if single else A
        return out[0] if single else out

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        Xb, Q, K, V, A, single = self._take_cache()
        G = np.asarray(upstream, dtype=np.float64)
        G = G[None] if single else G
        if G.shape != Xb.shape:
            raise ShapeMismatch(f"attention upstream {G.shape} does not match input {Xb.shape}")
        dA = tc.matmul(G, np.ascontiguousarray(V.transpose(0, 2, 1)))
        dV = tc.matmul(np.ascontiguousarray(A.transpose(0, 2, 1)), G)
        # Row-wise softmax Jacobian (diag(a) - a a^T) applied to dA.
        dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) * self.scale
        dQ = tc.matmul(dS, K)
        dK = tc.matmul(np.ascontiguousarray(dS.transpose(0, 2, 1)), Q)
        d = self.d
        X2 = tc.transpose(Xb.reshape(-1, d))
        p, g = self.params, self.grads
        g["Wq"] += tc.matmul(X2, dQ.reshape(-1, d))
        g["Wk"] += tc.matmul(X2, dK.reshape(-1, d))
        g["Wv"] += tc.matmul(X2, dV.reshape(-1, d))
        dX = (
            np.asarray(tc.matmul(dQ, tc.transpose(p["Wq"])))
            + tc.matmul(dK, tc.transpose(p["Wk"]))
            + tc.matmul(dV, tc.transpose(p["Wv"]))
        )
        return dX[0] if single else dX


@dataclass
class GradCheckReport:
    """Largest relative error per checked tensor, and the verdict."""

    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-5

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def merge(self, other: "GradCheckReport") -> "GradCheckReport":
        errors = dict(self.errors)
        for k, v in other.errors.items():
            errors[k] = max(errors.get(k, 0.0), v)
        return GradCheckReport(errors, self.tolerance)


# A tensor whose gradient is many orders below the rest of the check is
# dominated by finite-difference roundoff (about eps * |loss| / h), so its
# deviation is measured against this fraction of the largest gradient entry.
GRAD_SCALE_FLOOR = 1e-3


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 0.0) -> float:
    """Max deviation relative to the larger of the two gradients' max-norms (at least ``floor``)."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), floor)
    diff = float(np.max(np.abs(analytic - numeric)))
    if scale == 0.0:
        return diff
    return diff / float(scale)


def finite_difference(
    loss_fn: Callable[[], float], targets: dict[str, np.ndarray], h: float = 1e-5
) -> dict[str, np.ndarray]:
    """Central differences of ``loss_fn`` w.r.t. every entry of each target array.

    Targets are perturbed in place and restored exactly afterwards.
    """
    numeric = {}
    for name, arr in targets.items():
        grad = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = loss_fn()
            flat[i] = orig - h
            minus = loss_fn()
            flat[i] = orig
            gflat[i] = (plus - minus) / (2.0 * h)
        numeric[name] = grad
    return numeric


def gradcheck(
    module: Layer,
    input_shape: tuple[int, ...],
    tolerance: float = 1e-5,
    seed: int = 0,
    h: float = 1e-5,
    corrupt: bool = False,
) -> GradCheckReport:
    """Compare a layer's backward pass with central finite differences.

    The probe loss is ``sum(R * forward(x))`` with ``R`` and ``x`` drawn
    from ``seed``.  ReLU inputs are kept at least 0.05 away from the kink.
    With ``corrupt`` the analytic gradients are doubled, which must fail.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    rng = Philox(seed, "gradcheck", type(module).__name__)
    x = rng.uniform_range(-1.0, 1.0, input_shape)
    if isinstance(module, ReLU):
        x = np.where(x >= 0, x + 0.05, x - 0.05)
    out_shape = module.forward(x, cache=False).shape
    probe = rng.uniform_range(-1.0, 1.0, out_shape)

    module.zero_grads()
    module.forward(x)
    dx = module.backward(probe)
    analytic = {k: g.copy() for k, g in module.grads.items()}
    analytic["input"] = np.asarray(dx).copy()
    if corrupt:
        for v in analytic.values():
            v *= 2.0

    def loss() -> float:
        return float(np.sum(probe * module.forward(x, cache=False)))

    numeric = finite_difference(loss, {**module.params, "input": x}, h)
    module.zero_grads()
    return compare_gradients(analytic, numeric, tolerance)


def compare_gradients(
    analytic: dict[str, np.ndarray], numeric: dict[str, np.ndarray], tolerance: float
) -> GradCheckReport:
    """Per-tensor relative errors, floored at ``GRAD_SCALE_FLOOR`` of the global max."""
    peak = max(
        (float(np.max(np.abs(g))) for g in (*analytic.values(), *numeric.values()) if g.size),
        default=0.0,
    )
    floor = GRAD_SCALE_FLOOR * peak
    errors = {k: relative_error(analytic[k], numeric[k], floor) for k in analytic}
    return GradCheckReport(errors, tolerance)
