"""Dense float64 tensor substrate: checked core ops, MAC accounting, seeded RNG.

All arrays are row-major (C order) numpy float64. Operations are pure
functions; the only stateful objects are Rng (single-owner, advanced
sequentially) and the module-level MAC counter (single-owner, enabled
explicitly via count_macs()).
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class DimensionError(ValueError):
    """Shapes disagree with an operation's contract."""


class DomainError(ValueError):
    """A value is outside an operation's admissible domain."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where the contract forbids it."""


class ConfigError(ValueError):
    """An invalid or unknown configuration was supplied."""


class StateError(RuntimeError):
    """An object was used in a way its state does not permit."""


class ResourceError(RuntimeError):
    """A requested computation exceeds a configured resource cap."""


def as_f64(x) -> np.ndarray:
    """Coerce to a C-contiguous float64 array."""
    return np.ascontiguousarray(x, dtype=np.float64)


class MacCounter:
    """Accumulates multiply-accumulate counts for instrumented runs.

    Convention: only contraction MACs are counted (matrix products and
    row-wise/pairwise reductions). Elementwise scaling, bias additions,
    softmax exponentials/divisions and per-layer constant setup work are
    excluded; they are dominated terms under the 1 MAC = 1 FLOP convention.
    """

    def __init__(self) -> None:
        self.total = 0

    def add(self, n: int) -> None:
        self.total += int(n)


_counter: MacCounter | None = None


@contextmanager
def count_macs():
    """Enable MAC counting for the duration of the block; yields the counter.

    Single-owner: nested or concurrent counting is refused.
    """
    global _counter
    if _counter is not None:
        raise StateError("MAC counting is already active")
    _counter = MacCounter()
    try:
        yield _counter
    finally:
        _counter = None


def add_macs(n: int) -> None:
    if _counter is not None:
        _counter.add(n)


def _check_finite(name: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise DomainError(f"{name}: non-finite input")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """C = A @ B for 2-D operands, C[i,j] = sum_t A[i,t] B[t,j].

    Deterministic for fixed inputs on a fixed build; counts m*k*n MACs
    when instrumentation is active.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    _check_finite("matmul", a, b)
    add_macs(a.shape[0] * a.shape[1] * b.shape[1])
    return a @ b


def rowwise_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-row dot product of two [n, k] arrays -> [n]. Counts n*k MACs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise DimensionError(f"rowwise_dot expects matching 2-D shapes, got {a.shape} and {b.shape}")
    add_macs(a.shape[0] * a.shape[1])
    return np.einsum("nk,nk->n", a, b)


def pair_mix(weights: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Weighted sum over a small entry axis: [n, e] x [n, e, k] -> [n, k].

    Counts n*e*k MACs (the attention weighted-sum contraction).
    """
    weights = np.asarray(weights, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if weights.ndim != 2 or values.ndim != 3 or weights.shape != values.shape[:2]:
        raise DimensionError(f"pair_mix shape mismatch: {weights.shape} vs {values.shape}")
    add_macs(values.shape[0] * values.shape[1] * values.shape[2])
    return np.einsum("ne,nek->nk", weights, values)


def pair_logits(query: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Per-row logits against a small entry axis: [n, k] x [n, e, k] -> [n, e].

    Counts n*e*k MACs.
    """
    query = np.asarray(query, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    if query.ndim != 2 or keys.ndim != 3 or query.shape[0] != keys.shape[0] or query.shape[1] != keys.shape[2]:
        raise DimensionError(f"pair_logits shape mismatch: {query.shape} vs {keys.shape}")
    add_macs(keys.shape[0] * keys.shape[1] * keys.shape[2])
    return np.einsum("nk,nek->ne", query, keys)


def softmax_lastdim(x: np.ndarray) -> np.ndarray:
    """Softmax along the last axis, stabilised by max subtraction.

    Each slice along the last axis sums to 1 within 1e-12. A single-entry
    last axis yields exactly 1.0 (exp(0)/exp(0)).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("softmax_lastdim requires a non-empty last dimension")
    _check_finite("softmax_lastdim", x)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign to avoid overflow in exp.
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Rng:
    """Seeded deterministic random stream (PCG64).

    Identical seed + identical call sequence gives a bit-identical stream.
    Single-owner: do not share one instance across concurrent consumers.
    """

    def __init__(self, seed: int) -> None:
        if seed < 0:
            raise DomainError("seed must be a nonnegative integer")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape, mean: float = 0.0, stddev: float = 1.0) -> np.ndarray:
        if stddev < 0:
            raise DomainError(f"stddev must be nonnegative, got {stddev}")
        if stddev == 0:
            return np.full(shape, float(mean), dtype=np.float64)
        return self._gen.normal(loc=mean, scale=stddev, size=shape)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)


def rng_normal(rng: Rng, shape, mean: float = 0.0, stddev: float = 1.0) -> np.ndarray:
    """Seeded normal draw; stddev = 0 yields a constant tensor of `mean`."""
    return rng.normal(shape, mean, stddev)
