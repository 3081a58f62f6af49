"""Dense float64 helpers shared by every other module.

Arrays are plain ``numpy.ndarray`` objects in float64. Public functions here
refuse non-finite inputs/outputs instead of letting NaN leak downstream.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class NumericError(ValueError):
    """Raised when a computation meets or would produce NaN/Inf."""


def check_finite(x: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def asarray(x, what: str = "array") -> np.ndarray:
    return check_finite(np.asarray(x, dtype=DTYPE), what)


class Rng:
    """Seeded random stream (PCG64) with a few helpers used across the package."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * std

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int, size=None, p=None, replace: bool = True):
        return self._gen.choice(n, size=size, p=p, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def dirichlet(self, alpha) -> np.ndarray:
        return self._gen.dirichlet(alpha)

    def spawn(self, offset: int) -> "Rng":
        return Rng(self.seed * 1_000_003 + offset)


@dataclass(frozen=True)
class RopeParams:
    head_dim: int
    base: float = 10000.0
    enabled: bool = True

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ValueError(f"rope head_dim must be even and positive, got {self.head_dim}")
        if self.base <= 1:
            raise ValueError(f"rope base must exceed 1, got {self.base}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul output")


def softmax_stable(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=DTYPE)
    if logits.size == 0 or logits.shape[axis] == 0:
        raise ValueError("softmax of an empty input")
    check_finite(logits, "softmax logits")
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def rms_norm(x: np.ndarray, weight: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Normalize the last axis to unit root-mean-square, then scale by ``weight``."""
    x = np.asarray(x, dtype=DTYPE)
    weight = np.asarray(weight, dtype=DTYPE)
    if x.shape[-1] != weight.shape[-1]:
        raise ValueError(f"rms_norm length mismatch: {x.shape[-1]} vs {weight.shape[-1]}")
    if eps <= 0:
        raise ValueError("rms_norm eps must be positive")
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * inv * weight


def rms_norm_backward(grad_y: np.ndarray, x: np.ndarray, weight: np.ndarray, eps: float = 1e-5):
    """Return (grad_x, grad_weight summed over leading axes)."""
    n = x.shape[-1]
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    xhat = x * inv
    grad_w = (grad_y * xhat).reshape(-1, n).sum(axis=0)
    gh = grad_y * weight
    grad_x = inv * (gh - xhat * np.mean(gh * xhat, axis=-1, keepdims=True))
    return grad_x, grad_w


def _rope_angles(positions: np.ndarray, head_dim: int, base: float):
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=DTYPE) / head_dim)
    ang = np.asarray(positions, dtype=DTYPE)[:, None] * inv_freq[None, :]
    return np.cos(ang), np.sin(ang)


def rope_apply(x: np.ndarray, positions: Sequence[int], params: RopeParams,
               inverse: bool = False, axis: int = 0) -> np.ndarray:
    """Rotate interleaved channel pairs (0,1), (2,3), ... by position-dependent angles.

    ``x`` has shape ``(..., head_dim)`` and ``positions`` runs along ``axis``.
    ``inverse=True`` applies the transpose rotation, which is also the
    backward pass.
    """
    if x.shape[-1] % 2:
        raise ValueError(f"rope needs an even head_dim, got {x.shape[-1]}")
    if not params.enabled:
        return x
    positions = np.asarray(positions)
    axis = axis % x.ndim
    if positions.shape[0] != x.shape[axis]:
        raise ValueError("positions length must match the position axis")
    cos, sin = _rope_angles(positions, x.shape[-1], params.base)
    shape = [1] * x.ndim
    shape[axis] = x.shape[axis]
    shape[-1] = cos.shape[1]
    cos = cos.reshape(shape)
    sin = sin.reshape(shape)
    if inverse:
        sin = -sin
    x0 = x[..., 0::2]
    x1 = x[..., 1::2]
    out = np.empty_like(x, dtype=DTYPE)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5,
                     indices: Sequence[tuple] | None = None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    With ``indices`` only those coordinates are probed (others stay zero).
    ``x`` is perturbed in place and restored.
    """
    x = np.asarray(x, dtype=DTYPE)
    grad = np.zeros_like(x)
    coords = indices if indices is not None else list(np.ndindex(x.shape))
    for idx in coords:
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {idx}")
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b, floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a-b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
