"""Input-gated linear recurrence over attention keys and values.

For every channel: ``h_t = g_t * h_{t-1} + (1 - g_t) * x_t`` with ``h_{-1} = init``.
Time is axis 0 of every array; any trailing shape is treated as independent
channels.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import DTYPE, NumericError, check_finite, sigmoid

FULL = None  # recurrence window meaning "whole sequence"


@dataclass
class GateParams:
    w_gate: np.ndarray  # (model_dim, heads * head_dim), no bias
    heads: int

    @property
    def head_dim(self) -> int:
        return self.w_gate.shape[1] // self.heads


def gates_from_input(x: np.ndarray, params: GateParams) -> np.ndarray:
    """``sigmoid(x @ w_gate)`` reshaped to ``(T, heads, head_dim)``."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 2 or x.shape[1] != params.w_gate.shape[0]:
        raise ValueError(f"gate input {x.shape} does not match w_gate {params.w_gate.shape}")
    g = sigmoid(x @ params.w_gate)
    return g.reshape(x.shape[0], params.heads, params.head_dim)


def _check_inputs(x, g, init):
    x = np.asarray(x, dtype=DTYPE)
    g = np.asarray(g, dtype=DTYPE)
    if x.shape != g.shape:
        raise ValueError(f"x {x.shape} and g {g.shape} differ")
    check_finite(x, "recurrence input")
    check_finite(g, "recurrence gate")
    if init is None:
        init = np.zeros(x.shape[1:], dtype=DTYPE)
    else:
        init = check_finite(np.asarray(init, dtype=DTYPE), "recurrence init")
        if init.shape != x.shape[1:]:
            raise ValueError(f"init {init.shape} does not match channels {x.shape[1:]}")
    return x, g, init


def scan_sequential(x: np.ndarray, g: np.ndarray, init: np.ndarray | None = None) -> np.ndarray:
    x, g, init = _check_inputs(x, g, init)
    out = np.empty_like(x)
    h = init
    for t in range(x.shape[0]):
        h = g[t] * h + (1.0 - g[t]) * x[t]
        out[t] = h
    return out


def linear_scan(a: np.ndarray, b: np.ndarray, init: np.ndarray) -> np.ndarray:
    """Inclusive scan of ``h_t = a_t * h_{t-1} + b_t`` by a balanced (Blelloch) tree.

    Up-sweep builds subtree compositions, down-sweep distributes exclusive
    prefixes; pairing is fixed so results are bit-reproducible.
    """
    T = a.shape[0]
    if T == 0:
        return np.empty_like(b)
    n = 1 << (T - 1).bit_length()
    A = np.ones((n,) + a.shape[1:], dtype=DTYPE)
    B = np.zeros((n,) + b.shape[1:], dtype=DTYPE)
    A[:T] = a
    B[:T] = b
    leaf_a, leaf_b = A.copy(), B.copy()

    stride = 1
    while stride < n:
        right = np.arange(2 * stride - 1, n, 2 * stride)
        left = right - stride
        # right subtree runs after left: (A_r, B_r) o (A_l, B_l)
        B[right] = A[right] * B[left] + B[right]
        A[right] = A[right] * A[left]
        stride *= 2

    A[n - 1] = 1.0
    B[n - 1] = 0.0
    stride = n // 2
    while stride >= 1:
        right = np.arange(2 * stride - 1, n, 2 * stride)
        left = right - stride
        la, lb = A[left].copy(), B[left].copy()
        pa, pb = A[right].copy(), B[right].copy()
        A[left], B[left] = pa, pb
        # prefix for right subtree: prefix, then the whole left subtree
        A[right] = la * pa
        B[right] = la * pb + lb
        stride //= 2

    # inclusive = leaf applied after exclusive prefix
    inc_a = leaf_a[:T] * A[:T]
    inc_b = leaf_a[:T] * B[:T] + leaf_b[:T]
    return inc_a * init + inc_b


def scan_parallel(x: np.ndarray, g: np.ndarray, init: np.ndarray | None = None) -> np.ndarray:
    x, g, init = _check_inputs(x, g, init)
    return linear_scan(g, (1.0 - g) * x, init)


def scan_overlapped(x: np.ndarray, g: np.ndarray, L: int) -> np.ndarray:
    """Each output sees only its own trailing window of ``L`` tokens, zero-initialized.

    Evaluated directly as the weighted window sum
    ``y_t = sum_s (1 - g_{t-s}) * prod_{i=t-s+1..t} g_i * x_{t-s}``.
    """
    if L is None:
        return scan_sequential(x, g)
    if L < 1:
        raise ValueError(f"window L must be >= 1, got {L}")
    x, g, _ = _check_inputs(x, g, None)
    T = x.shape[0]
    if L >= T:
        return scan_sequential(x, g)
    out = np.zeros_like(x)
    carry = np.ones_like(g)  # prod of g over (t-s, t]
    for s in range(L):
        out[s:] += carry[s:] * (1.0 - g[: T - s]) * x[: T - s]
        carry[s + 1:] = carry[s + 1:] * g[1: T - s]
    return out


def scan_chunked(x: np.ndarray, g: np.ndarray, chunk: int) -> np.ndarray:
    """Non-overlapping chunks with the state reset to zero at every chunk start.

    Reference for the reset-based variant only; outputs early in each chunk see
    fewer tokens than later ones, unlike :func:`scan_overlapped`.
    """
    if chunk < 1:
        raise ValueError(f"chunk must be >= 1, got {chunk}")
    x, g, _ = _check_inputs(x, g, None)
    out = np.empty_like(x)
    for s in range(0, x.shape[0], chunk):
        out[s:s + chunk] = scan_sequential(x[s:s + chunk], g[s:s + chunk])
    return out


def window_from_full(h: np.ndarray, g: np.ndarray, L: int):
    """Convert a zero-init full scan into its length-``L`` windowed version.

    Linearity gives ``y_t = h_t - P_t * h_{t-L}`` with ``P_t`` the product of the
    last ``L`` gates. Returns ``(y, P)``; ``P`` is needed by the backward pass.
    """
    T = h.shape[0]
    if L is None or L >= T:
        return h, None
    logg = np.log(g)
    csum = np.cumsum(logg, axis=0)
    P = np.exp(csum[L:] - csum[:-L])  # for t = L..T-1
    y = h.copy()
    y[L:] = h[L:] - P * h[:-L]
    return y, P


def window_from_full_backward(grad_y, h, g, P, L):
    """Return ``(grad_h, grad_g)`` for :func:`window_from_full`."""
    if P is None:
        return grad_y, np.zeros_like(g)
    grad_h = grad_y.copy()
    grad_h[:-L] -= P * grad_y[L:]
    dP = -grad_y[L:] * h[:-L]
    w = dP * P  # d/dlog g_i summed over windows t in [i, i+L-1]
    csum = np.concatenate([np.zeros_like(w[:1]), np.cumsum(w, axis=0)])
    T = g.shape[0]
    # window t (row t-L of w) covers gates t-L+1..t, so gate i feeds t in [i, i+L-1]
    i = np.arange(T)
    lo = np.clip(i, L, T) - L
    hi = np.clip(i + L, L, T) - L
    grad_logg = csum[hi] - csum[lo]
    return grad_h, grad_logg / g


@dataclass
class ScanRecord:
    x: np.ndarray
    g: np.ndarray
    init: np.ndarray
    out: np.ndarray


def scan_forward(x, g, init=None, parallel: bool = True):
    """Run a scan and keep what :func:`scan_backward` needs."""
    x, g, init = _check_inputs(x, g, init)
    out = linear_scan(g, (1.0 - g) * x, init) if parallel else scan_sequential(x, g, init)
    return out, ScanRecord(x, g, init, out)


def scan_backward(grad_out: np.ndarray, record: ScanRecord | None):
    """Adjoints of the recurrence: returns ``(grad_x, grad_g, grad_init)``.

    The adjoint obeys the reversed recurrence ``a_t = grad_t + g_{t+1} * a_{t+1}``.
    """
    if record is None:
        raise ValueError("scan_backward needs the forward record")
    x, g, init, h = record.x, record.g, record.init, record.out
    grad_out = np.asarray(grad_out, dtype=DTYPE)
    T = x.shape[0]
    coef = np.zeros_like(g)
    coef[1:] = g[:0:-1][: T - 1]  # reversed index s uses g_{T-s}
    adj = linear_scan(coef, grad_out[::-1], np.zeros_like(init))[::-1]
    h_prev = np.concatenate([init[None], h[:-1]], axis=0)
    grad_x = (1.0 - g) * adj
    grad_g = adj * (h_prev - x)
    grad_init = g[0] * adj[0]
    return grad_x, grad_g, grad_init


@dataclass
class RecurrenceState:
    """Running decode state for one layer (all heads).

    With a finite window ``L`` the state also keeps the last ``L`` full-scan
    states and log-gates so the windowed value can be recovered exactly.
    """
    k_state: np.ndarray
    v_state: np.ndarray
    step: int = -1
    window: int | None = None
    k_hist: list = field(default_factory=list)
    v_hist: list = field(default_factory=list)
    logg_hist: list = field(default_factory=list)

    @classmethod
    def zeros(cls, heads: int, head_dim: int, window: int | None = None) -> "RecurrenceState":
        z = np.zeros((heads, head_dim), dtype=DTYPE)
        return cls(z, z.copy(), -1, window)

    def windowed(self):
        """Current (k_tilde, v_tilde) honoring the window."""
        L = self.window
        if L is None or self.step + 1 <= L:
            return self.k_state, self.v_state
        P = np.exp(np.sum(self.logg_hist[-L:], axis=0))
        return self.k_state - P * self.k_hist[0], self.v_state - P * self.v_hist[0]

    def nbytes(self, itemsize: int = 4) -> int:
        n = self.k_state.size * 2
        if self.window is not None:
            n += self.k_state.size * 3 * self.window
        return n * itemsize


def state_step(state: RecurrenceState, k_t: np.ndarray, v_t: np.ndarray, g_t: np.ndarray,
               t: int | None = None) -> RecurrenceState:
    """Absorb one token. ``t`` (if given) must be ``state.step + 1``."""
    if t is not None and t != state.step + 1:
        raise ValueError(f"out-of-order recurrence step: expected {state.step + 1}, got {t}")
    if not (np.all(np.isfinite(k_t)) and np.all(np.isfinite(v_t)) and np.all(np.isfinite(g_t))):
        raise NumericError("non-finite input to state_step")
    k_new = g_t * state.k_state + (1.0 - g_t) * k_t
    v_new = g_t * state.v_state + (1.0 - g_t) * v_t
    new = RecurrenceState(k_new, v_new, state.step + 1, state.window,
                          state.k_hist, state.v_hist, state.logg_hist)
    L = state.window
    if L is not None:
        # keep h_{t-L+1 .. t}'s predecessor chain: hist[0] is h_{t-L}
        new.k_hist = (state.k_hist + [state.k_state])[-L:]
        new.v_hist = (state.v_hist + [state.v_state])[-L:]
        new.logg_hist = (state.logg_hist + [np.log(g_t)])[-L:]
    return new


@dataclass
class GatedSequence:
    k_tilde: np.ndarray
    v_tilde: np.ndarray
    window: int | None = FULL


def gate_keys_values(k, v, g, window: int | None = FULL) -> GatedSequence:
    """Apply the same gates to keys and values (zero initial state)."""
    kt, _ = scan_forward(k, g)
    vt, _ = scan_forward(v, g)
    if window is not None:
        kt, _ = window_from_full(kt, g, window)
        vt, _ = window_from_full(vt, g, window)
    return GatedSequence(kt, vt, window)
