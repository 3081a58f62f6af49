"""Gated sparse attention over recurrence-smoothed keys and values.

``temporal_mixing_forward`` is the full block used by training and prefill:
bias-free q/k/v/gate projections, recurrence over k and v, RoPE on q and the
gated keys, pattern-masked softmax attention, and a sigmoid output gate in
front of the output projection.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import recurrence as rec
from .numerics import DTYPE, NumericError, RopeParams, check_finite, rope_apply, sigmoid
from .patterns import AttendedSet, PatternAssignment, SparsePatternSpec, pattern_mask

MIX_PARAM_NAMES = ("wq", "wk", "wv", "wg", "wog", "wo")


@dataclass
class MixingParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wg: np.ndarray  # recurrence gate projection
    wog: np.ndarray  # output gate projection
    wo: np.ndarray
    heads: int

    @property
    def head_dim(self) -> int:
        return self.wq.shape[1] // self.heads

    @property
    def model_dim(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def init(cls, model_dim: int, heads: int, head_dim: int, rng, std: float = 0.02) -> "MixingParams":
        gd = heads * head_dim
        return cls(
            wq=rng.normal((model_dim, gd), std), wk=rng.normal((model_dim, gd), std),
            wv=rng.normal((model_dim, gd), std), wg=rng.normal((model_dim, gd), std),
            wog=rng.normal((model_dim, gd), std), wo=rng.normal((gd, model_dim), std),
            heads=heads)

    def arrays(self) -> dict:
        return {n: getattr(self, n) for n in MIX_PARAM_NAMES}


def default_scale(head_dim: int) -> float:
    return 1.0 / np.sqrt(head_dim)


# single-query paths -------------------------------------------------------

def attend_oracle(q: np.ndarray, k_tilde: np.ndarray, v_tilde: np.ndarray,
                  attended: AttendedSet | np.ndarray, scale: float | None = None) -> np.ndarray:
    """Materialize every logit of the attended positions and do one softmax."""
    pos = attended.positions if isinstance(attended, AttendedSet) else np.asarray(attended)
    if len(pos) == 0:
        raise ValueError("empty attended set")
    scale = default_scale(q.shape[-1]) if scale is None else scale
    logits = (k_tilde[pos] @ q) * scale
    w = np.exp(logits - logits.max())
    w /= w.sum()
    return w @ v_tilde[pos]


@dataclass
class SoftmaxPartial:
    """Running softmax summary (max, denominator, weighted value sum).

    ``m`` and ``s`` are scalars for a single query or arrays with one entry
    per head; ``num`` carries a trailing head_dim axis.
    """
    m: np.ndarray | float = -np.inf
    s: np.ndarray | float = 0.0
    num: np.ndarray | None = None

    def merge(self, other: "SoftmaxPartial") -> "SoftmaxPartial":
        if other.num is None:
            return self
        if self.num is None:
            return other
        m = np.maximum(self.m, other.m)
        a, b = np.exp(self.m - m), np.exp(other.m - m)
        s = self.s * a + other.s * b
        num = self.num * np.expand_dims(a, -1) + other.num * np.expand_dims(b, -1)
        return SoftmaxPartial(m, s, num)

    def value(self) -> np.ndarray:
        if self.num is None:
            raise ValueError("no segments were merged")
        return self.num / np.expand_dims(self.s, -1)


def segment_partial(q, keys, values, scale) -> SoftmaxPartial:
    """Partial for ``q`` of shape ``(..., hd)`` over ``keys/values`` of shape ``(n, ..., hd)``."""
    logits = np.einsum("...d,n...d->...n", q, keys) * scale
    m = logits.max(axis=-1)
    e = np.exp(logits - np.expand_dims(m, -1))
    return SoftmaxPartial(m, e.sum(axis=-1), np.einsum("...n,n...d->...d", e, values))


def attend_online(q: np.ndarray, k_tilde: np.ndarray, v_tilde: np.ndarray, segments,
                  scale: float | None = None, return_weights: bool = False):
    """Attention as a merge of per-segment softmax partials.

    ``segments`` is an iterable of position arrays that must not overlap.
    """
    scale = default_scale(q.shape[-1]) if scale is None else scale
    segs = [np.asarray(s, dtype=np.int64) for s in segments if len(s)]
    allpos = np.concatenate(segs) if segs else np.empty(0, dtype=np.int64)
    if len(np.unique(allpos)) != len(allpos):
        raise ValueError("overlapping attention segments")
    acc = SoftmaxPartial()
    for seg in segs:
        acc = acc.merge(segment_partial(q, k_tilde[seg], v_tilde[seg], scale))
    out = acc.value()
    if not return_weights:
        return out
    weights = np.exp((k_tilde[allpos] @ q) * scale - acc.m) / acc.s
    return out, allpos, weights


# whole-sequence block -----------------------------------------------------

@dataclass
class MixingRecord:
    x: np.ndarray
    groups: list  # [(spec, head index array)]
    rope: RopeParams
    scale: float
    q: np.ndarray
    g: np.ndarray
    k_rec: object
    v_rec: object
    k_full: np.ndarray
    v_full: np.ndarray
    window_P: dict = field(default_factory=dict)
    qr: np.ndarray = None
    kr: np.ndarray = None
    vt: np.ndarray = None
    probs: np.ndarray = None
    attn: np.ndarray = None
    og: np.ndarray = None
    z: np.ndarray = None
    positions: np.ndarray = None
    squeeze: bool = False
    open_output_gate: bool = False
    force_gate: float | None = None


def _as_groups(pattern, heads: int, layer: int = 0):
    if isinstance(pattern, SparsePatternSpec):
        return [(pattern, np.arange(heads))]
    if isinstance(pattern, PatternAssignment):
        return pattern.head_groups(layer, heads)
    return list(pattern)


def _windowed(full, g, groups, axis_T=1):
    """Apply per-group finite recurrence windows; returns (values, {group idx: P})."""
    out = full
    Ps = {}
    for gi, (spec, hs) in enumerate(groups):
        L = spec.recurrence_window
        if L is None or L >= full.shape[axis_T]:
            continue
        if out is full:
            out = full.copy()
        h = np.moveaxis(full[:, :, hs], 1, 0)
        gg = np.moveaxis(g[:, :, hs], 1, 0)
        y, P = rec.window_from_full(h, gg, L)
        out[:, :, hs] = np.moveaxis(y, 0, 1)
        Ps[gi] = P
    return out, Ps


def gated_kv(x: np.ndarray, params: MixingParams, pattern, layer: int = 0):
    """Recurrence outputs ``(k_tilde, v_tilde)`` (pre-RoPE) for ``x`` of shape (B, T, model_dim)."""
    B, T, _ = x.shape
    H, hd = params.heads, params.head_dim
    groups = _as_groups(pattern, H, layer)
    k = (x @ params.wk).reshape(B, T, H, hd)
    v = (x @ params.wv).reshape(B, T, H, hd)
    g = sigmoid(x @ params.wg).reshape(B, T, H, hd)
    kf, _ = rec.scan_forward(np.moveaxis(k, 1, 0), np.moveaxis(g, 1, 0))
    vf, _ = rec.scan_forward(np.moveaxis(v, 1, 0), np.moveaxis(g, 1, 0))
    kt, _ = _windowed(np.moveaxis(kf, 0, 1), g, groups)
    vt, _ = _windowed(np.moveaxis(vf, 0, 1), g, groups)
    return kt, vt


def _gated_projections(x, params: MixingParams, groups, force_gate):
    B, T, _ = x.shape
    H, hd = params.heads, params.head_dim
    q = (x @ params.wq).reshape(B, T, H, hd)
    k = (x @ params.wk).reshape(B, T, H, hd)
    v = (x @ params.wv).reshape(B, T, H, hd)
    if force_gate is None:
        g = sigmoid(x @ params.wg).reshape(B, T, H, hd)
    else:
        g = np.full((B, T, H, hd), float(force_gate))
    gT = np.moveaxis(g, 1, 0)
    kf, k_rec = rec.scan_forward(np.moveaxis(k, 1, 0), gT)
    vf, v_rec = rec.scan_forward(np.moveaxis(v, 1, 0), gT)
    k_full, v_full = np.moveaxis(kf, 0, 1), np.moveaxis(vf, 0, 1)
    kt, Pk = _windowed(k_full, g, groups)
    vt, Pv = _windowed(v_full, g, groups)
    return q, g, k_rec, v_rec, k_full, v_full, kt, vt, Pk, Pv


def temporal_mixing_forward(x: np.ndarray, params: MixingParams, pattern, rope: RopeParams,
                            layer: int = 0, scale: float | None = None, positions=None,
                            force_gate: float | None = None, open_output_gate: bool = False):
    """Run the block on ``x`` of shape ``(T, model_dim)`` or ``(B, T, model_dim)``.

    ``pattern`` is a spec, a :class:`PatternAssignment`, or explicit head
    groups. ``force_gate`` pins every recurrence gate (e.g. 0 to disable the
    recurrence); ``open_output_gate`` replaces the output gate with ones.
    Returns ``(y, record)``.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    x = np.asarray(x, dtype=DTYPE)
    B, T, Dm = x.shape
    if Dm != params.model_dim:
        raise ValueError(f"input width {Dm} does not match params {params.model_dim}")
    H, hd = params.heads, params.head_dim
    scale = default_scale(hd) if scale is None else scale
    groups = _as_groups(pattern, H, layer)
    pos = np.arange(T) if positions is None else np.asarray(positions)

    q, g, k_rec, v_rec, k_full, v_full, kt, vt, Pk, Pv = _gated_projections(x, params, groups, force_gate)
    qr = rope_apply(q, pos, rope, axis=1)
    kr = rope_apply(kt, pos, rope, axis=1)
    qh = qr.transpose(0, 2, 1, 3)
    kh = kr.transpose(0, 2, 1, 3)
    vh = vt.transpose(0, 2, 1, 3)
    logits = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    mask = np.zeros((B, H, T, T), dtype=bool)
    for spec, hs in groups:
        if spec.topk is None:
            mask[:, hs] = pattern_mask(T, spec)
        else:
            mask[:, hs] = pattern_mask(T, spec, qh[:, hs], kh[:, hs])
    logits = np.where(mask, logits, -np.inf)
    mx = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - mx)
    probs = e / e.sum(axis=-1, keepdims=True)
    attn = (probs @ vh).transpose(0, 2, 1, 3).reshape(B, T, H * hd)

    og = np.ones_like(attn) if open_output_gate else sigmoid(x @ params.wog)
    z = og * attn
    y = z @ params.wo
    check_finite(y, "temporal mixing output")
    record = MixingRecord(x=x, groups=groups, rope=rope, scale=scale, q=q, g=g,
                          k_rec=k_rec, v_rec=v_rec, k_full=k_full, v_full=v_full,
                          window_P={"k": Pk, "v": Pv}, qr=qr, kr=kr, vt=vt, probs=probs,
                          attn=attn, og=og, z=z, positions=pos, squeeze=squeeze,
                          open_output_gate=open_output_gate, force_gate=force_gate)
    return (y[0] if squeeze else y), record


def temporal_mixing_infer(x: np.ndarray, params: MixingParams, pattern, rope: RopeParams,
                          layer: int = 0, scale: float | None = None, force_gate: float | None = None,
                          chunk: int = 256):
    """Forward-only block over ``x`` of shape ``(T, model_dim)`` processing ``chunk`` queries at a time.

    Same output as :func:`temporal_mixing_forward` without keeping the ``T x T``
    probabilities. Returns ``(y, record)`` where the record carries the gated
    keys/values and recurrence states needed to seed a decode cache.
    """
    x = np.asarray(x, dtype=DTYPE)[None]
    _, T, Dm = x.shape
    if Dm != params.model_dim:
        raise ValueError(f"input width {Dm} does not match params {params.model_dim}")
    H, hd = params.heads, params.head_dim
    scale = default_scale(hd) if scale is None else scale
    groups = _as_groups(pattern, H, layer)
    pos = np.arange(T)
    q, g, _, _, k_full, v_full, kt, vt, _, _ = _gated_projections(x, params, groups, force_gate)
    qh = rope_apply(q, pos, rope, axis=1)[0].transpose(1, 0, 2)  # (H, T, hd)
    kr = rope_apply(kt, pos, rope, axis=1)
    kh = kr[0].transpose(1, 0, 2)
    vh = vt[0].transpose(1, 0, 2)
    masks = []
    for spec, hs in groups:
        m = pattern_mask(T, spec) if spec.topk is None else pattern_mask(T, spec, qh[hs], kh[hs])
        masks.append((hs, m))
    attn = np.empty((H, T, hd))
    for r0 in range(0, T, chunk):
        r1 = min(T, r0 + chunk)
        logits = (qh[:, r0:r1] @ kh.transpose(0, 2, 1)) * scale
        for hs, m in masks:
            rows = m[r0:r1] if m.ndim == 2 else m[:, r0:r1]
            logits[hs] = np.where(rows, logits[hs], -np.inf)
        e = np.exp(logits - logits.max(axis=-1, keepdims=True))
        attn[:, r0:r1] = (e / e.sum(axis=-1, keepdims=True)) @ vh
    attn = attn.transpose(1, 0, 2).reshape(1, T, H * hd)
    y = (sigmoid(x @ params.wog) * attn) @ params.wo
    check_finite(y, "temporal mixing output")
    record = MixingRecord(x=x, groups=groups, rope=rope, scale=scale, q=q, g=g, k_rec=None, v_rec=None,
                          k_full=k_full, v_full=v_full, window_P={}, qr=None, kr=kr, vt=vt, probs=None,
                          attn=attn, og=None, z=None, positions=pos, squeeze=True,
                          open_output_gate=False, force_gate=force_gate)
    return y[0], record


def temporal_mixing_backward(grad_y: np.ndarray, params: MixingParams, record: MixingRecord,
                             pattern=None):
    """Analytic adjoints of :func:`temporal_mixing_forward`.

    Returns ``(grad_x, grads)`` with ``grads`` keyed like :data:`MIX_PARAM_NAMES`.
    Top-k block selection is treated as a fixed mask.
    """
    if record is None:
        raise ValueError("missing forward record")
    if pattern is not None:
        groups = _as_groups(pattern, params.heads)
        same = len(groups) == len(record.groups) and all(
            s1 == s2 and np.array_equal(h1, h2) for (s1, h1), (s2, h2) in zip(groups, record.groups))
        if not same:
            raise ValueError("pattern differs from the one used in the forward pass")
    x = record.x
    gy = np.asarray(grad_y, dtype=DTYPE)
    if record.squeeze:
        gy = gy[None]
    B, T, Dm = x.shape
    H, hd = params.heads, params.head_dim
    xf = x.reshape(-1, Dm)

    grads = {}
    grads["wo"] = record.z.reshape(-1, H * hd).T @ gy.reshape(-1, Dm)
    dz = gy @ params.wo.T
    d_attn = dz * record.og
    if record.open_output_gate:
        grads["wog"] = np.zeros_like(params.wog)
        dx = np.zeros_like(x)
    else:
        d_ogl = dz * record.attn * record.og * (1.0 - record.og)
        grads["wog"] = xf.T @ d_ogl.reshape(-1, H * hd)
        dx = d_ogl @ params.wog.T

    dO = d_attn.reshape(B, T, H, hd).transpose(0, 2, 1, 3)
    P = record.probs
    vh = record.vt.transpose(0, 2, 1, 3)
    qh = record.qr.transpose(0, 2, 1, 3)
    kh = record.kr.transpose(0, 2, 1, 3)
    dP = dO @ vh.transpose(0, 1, 3, 2)
    dvh = P.transpose(0, 1, 3, 2) @ dO
    dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) * record.scale
    dqh = dS @ kh
    dkh = dS.transpose(0, 1, 3, 2) @ qh

    pos = record.positions
    dq = rope_apply(dqh.transpose(0, 2, 1, 3), pos, record.rope, inverse=True, axis=1)
    dkt = rope_apply(dkh.transpose(0, 2, 1, 3), pos, record.rope, inverse=True, axis=1)
    dvt = dvh.transpose(0, 2, 1, 3)

    g = record.g
    dg = np.zeros_like(g)
    dk_full, dv_full = dkt, dvt
    for name, full, Ps in (("k", record.k_full, record.window_P["k"]),
                           ("v", record.v_full, record.window_P["v"])):
        if not Ps:
            continue
        dfull = (dk_full if name == "k" else dv_full).copy()
        for gi, Pmat in Ps.items():
            spec, hs = record.groups[gi]
            L = spec.recurrence_window
            dyh = np.moveaxis(dfull[:, :, hs], 1, 0)
            dh, dgw = rec.window_from_full_backward(
                dyh, np.moveaxis(full[:, :, hs], 1, 0), np.moveaxis(g[:, :, hs], 1, 0), Pmat, L)
            dfull[:, :, hs] = np.moveaxis(dh, 0, 1)
            dg[:, :, hs] += np.moveaxis(dgw, 0, 1)
        if name == "k":
            dk_full = dfull
        else:
            dv_full = dfull

    dk, dgk, _ = rec.scan_backward(np.moveaxis(dk_full, 1, 0), record.k_rec)
    dv, dgv, _ = rec.scan_backward(np.moveaxis(dv_full, 1, 0), record.v_rec)
    dg += np.moveaxis(dgk + dgv, 0, 1)
    dk = np.moveaxis(dk, 0, 1)
    dv = np.moveaxis(dv, 0, 1)

    flat = lambda a: a.reshape(-1, H * hd)
    grads["wq"] = xf.T @ flat(dq)
    grads["wk"] = xf.T @ flat(dk)
    grads["wv"] = xf.T @ flat(dv)
    dx = dx + flat(dq).reshape(B, T, -1) @ params.wq.T
    dx = dx + flat(dk).reshape(B, T, -1) @ params.wk.T
    dx = dx + flat(dv).reshape(B, T, -1) @ params.wv.T
    if record.force_gate is None:
        dgl = dg * g * (1.0 - g)
        grads["wg"] = xf.T @ flat(dgl)
        dx = dx + flat(dgl).reshape(B, T, -1) @ params.wg.T
    else:
        grads["wg"] = np.zeros_like(params.wg)
    if not np.all(np.isfinite(dx)):
        raise NumericError("non-finite gradient in temporal mixing")
    return (dx[0] if record.squeeze else dx), grads
