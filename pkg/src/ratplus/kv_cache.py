"""Decode-time cache for one temporal-mixing layer.

Only gated (recurrence) keys/values are stored: sink tokens, one summary per
completed dilation block, and an optional ring of the last ``W`` tokens. The
running recurrence state supplies the query token's own entry, so a dilated
cache grows as ``O(t / D + W)``. Top-k patterns keep every entry.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import (MixingParams, SoftmaxPartial, _as_groups, default_scale, segment_partial,
                        temporal_mixing_infer)
from .container import read_container, write_container
from .numerics import DTYPE, RopeParams, rope_apply, sigmoid
from .patterns import Label, SparsePatternSpec, expected_cache_entries, topk_indices
from .recurrence import RecurrenceState, state_step

STORAGE_ITEMSIZE = 4  # declared f32 storage


class _Buffer:
    """Append-only (positions, keys, values) store with amortized growth."""

    def __init__(self, heads: int, head_dim: int, capacity: int = 16):
        self.n = 0
        self.pos = np.empty(capacity, dtype=np.int64)
        self.k = np.empty((capacity, heads, head_dim), dtype=DTYPE)
        self.v = np.empty((capacity, heads, head_dim), dtype=DTYPE)

    def append(self, p: int, k: np.ndarray, v: np.ndarray):
        if self.n == len(self.pos):
            cap = max(16, 2 * self.n)
            self.pos = np.resize(self.pos, cap)
            self.k = np.concatenate([self.k[: self.n], np.empty((cap - self.n,) + self.k.shape[1:])])
            self.v = np.concatenate([self.v[: self.n], np.empty((cap - self.n,) + self.v.shape[1:])])
        self.pos[self.n] = p
        self.k[self.n] = k
        self.v[self.n] = v
        self.n += 1

    def view(self):
        return self.pos[: self.n], self.k[: self.n], self.v[: self.n]


class _Ring:
    def __init__(self, size: int, heads: int, head_dim: int):
        self.size = size
        self.pos = np.full(size, -1, dtype=np.int64)
        self.k = np.zeros((size, heads, head_dim), dtype=DTYPE)
        self.v = np.zeros((size, heads, head_dim), dtype=DTYPE)

    def push(self, p: int, k, v):
        if self.size == 0:
            return
        i = p % self.size
        self.pos[i], self.k[i], self.v[i] = p, k, v

    def view(self):
        ok = self.pos >= 0
        order = np.argsort(self.pos[ok])
        return self.pos[ok][order], self.k[ok][order], self.v[ok][order]


@dataclass
class GroupCache:
    """Cache of the heads sharing one pattern inside a layer."""
    spec: SparsePatternSpec
    heads: np.ndarray
    head_dim: int
    state: RecurrenceState
    sinks: _Buffer = None
    summaries: _Buffer = None
    ring: _Ring = None
    full: _Buffer = None

    def __post_init__(self):
        H = len(self.heads)
        self.sinks = _Buffer(H, self.head_dim, max(1, self.spec.sinks))
        self.summaries = _Buffer(H, self.head_dim)
        self.ring = _Ring(self.spec.window, H, self.head_dim)
        self.full = _Buffer(H, self.head_dim) if self.spec.topk is not None else None

    def store(self, p: int, k, v):
        spec = self.spec
        if self.full is not None:
            self.full.append(p, k, v)
            return
        if p < spec.sinks:
            self.sinks.append(p, k, v)
        elif p % spec.dilation == spec.dilation - 1:
            self.summaries.append(p, k, v)
        self.ring.push(p, k, v)

    def stored_positions(self) -> np.ndarray:
        if self.full is not None:
            return self.full.view()[0]
        parts = [self.sinks.view()[0], self.summaries.view()[0], self.ring.view()[0]]
        return np.unique(np.concatenate(parts))

    def entries(self) -> int:
        return len(self.stored_positions()) + 1

    def segments(self, t: int):
        """Labelled (positions, keys, values) segments read by query ``t`` (excluding self)."""
        lo = t - self.spec.window
        rp, rk, rv = self.ring.view()
        keep = rp >= lo
        segs = {Label.LOCAL: (rp[keep], rk[keep], rv[keep])}
        sp, sk, sv = self.summaries.view()
        keep = sp < lo
        segs[Label.BLOCK_SUMMARY] = (sp[keep], sk[keep], sv[keep])
        kp, kk, kv = self.sinks.view()
        keep = kp < lo
        segs[Label.SINK] = (kp[keep], kk[keep], kv[keep])
        return segs


@dataclass
class DilatedKVCache:
    groups: list
    rope: RopeParams
    scale: float
    t: int = -1  # last absorbed position
    reads: int = 0  # entries read by the most recent decode step (incl. self)

    @property
    def spec(self) -> SparsePatternSpec:
        return self.groups[0].spec

    def expected_entries(self) -> int:
        return sum(expected_cache_entries(self.t + 1, g.spec) for g in self.groups)


def new_cache(params: MixingParams, pattern, rope: RopeParams, layer: int = 0,
              scale: float | None = None) -> DilatedKVCache:
    groups = []
    for spec, hs in _as_groups(pattern, params.heads, layer):
        st = RecurrenceState.zeros(len(hs), params.head_dim, spec.recurrence_window)
        groups.append(GroupCache(spec, np.asarray(hs), params.head_dim, st))
    return DilatedKVCache(groups, rope, default_scale(params.head_dim) if scale is None else scale)


def decode_step(cache: DilatedKVCache, x_t: np.ndarray, params: MixingParams, t: int | None = None):
    """Absorb token ``cache.t + 1`` and return its block output.

    The cache is updated in place and also returned.
    """
    t_new = cache.t + 1
    if t is not None and t != t_new:
        raise ValueError(f"out-of-order decode: cache expects position {t_new}, got {t}")
    x_t = np.asarray(x_t, dtype=DTYPE)
    H, hd = params.heads, params.head_dim
    q = (x_t @ params.wq).reshape(H, hd)
    k = (x_t @ params.wk).reshape(H, hd)
    v = (x_t @ params.wv).reshape(H, hd)
    g = sigmoid(x_t @ params.wg).reshape(H, hd)
    og = sigmoid(x_t @ params.wog)
    pos = np.array([t_new])
    attn = np.empty((H, hd))
    reads = 0
    for grp in cache.groups:
        hs = grp.heads
        grp.state = state_step(grp.state, k[hs], v[hs], g[hs], t_new)
        kt, vt = grp.state.windowed()
        kr = rope_apply(kt[None], pos, cache.rope)[0]
        qr = rope_apply(q[hs][None], pos, cache.rope)[0]
        if grp.full is not None:
            grp.full.append(t_new, kr, vt)
            out, n = _topk_attend(grp, t_new, qr, cache.scale)
        else:
            acc = segment_partial(qr, kr[None], vt[None], cache.scale)
            n = 1
            for _, (p, ks, vs) in grp.segments(t_new).items():
                if len(p):
                    acc = acc.merge(segment_partial(qr, ks, vs, cache.scale))
                    n += len(p)
            out = acc.value()
            grp.store(t_new, kr, vt)
        attn[hs] = out
        reads += n
    cache.t = t_new
    cache.reads = reads
    y = (og * attn.reshape(-1)) @ params.wo
    return y, cache


def _topk_attend(grp: GroupCache, t: int, qr: np.ndarray, scale: float):
    pos, K, V = grp.full.view()
    out = np.empty_like(qr)
    n = 0
    for i in range(len(grp.heads)):
        aset = topk_indices(t, grp.spec, qr[i], K[:, i])
        acc = SoftmaxPartial()
        for _, seg in aset.segments().items():
            acc = acc.merge(segment_partial(qr[i], K[seg, i], V[seg, i], scale))
        out[i] = acc.value()
        n = max(n, len(aset))
    return out, n


def prefill(x: np.ndarray, params: MixingParams, pattern, rope: RopeParams, layer: int = 0,
            scale: float | None = None):
    """Batch forward over ``x`` of shape ``(T, model_dim)`` plus a cache ready for position ``T``."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("prefill expects (T >= 1, model_dim) input")
    y, record = temporal_mixing_infer(x, params, pattern, rope, layer=layer, scale=scale)
    cache = new_cache(params, pattern, rope, layer, scale)
    T = x.shape[0]
    kr, vt = record.kr[0], record.vt[0]  # (T, H, hd)
    kf, vf = record.k_full[0], record.v_full[0]
    logg = np.log(record.g[0])
    for grp in cache.groups:
        hs = grp.heads
        for p in range(T):
            grp.store(p, kr[p][hs], vt[p][hs])
        st = grp.state
        st.k_state, st.v_state, st.step = kf[T - 1][hs].copy(), vf[T - 1][hs].copy(), T - 1
        L = st.window
        if L is not None:
            # predecessors h_{T-1-L} .. h_{T-2}; h_{-1} is zero
            prev_k = [np.zeros_like(st.k_state)] + [kf[p][hs] for p in range(T - 1)]
            prev_v = [np.zeros_like(st.v_state)] + [vf[p][hs] for p in range(T - 1)]
            st.k_hist = [a.copy() for a in prev_k[-L:]]
            st.v_hist = [a.copy() for a in prev_v[-L:]]
            st.logg_hist = [logg[p][hs].copy() for p in range(max(0, T - L), T)]
    cache.t = T - 1
    return y, cache


def cache_footprint(cache: DilatedKVCache) -> dict:
    """Exact stored entry count and bytes at f32 storage (keys + values + state)."""
    entries = 0
    nbytes = 0
    for grp in cache.groups:
        stored = len(grp.stored_positions())
        entries += stored + 1
        nbytes += stored * 2 * len(grp.heads) * grp.head_dim * STORAGE_ITEMSIZE
        nbytes += grp.state.nbytes(STORAGE_ITEMSIZE)
    return {"entries": entries, "bytes": nbytes}


# snapshot io ---------------------------------------------------------------

def save_cache(cache: DilatedKVCache, path) -> None:
    meta = {"kind": "kv_cache", "t": cache.t, "scale": cache.scale,
            "rope": {"head_dim": cache.rope.head_dim, "base": cache.rope.base,
                     "enabled": cache.rope.enabled},
            "groups": [{"spec": g.spec.to_dict(), "heads": [int(h) for h in g.heads],
                        "head_dim": g.head_dim, "step": g.state.step} for g in cache.groups]}
    arrays = {}
    for i, g in enumerate(cache.groups):
        pre = f"g{i}."
        arrays[pre + "k_state"] = g.state.k_state
        arrays[pre + "v_state"] = g.state.v_state
        if g.state.window is not None and g.state.k_hist:
            arrays[pre + "k_hist"] = np.stack(g.state.k_hist)
            arrays[pre + "v_hist"] = np.stack(g.state.v_hist)
            arrays[pre + "logg_hist"] = np.stack(g.state.logg_hist)
        stores = {"full": g.full} if g.full is not None else {"sinks": g.sinks, "summaries": g.summaries}
        for name, buf in stores.items():
            p, k, v = buf.view()
            arrays[pre + name + ".pos"] = p.astype(np.float64)
            arrays[pre + name + ".k"] = k
            arrays[pre + name + ".v"] = v
        if g.full is None and g.spec.window:
            p, k, v = g.ring.view()
            arrays[pre + "ring.pos"] = p.astype(np.float64)
            arrays[pre + "ring.k"] = k
            arrays[pre + "ring.v"] = v
    write_container(path, meta, arrays)


def load_cache(path) -> DilatedKVCache:
    meta, arrays = read_container(path, expect_kind="kv_cache")
    r = meta["rope"]
    rope = RopeParams(r["head_dim"], r["base"], r["enabled"])
    groups = []
    for i, gm in enumerate(meta["groups"]):
        pre = f"g{i}."
        spec = SparsePatternSpec.from_dict(gm["spec"])
        hs = np.array(gm["heads"])
        st = RecurrenceState(arrays[pre + "k_state"], arrays[pre + "v_state"], gm["step"],
                             spec.recurrence_window)
        if pre + "k_hist" in arrays:
            st.k_hist = list(arrays[pre + "k_hist"])
            st.v_hist = list(arrays[pre + "v_hist"])
            st.logg_hist = list(arrays[pre + "logg_hist"])
        grp = GroupCache(spec, hs, gm["head_dim"], st)
        names = ("full",) if spec.topk is not None else ("sinks", "summaries")
        for name in names:
            buf = getattr(grp, name)
            for p, k, v in zip(arrays[pre + name + ".pos"], arrays[pre + name + ".k"],
                               arrays[pre + name + ".v"]):
                buf.append(int(p), k, v)
        if pre + "ring.pos" in arrays:
            for p, k, v in zip(arrays[pre + "ring.pos"], arrays[pre + "ring.k"], arrays[pre + "ring.v"]):
                grp.ring.push(int(p), k, v)
        groups.append(grp)
    return DilatedKVCache(groups, rope, meta["scale"], meta["t"])
