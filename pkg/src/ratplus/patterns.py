"""Sparse attention patterns: which key positions each query may read.

A pattern is a :class:`SparsePatternSpec`. Two views are provided: per-query
:class:`AttendedSet` objects (labelled, used by the cache and online softmax),
and whole-sequence boolean masks (used by training and prefill).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from enum import IntEnum

import numpy as np

from .numerics import DTYPE

LOCAL_ONLY_DILATION = 1 << 30  # larger than any context: no block summaries


class Label(IntEnum):
    # higher value wins when a position qualifies under several labels
    SINK = 0
    BLOCK_SUMMARY = 1
    TOPK_BLOCK = 2
    LOCAL = 3
    SELF = 4


SCORINGS = ("quest", "moba")


@dataclass(frozen=True)
class TopK:
    block_size: int
    k: int
    scoring: str = "quest"

    def __post_init__(self):
        if self.block_size < 1:
            raise ValueError("topk.block_size must be >= 1")
        if self.k < 2:
            raise ValueError("topk.k must be >= 2 (first and current block are always kept)")
        if self.scoring not in SCORINGS:
            raise ValueError(f"topk.scoring must be one of {SCORINGS}, got {self.scoring!r}")


@dataclass(frozen=True)
class SparsePatternSpec:
    """One attention pattern.

    ``dilation=1`` is dense attention. ``recurrence_window=None`` means the
    recurrence runs over the full sequence. ``sinks=None`` resolves to 4 for
    sparse patterns and 0 for dense.
    """
    dilation: int = 1
    window: int = 0
    sinks: int | None = None
    recurrence_window: int | None = None
    active_length: int | None = None
    topk: TopK | None = None
    combine: bool = False

    def __post_init__(self):
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        if self.window < 0:
            raise ValueError("window must be >= 0")
        if self.sinks is None:
            sparse = self.dilation > 1 or self.topk is not None
            object.__setattr__(self, "sinks", 4 if sparse else 0)
        if self.sinks < 0:
            raise ValueError("sinks must be >= 0")
        if self.recurrence_window is not None and self.recurrence_window < 1:
            raise ValueError("recurrence_window must be >= 1 or full")
        if self.active_length is not None:
            if self.active_length < 1:
                raise ValueError("active_length must be >= 1")
            if self.recurrence_window is not None and self.active_length > self.recurrence_window:
                raise ValueError("active_length cannot exceed a finite recurrence_window")
        if self.combine and self.topk is None:
            raise ValueError("combine requires topk")

    @classmethod
    def dense(cls, **kw) -> "SparsePatternSpec":
        return cls(dilation=1, sinks=kw.pop("sinks", 0), **kw)

    @classmethod
    def local_only(cls, window: int, sinks: int = 4, **kw) -> "SparsePatternSpec":
        return cls(dilation=LOCAL_ONLY_DILATION, window=window, sinks=sinks, **kw)

    @property
    def is_dense(self) -> bool:
        return self.dilation == 1 and self.topk is None

    def label(self) -> str:
        parts = [f"D={self.dilation}" if self.dilation < LOCAL_ONLY_DILATION else "local"]
        if self.window:
            parts.append(f"W={self.window}")
        if self.sinks:
            parts.append(f"S={self.sinks}")
        if self.topk is not None:
            parts.append(f"{self.topk.scoring}(B={self.topk.block_size},K={self.topk.k})")
            if self.combine:
                parts.append("combine")
        if self.recurrence_window is not None:
            parts.append(f"L={self.recurrence_window}")
        return ",".join(parts)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["recurrence_window"] = "full" if self.recurrence_window is None else self.recurrence_window
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SparsePatternSpec":
        allowed = {"dilation", "window", "sinks", "recurrence_window", "active_length", "topk", "combine"}
        unknown = set(d) - allowed
        if unknown:
            raise KeyError(f"unknown pattern field(s): {sorted(unknown)}")
        d = dict(d)
        rw = d.get("recurrence_window")
        if rw in ("full", "FULL", "T"):
            d["recurrence_window"] = None
        tk = d.get("topk")
        if tk is not None:
            unknown = set(tk) - {"block_size", "k", "scoring"}
            if unknown:
                raise KeyError(f"unknown topk field(s): {sorted(unknown)}")
            d["topk"] = TopK(**{k: (v.lower() if k == "scoring" else v) for k, v in tk.items()})
        return cls(**d)


@dataclass
class PatternAssignment:
    per_layer: list
    per_head: dict = field(default_factory=dict)  # (layer, head) -> spec

    @classmethod
    def uniform(cls, spec: SparsePatternSpec, layers: int) -> "PatternAssignment":
        return cls([spec] * layers)

    def resolve(self, layer: int, head: int) -> SparsePatternSpec:
        return self.per_head.get((layer, head), self.per_layer[layer])

    def head_groups(self, layer: int, heads: int):
        """Group heads of a layer that share a spec: list of (spec, head index array)."""
        groups: dict = {}
        for h in range(heads):
            groups.setdefault(self.resolve(layer, h), []).append(h)
        return [(spec, np.array(hs)) for spec, hs in groups.items()]

    def to_dict(self) -> dict:
        return {
            "per_layer": [s.to_dict() for s in self.per_layer],
            "per_head": [{"layer": l, "head": h, "pattern": s.to_dict()}
                         for (l, h), s in sorted(self.per_head.items())],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PatternAssignment":
        per_layer = [SparsePatternSpec.from_dict(x) for x in d["per_layer"]]
        per_head = {(e["layer"], e["head"]): SparsePatternSpec.from_dict(e["pattern"])
                    for e in d.get("per_head", [])}
        return cls(per_layer, per_head)


@dataclass
class AttendedSet:
    t: int
    positions: np.ndarray  # sorted, int
    labels: np.ndarray  # Label values aligned with positions

    def __len__(self):
        return len(self.positions)

    def segments(self) -> dict:
        """Positions grouped by label (a partition of the set)."""
        return {Label(l): self.positions[self.labels == l] for l in np.unique(self.labels)}


def _build(t: int, labelled: dict) -> AttendedSet:
    pos = np.array(sorted(labelled), dtype=np.int64)
    lab = np.array([labelled[p] for p in pos], dtype=np.int64)
    return AttendedSet(t, pos, lab)


def _add(labelled: dict, positions, label: Label):
    for p in positions:
        p = int(p)
        if labelled.get(p, -1) < label:
            labelled[p] = label


def block_start(t: int, D: int) -> int:
    return (t // D) * D


def _base_sets(t: int, spec: SparsePatternSpec, labelled: dict, summaries: bool = True):
    D = spec.dilation
    _add(labelled, range(min(spec.sinks, t)), Label.SINK)
    if summaries:
        _add(labelled, range(D - 1, block_start(t, D), D), Label.BLOCK_SUMMARY)
    _add(labelled, range(max(0, t - spec.window), t), Label.LOCAL)
    _add(labelled, [t], Label.SELF)


def dilated_indices(t: int, spec: SparsePatternSpec) -> AttendedSet:
    """Sinks, one summary per complete earlier block, local window, and self."""
    if t < 0:
        raise ValueError("t must be >= 0")
    labelled: dict = {}
    _base_sets(t, spec, labelled)
    return _build(t, labelled)


def _count_summaries(lo: int, hi: int, D: int) -> int:
    # positions p in [lo, hi) with p % D == D - 1
    if hi <= lo:
        return 0
    return hi // D - lo // D


def expected_cache_entries(t: int, spec: SparsePatternSpec) -> int:
    """Entries held by a decode cache that has absorbed positions ``0..t-1``.

    Equals the number of distinct stored positions (sinks, block summaries,
    local window) plus one running-state slot, so it also equals the size of
    the attended set of query ``t``. Top-k patterns keep the full cache.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    if spec.topk is not None:
        return t + 1
    D, W = spec.dilation, spec.window
    bs = block_start(t, D)
    ns = min(spec.sinks, t)
    lo = max(0, t - W)
    n_sum = _count_summaries(0, bs, D)
    n_loc = t - lo
    sum_loc = _count_summaries(lo, bs, D)
    sink_loc = max(0, ns - lo)
    sink_sum = _count_summaries(0, min(ns, bs), D)
    sink_sum_loc = _count_summaries(lo, min(ns, bs), D)
    union = n_sum + n_loc + ns - sum_loc - (sink_loc + sink_sum - sink_sum_loc)
    return union + 1


def quest_block_score(q: np.ndarray, block_min: np.ndarray, block_max: np.ndarray) -> float:
    """Upper bound of ``q . k`` over a block from per-channel key min/max."""
    q = np.asarray(q, dtype=DTYPE)
    if not (q.shape == np.shape(block_min) == np.shape(block_max)):
        raise ValueError("quest score: length mismatch")
    return float(np.sum(np.maximum(q * block_min, q * block_max)))


def moba_block_score(q: np.ndarray, block_mean: np.ndarray) -> float:
    q = np.asarray(q, dtype=DTYPE)
    if q.shape != np.shape(block_mean):
        raise ValueError("moba score: length mismatch")
    return float(q @ np.asarray(block_mean, dtype=DTYPE))


def _block_score(q, block_keys, scoring):
    if scoring == "quest":
        return quest_block_score(q, block_keys.min(axis=0), block_keys.max(axis=0))
    return moba_block_score(q, block_keys.mean(axis=0))


def select_topk_blocks(t: int, q: np.ndarray, keys: np.ndarray, spec: SparsePatternSpec) -> list:
    """Blocks attended by query ``t``: first, current, and the best K-2 others.

    ``keys`` are the (gated, rotated) keys of one head, shape ``(>=t+1, head_dim)``.
    Ties go to the lower block id.
    """
    if spec.topk is None:
        raise ValueError("spec has no topk settings")
    B, K = spec.topk.block_size, spec.topk.k
    if K < 2:
        raise ValueError("topk.k must be >= 2")
    cur = t // B
    if cur + 1 <= K:
        return list(range(cur + 1))
    scored = [(-_block_score(q, keys[b * B:(b + 1) * B], spec.topk.scoring), b)
              for b in range(1, cur)]
    scored.sort()
    chosen = [b for _, b in scored[: K - 2]]
    return sorted({0, cur, *chosen})


def topk_indices(t: int, spec: SparsePatternSpec, q: np.ndarray, keys: np.ndarray) -> AttendedSet:
    """Top-k block pattern (plus block summaries of unselected blocks when ``combine``)."""
    B = spec.topk.block_size
    blocks = select_topk_blocks(t, q, keys, spec)
    labelled: dict = {}
    _base_sets(t, spec, labelled, summaries=False)
    if spec.combine:
        D = spec.dilation
        summ = [p for p in range(D - 1, block_start(t, D), D) if p // B not in blocks]
        _add(labelled, summ, Label.BLOCK_SUMMARY)
    for b in blocks:
        _add(labelled, range(b * B, min((b + 1) * B, t + 1)), Label.TOPK_BLOCK)
    _add(labelled, [t], Label.SELF)
    return _build(t, labelled)


def combined_indices(t: int, spec: SparsePatternSpec, q: np.ndarray, keys: np.ndarray) -> AttendedSet:
    if spec.topk is None:
        raise ValueError("combined pattern needs topk settings")
    if not spec.combine:
        spec = replace(spec, combine=True)
    return topk_indices(t, spec, q, keys)


def attended_set(t: int, spec: SparsePatternSpec, q=None, keys=None) -> AttendedSet:
    if spec.topk is None:
        return dilated_indices(t, spec)
    if q is None or keys is None:
        raise ValueError("top-k patterns need the query and keys")
    return topk_indices(t, spec, q, keys)


def static_mask(T: int, spec: SparsePatternSpec) -> np.ndarray:
    """Boolean ``(T, T)`` mask of a query-independent pattern (sinks/summaries/local/self)."""
    t = np.arange(T)[:, None]
    s = np.arange(T)[None, :]
    D = spec.dilation
    m = (s == t)
    m |= (s < t) & (s >= t - spec.window)
    m |= (s < t) & (s < spec.sinks)
    m |= (s % D == D - 1) & (s < (t // D) * D)
    return m


def topk_mask(spec: SparsePatternSpec, q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Vectorized top-k mask for ``q, k`` of shape ``(..., T, head_dim)`` -> ``(..., T, T)``."""
    B, K = spec.topk.block_size, spec.topk.k
    T = q.shape[-2]
    nb = (T + B - 1) // B
    pad = nb * B - T
    kp = np.pad(k, [(0, 0)] * (k.ndim - 2) + [(0, pad), (0, 0)], mode="edge")
    kb = kp.reshape(k.shape[:-2] + (nb, B, k.shape[-1]))
    qe = q[..., :, None, :]
    if spec.topk.scoring == "quest":
        lo = kb.min(axis=-2)[..., None, :, :]
        hi = kb.max(axis=-2)[..., None, :, :]
        score = np.maximum(qe * lo, qe * hi).sum(-1)
    else:
        score = (qe * kb.mean(axis=-2)[..., None, :, :]).sum(-1)
    tpos = np.arange(T)
    cur = tpos // B
    bid = np.arange(nb)
    candidate = (bid[None, :] >= 1) & (bid[None, :] < cur[:, None])
    score = np.where(candidate, score, np.inf * -1)
    order = np.argsort(-score, axis=-1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.broadcast_to(bid, order.shape), axis=-1)
    chosen = candidate & (rank < K - 2)
    few = (cur + 1 <= K)[:, None] & (bid[None, :] <= cur[:, None])
    forced = (bid[None, :] == 0) | (bid[None, :] == cur[:, None])
    sel = chosen | few | forced
    sel = sel & (bid[None, :] <= cur[:, None])
    s = np.arange(T)
    mask = np.take(sel, s // B, axis=-1) & (s[None, :] <= tpos[:, None])
    base = np.arange(T)[:, None]
    extra = (s[None, :] == base)
    extra |= (s[None, :] < base) & (s[None, :] >= base - spec.window)
    extra |= (s[None, :] < base) & (s[None, :] < spec.sinks)
    mask = mask | extra
    if spec.combine:
        D = spec.dilation
        summ = (s[None, :] % D == D - 1) & (s[None, :] < (base // D) * D)
        mask = mask | summ
    return mask


def pattern_mask(T: int, spec: SparsePatternSpec, q=None, k=None) -> np.ndarray:
    if spec.topk is None:
        return static_mask(T, spec)
    if q is None or k is None:
        raise ValueError("top-k patterns need the query and keys")
    return topk_mask(spec, q, k)
