"""Self-checking oracle suite: every fast path against an independent slow path."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import kv_cache
from . import recurrence as rec
from .attention import MixingParams, attend_oracle, attend_online, temporal_mixing_backward, temporal_mixing_forward
from .model import ModelConfig, RatPlusModel
from .numerics import RopeParams, Rng, finite_diff_grad, relative_error, rope_apply
from .patterns import (Label, SparsePatternSpec, TopK, attended_set, expected_cache_entries, pattern_mask,
                       quest_block_score)

DEFAULT_SIZES = (1, 2, 5, 31, 64)
FAULTS = ("scan",)


@dataclass
class CheckResult:
    module: str
    case: str
    max_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_error <= self.tol)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.module:<11} {self.case:<34} max_err={self.max_error:.3g} tol={self.tol:g}"


def random_spec(rng: Rng, max_dilation: int = 8, max_window: int = 5, sinks=(0, 4), topk=None,
                recurrence_window: bool = False) -> SparsePatternSpec:
    """Random pattern: ``topk`` None picks on/off at random."""
    D = int(rng.integers(1, max_dilation + 1))
    W = int(rng.integers(0, max_window + 1))
    S = int(rng.choice(np.asarray(sinks)))
    use_topk = bool(rng.integers(0, 2)) if topk is None else topk
    L = int(rng.integers(1, 12)) if recurrence_window and rng.integers(0, 2) else None
    if use_topk:
        tk = TopK(int(rng.integers(1, 6)), int(rng.integers(2, 5)), "quest" if rng.integers(0, 2) else "moba")
        return SparsePatternSpec(D, W, S, recurrence_window=L, topk=tk, combine=bool(rng.integers(0, 2)))
    return SparsePatternSpec(D, W, S, recurrence_window=L)


def _bad_linear_scan(a, b, init):
    out = _GOOD_LINEAR_SCAN(a, b, init)
    out = out.copy()
    out[-1] = out[-1] * 1.001 + 1e-3
    return out


_GOOD_LINEAR_SCAN = rec.linear_scan


@contextlib.contextmanager
def inject_fault(name: str | None):
    """Temporarily corrupt one component (negative control for the suite)."""
    if name is None:
        yield
        return
    if name not in FAULTS:
        raise ValueError(f"unknown fault {name!r}; known: {FAULTS}")
    rec.linear_scan = _bad_linear_scan
    try:
        yield
    finally:
        rec.linear_scan = _GOOD_LINEAR_SCAN


# individual checks -------------------------------------------------------

def check_scan(rng: Rng, sizes, seeds: int = 5) -> list:
    err = 0.0
    win = 0.0
    for T in sizes:
        for _ in range(seeds):
            x = rng.normal((T, 3, 4))
            g = rng.uniform((T, 3, 4))
            init = rng.normal((3, 4))
            err = max(err, float(np.abs(rec.scan_parallel(x, g, init) - rec.scan_sequential(x, g, init)).max()))
            L = int(rng.integers(1, T + 1))
            y, _ = rec.window_from_full(rec.scan_sequential(x, g), g, L)
            win = max(win, float(np.abs(y - rec.scan_overlapped(x, g, L)).max()))
    return [CheckResult("recurrence", "parallel vs sequential scan", err, 1e-12),
            CheckResult("recurrence", "windowed vs overlapped scan", win, 1e-12)]


def check_scan_grad(rng: Rng, sizes) -> list:
    worst = 0.0
    for T in sizes:
        x = rng.normal((T, 2, 3))
        g = rng.uniform((T, 2, 3), 0.1, 0.9)
        w = rng.normal((T, 2, 3))
        out, record = rec.scan_forward(x, g)
        gx, gg, _ = rec.scan_backward(w, record)
        nx = finite_diff_grad(lambda a: float((rec.scan_sequential(a, g) * w).sum()), x)
        ng = finite_diff_grad(lambda a: float((rec.scan_sequential(x, a) * w).sum()), g)
        worst = max(worst, float(relative_error(gx, nx).max()), float(relative_error(gg, ng).max()))
    return [CheckResult("recurrence", "scan backward vs finite diff", worst, 1e-4)]


def check_masks(rng: Rng, sizes, n_specs: int = 30) -> list:
    bad_rows = 0
    bad_counts = 0
    for _ in range(n_specs):
        spec = random_spec(rng, topk=False)
        T = int(max(sizes))
        m = pattern_mask(T, spec)
        for t in range(T):
            a = attended_set(t, spec)
            row = np.flatnonzero(m[t])
            bad_rows += int(not np.array_equal(row, a.positions))
            bad_counts += int(len(a) != expected_cache_entries(t, spec))
            bad_rows += int(a.labels[a.positions == t][0] != Label.SELF)
    return [CheckResult("patterns", "mask rows vs attended sets", bad_rows, 0),
            CheckResult("patterns", "closed-form entry count", bad_counts, 0)]


def check_online_softmax(rng: Rng, sizes, n_specs: int = 30) -> list:
    err = 0.0
    hd = 8
    for _ in range(n_specs):
        spec = random_spec(rng)
        T = int(max(sizes))
        k = rng.normal((T, hd)) * 2
        v = rng.normal((T, hd))
        for t in range(T):
            q = rng.normal(hd) * 2
            a = attended_set(t, spec, q, k[:t + 1])
            got = attend_online(q, k, v, a.segments().values())
            err = max(err, float(np.abs(got - attend_oracle(q, k, v, a)).max()))
    return [CheckResult("attention", "online softmax vs oracle", err, 1e-12)]


def _dense_reference(x, p: MixingParams, rope: RopeParams):
    # independent composition: per-head scan, rope, causal softmax, output gate
    T = x.shape[0]
    H, hd = p.heads, p.head_dim
    out = np.zeros((T, H * hd))
    sig = lambda z: 1.0 / (1.0 + np.exp(-z))
    q = (x @ p.wq).reshape(T, H, hd)
    k = (x @ p.wk).reshape(T, H, hd)
    v = (x @ p.wv).reshape(T, H, hd)
    g = sig(x @ p.wg).reshape(T, H, hd)
    kt = np.zeros_like(k)
    vt = np.zeros_like(v)
    hk = np.zeros((H, hd))
    hv = np.zeros((H, hd))
    for t in range(T):
        hk = g[t] * hk + (1 - g[t]) * k[t]
        hv = g[t] * hv + (1 - g[t]) * v[t]
        kt[t], vt[t] = hk, hv
    pos = np.arange(T)
    qr = rope_apply(q, pos, rope)
    kr = rope_apply(kt, pos, rope)
    for h in range(H):
        s = qr[:, h] @ kr[:, h].T / np.sqrt(hd)
        s[np.triu_indices(T, 1)] = -np.inf
        w = np.exp(s - s.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        out[:, h * hd:(h + 1) * hd] = w @ vt[:, h]
    return (sig(x @ p.wog) * out) @ p.wo


def check_dense_reduction(rng: Rng, sizes) -> list:
    err = 0.0
    for T in sizes:
        p = MixingParams.init(12, 2, 6, rng, std=0.4)
        x = rng.normal((T, 12))
        rope = RopeParams(6)
        y, _ = temporal_mixing_forward(x, p, SparsePatternSpec.dense(), rope)
        err = max(err, float(np.abs(y - _dense_reference(x, p, rope)).max()))
    return [CheckResult("attention", "D=1 block vs dense reference", err, 1e-10)]


def check_decode_parity(rng: Rng, sizes, n_specs: int = 6) -> list:
    err = 0.0
    bad = 0
    T = int(max(sizes))
    for _ in range(n_specs):
        spec = random_spec(rng, recurrence_window=True)
        p = MixingParams.init(12, 2, 6, rng, std=0.4)
        x = rng.normal((T, 12))
        rope = RopeParams(6)
        y, _ = temporal_mixing_forward(x, p, spec, rope)
        cache = kv_cache.new_cache(p, spec, rope)
        for t in range(T):
            yt, cache = kv_cache.decode_step(cache, x[t], p, t)
            err = max(err, float(np.abs(yt - y[t]).max()))
            bad += int(kv_cache.cache_footprint(cache)["entries"] != expected_cache_entries(t + 1, spec))
    return [CheckResult("kv_cache", "decode vs prefill", err, 1e-10),
            CheckResult("kv_cache", "entry count vs closed form", bad, 0)]


def check_block_grad(rng: Rng, sizes) -> list:
    worst = 0.0
    T = int(min(max(sizes), 9))
    for spec in (SparsePatternSpec.dense(), SparsePatternSpec(2, window=1, recurrence_window=3)):
        p = MixingParams.init(8, 2, 4, rng, std=0.4)
        x = rng.normal((T, 8))
        w = rng.normal((T, 8))
        rope = RopeParams(4)

        def f(*_):
            return float((temporal_mixing_forward(x, p, spec, rope)[0] * w).sum())

        _, record = temporal_mixing_forward(x, p, spec, rope)
        gx, grads = temporal_mixing_backward(w, p, record)
        worst = max(worst, float(relative_error(gx, finite_diff_grad(f, x)).max()))
        for name, arr in p.arrays().items():
            worst = max(worst, float(relative_error(grads[name], finite_diff_grad(f, arr)).max()))
    return [CheckResult("attention", "block backward vs finite diff", worst, 1e-4)]


def check_model_grad(rng: Rng, sizes, samples: int = 40) -> list:
    cfg = ModelConfig(vocab=7, model_dim=8, layers=2, heads=2, head_dim=4, context_length=16,
                      init_std=0.4, seed=int(rng.integers(0, 1 << 30)))
    m = RatPlusModel(cfg)
    T = int(min(max(sizes), 8))
    batch = rng.integers(0, 7, (2, T + 1))
    spec = SparsePatternSpec(2, window=1)
    _, grads = m.loss_and_grads(batch, spec)
    names = sorted(m.params)
    worst = 0.0
    for _ in range(samples):
        name = names[int(rng.integers(0, len(names)))]
        arr = m.params[name]
        idx = tuple(int(rng.integers(0, s)) for s in arr.shape)
        num = finite_diff_grad(lambda _: m.loss_and_grads(batch, spec, want_grads=False)[0], arr, indices=[idx])
        worst = max(worst, float(relative_error(grads[name][idx], num[idx])))
    return [CheckResult("model", "whole-model gradient sample", worst, 1e-4)]


def check_quest(rng: Rng, sizes, trials: int = 1000) -> list:
    violations = 0
    for _ in range(trials):
        n = int(rng.integers(1, 9))
        hd = int(rng.integers(1, 9))
        q = rng.normal(hd)
        keys = rng.normal((n, hd))
        bound = quest_block_score(q, keys.min(axis=0), keys.max(axis=0))
        violations += int(bound < float((keys @ q).max()) - 1e-12)
    return [CheckResult("patterns", "quest bound >= block max", violations, 0)]


CHECKS = (check_scan, check_scan_grad, check_masks, check_online_softmax, check_dense_reduction,
          check_decode_parity, check_block_grad, check_model_grad, check_quest)


def run_suite(seed: int = 0, sizes=DEFAULT_SIZES, fault: str | None = None, log=None) -> list:
    sizes = tuple(int(s) for s in sizes)
    if not sizes or min(sizes) < 1:
        raise ValueError("sizes must be positive")
    results = []
    with inject_fault(fault):
        for i, check in enumerate(CHECKS):
            for r in check(Rng(seed).spawn(i), sizes):
                results.append(r)
                if log is not None:
                    log(r.line())
    return results
