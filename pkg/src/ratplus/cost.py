"""Analytical FLOPs / cache accounting and wall-clock micro-benchmarks."""
from __future__ import annotations

import copy
import csv
import io
import os
import platform
import statistics
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kv_cache
from .attention import MixingParams
from .numerics import RopeParams, Rng
from .patterns import SparsePatternSpec, attended_set, expected_cache_entries

COLUMNS = ("pattern", "T", "flops_per_token", "cache_entries", "measured_ns")


@dataclass(frozen=True)
class OperatorDims:
    heads: int = 8
    head_dim: int = 64
    model_dim: int = 512


def attended_count(spec: SparsePatternSpec, t: int, q=None, keys=None) -> int:
    """``|AttendedSet(t)|``.

    Top-k sets depend on which blocks win once windows, sinks or summaries
    overlap them; without ``q``/``keys`` an all-zero probe is used, which
    selects the lowest-numbered blocks.
    """
    if spec.topk is None:
        return len(attended_set(t, spec))
    if q is None or keys is None:
        q, keys = np.zeros(2), np.zeros((t + 1, 2))
    return len(attended_set(t, spec, q, keys))


def attention_flops(spec: SparsePatternSpec, t: int, dims: OperatorDims, q=None, keys=None) -> float:
    """Score plus value-accumulate FLOPs of query ``t``: ``4 * head_dim`` per attended entry per head."""
    if t < 1:
        raise ValueError("t must be >= 1")
    return 4.0 * dims.head_dim * dims.heads * attended_count(spec, t, q, keys)


def recurrence_flops(dims: OperatorDims) -> float:
    """Per-token cost of the key and value updates ``h = x + g * (h - x)`` (3 FLOPs per channel each)."""
    return 6.0 * dims.head_dim * dims.heads


def flops_per_token(spec: SparsePatternSpec, t: int, dims: OperatorDims, q=None, keys=None) -> float:
    return attention_flops(spec, t, dims, q, keys) + recurrence_flops(dims)


@dataclass
class CostRow:
    pattern: str
    T: int
    flops_per_token: float
    cache_entries: int
    measured_ns: int | None = None

    def as_list(self) -> list:
        return [self.pattern, self.T, repr(float(self.flops_per_token)), self.cache_entries,
                "" if self.measured_ns is None else self.measured_ns]


@dataclass
class CostReport:
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def flops_ratios(self) -> list:
        """FLOPs of the first row divided by each row's FLOPs."""
        base = self.rows[0].flops_per_token
        return [base / r.flops_per_token for r in self.rows]


def cost_rows(specs, T: int, dims: OperatorDims, attention_only: bool = False) -> list:
    """Analytical rows for query position ``T`` (a cache that has absorbed ``0..T-1``)."""
    rows = []
    for spec in specs:
        f = attention_flops(spec, T, dims) if attention_only else flops_per_token(spec, T, dims)
        rows.append(CostRow(spec.label(), T, f, expected_cache_entries(T, spec)))
    return rows


def emit_report(rows, csv_path=None, meta: dict | None = None) -> tuple[str, str]:
    """Render ``rows`` as CSV text and a markdown table; optionally write the CSV."""
    if not rows:
        raise ValueError("report needs at least one row")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow(r.as_list())
    text = buf.getvalue()
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            if meta:
                for k in sorted(meta):
                    fh.write(f"# {k}: {meta[k]}\n")
            fh.write(text)
    md = ["| " + " | ".join(COLUMNS) + " |", "|" + "---|" * len(COLUMNS)]
    for r in rows:
        vals = r.as_list()
        vals[2] = f"{r.flops_per_token:.6g}"
        md.append("| " + " | ".join(str(v) for v in vals) + " |")
    return text, "\n".join(md) + "\n"


def read_report_csv(path_or_text) -> list:
    text = path_or_text if "\n" in str(path_or_text) else open(path_or_text).read()
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    rows = []
    for rec in csv.DictReader(lines):
        ns = rec["measured_ns"]
        rows.append(CostRow(rec["pattern"], int(rec["T"]), float(rec["flops_per_token"]),
                            int(rec["cache_entries"]), int(ns) if ns else None))
    return rows


@dataclass
class BenchResult:
    spec: str
    T: int
    prefill_ns: list
    decode_ns: list
    warnings: list = field(default_factory=list)

    @staticmethod
    def _stats(xs):
        return (int(statistics.median(xs)), int(min(xs))) if xs else (None, None)

    @property
    def prefill_median(self):
        return self._stats(self.prefill_ns)[0]

    @property
    def decode_median(self):
        return self._stats(self.decode_ns)[0]

    @property
    def decode_min(self):
        return self._stats(self.decode_ns)[1]


def _clock_resolution_ns() -> float:
    return time.get_clock_info("perf_counter").resolution * 1e9


def bench_operator(spec: SparsePatternSpec, T: int, dims: OperatorDims, repeats: int = 5, *,
                   seed: int = 0, prefill: bool = True, warmup: int = 1) -> BenchResult:
    """Time a prefill of ``T`` tokens and one decode step at position ``T``.

    Weights and inputs are drawn from ``seed``; every decode sample runs on a
    fresh copy of the prefilled cache so the measured state never drifts.
    """
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = Rng(seed)
    params = MixingParams.init(dims.model_dim, dims.heads, dims.head_dim, rng)
    x = rng.normal((T + 1, dims.model_dim))
    rope = RopeParams(dims.head_dim)
    res = BenchResult(spec.label(), T, [], [])

    def run_prefill():
        return kv_cache.prefill(x[:T], params, spec, rope)

    if warmup < 1:
        raise ValueError("at least one warmup run is required")
    for _ in range(warmup):
        _, cache = run_prefill()
    if prefill:
        for _ in range(repeats):
            t0 = time.perf_counter_ns()
            run_prefill()
            res.prefill_ns.append(time.perf_counter_ns() - t0)
    for _ in range(warmup):
        kv_cache.decode_step(copy.deepcopy(cache), x[T], params)
    for _ in range(repeats):
        c = copy.deepcopy(cache)
        t0 = time.perf_counter_ns()
        kv_cache.decode_step(c, x[T], params)
        res.decode_ns.append(time.perf_counter_ns() - t0)
    floor = 1000 * _clock_resolution_ns()  # 3 significant digits
    for name, xs in (("prefill", res.prefill_ns), ("decode", res.decode_ns)):
        if xs and min(xs) < floor:
            msg = f"{name} time {min(xs)} ns is below 3 significant digits of timer resolution"
            res.warnings.append(msg)
            warnings.warn(msg, RuntimeWarning)
    return res


def machine_note() -> str:
    return f"{platform.machine()} {platform.processor() or platform.system()} cpus={os.cpu_count()}"
