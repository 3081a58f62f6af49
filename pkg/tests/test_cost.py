from __future__ import annotations

import warnings

import numpy as np
import pytest

from ratplus import cost
from ratplus import kv_cache as kc
from ratplus.attention import MixingParams
from ratplus.equiv import random_spec
from ratplus.numerics import RopeParams, Rng
from ratplus.patterns import SparsePatternSpec, attended_set, expected_cache_entries

DIMS = cost.OperatorDims()
SMALL = cost.OperatorDims(heads=2, head_dim=8, model_dim=16)


class TestFlops:
    def test_dense_proportional_to_t(self):
        for t in (1, 10, 4096):
            assert cost.attention_flops(SparsePatternSpec.dense(), t, DIMS) == 4 * 64 * 8 * (t + 1)

    def test_constants(self):
        assert cost.recurrence_flops(DIMS) == 6 * 64 * 8
        spec = SparsePatternSpec(4)
        assert cost.flops_per_token(spec, 100, DIMS) == cost.attention_flops(spec, 100, DIMS) + 6 * 64 * 8

    @pytest.mark.parametrize("D", [2, 4, 8, 16, 32, 64])
    def test_exact_ratio_at_block_ends(self, D):
        spec = SparsePatternSpec(D, sinks=0)
        for t in (D - 1, 4 * D - 1, 4096 - 1):
            r = cost.attention_flops(SparsePatternSpec.dense(), t, DIMS) / cost.attention_flops(spec, t, DIMS)
            assert r == D

    def test_ratio_d16_at_4096(self):
        r = cost.attention_flops(SparsePatternSpec.dense(), 4096, DIMS) / cost.attention_flops(
            SparsePatternSpec(16, sinks=0), 4096, DIMS)
        assert abs(r - 16) / 16 <= 0.02

    def test_window_example(self):
        spec = SparsePatternSpec(8, window=512, sinks=4)
        n = cost.attended_count(spec, 4096)
        assert n == len(attended_set(4096, spec)) == 965

    def test_proportional_to_attended_set(self):
        r = Rng(8)
        for _ in range(100):
            spec = random_spec(r, max_dilation=16, max_window=40)
            t = int(r.integers(1, 300))
            q, k = r.normal(4), r.normal((t + 1, 4))
            n = len(attended_set(t, spec, q, k))
            assert cost.flops_per_token(spec, t, DIMS, q, k) == 4 * 64 * 8 * n + cost.recurrence_flops(DIMS)

    def test_t0_rejected(self):
        with pytest.raises(ValueError):
            cost.attention_flops(SparsePatternSpec(), 0, DIMS)


class TestReport:
    def test_columns_and_round_trip(self, tmp_path):
        rows = cost.cost_rows([SparsePatternSpec.dense(), SparsePatternSpec(4)], 128, DIMS)
        rows[1].measured_ns = 1234
        text, md = cost.emit_report(rows, tmp_path / "c.csv", meta={"seed": 0})
        assert text.splitlines()[0] == "pattern,T,flops_per_token,cache_entries,measured_ns"
        back = cost.read_report_csv(tmp_path / "c.csv")
        assert back == rows
        assert cost.read_report_csv(text) == rows
        assert (tmp_path / "c.csv").read_text().startswith("# seed: 0\n")

    def test_markdown_rows(self):
        rows = cost.cost_rows([SparsePatternSpec(D) for D in (1, 2, 4)], 64, DIMS)
        md = cost.emit_report(rows)[1].strip().splitlines()
        assert len(md) == 2 + 3
        assert md[0] == "| pattern | T | flops_per_token | cache_entries | measured_ns |"

    def test_empty(self):
        with pytest.raises(ValueError):
            cost.emit_report([])

    def test_ratio_column(self):
        specs = [SparsePatternSpec(D, sinks=0) for D in (1, 2, 4, 8, 16)]
        report = cost.CostReport(cost.cost_rows(specs, 4096, DIMS, attention_only=True))
        for D, r in zip((1, 2, 4, 8, 16), report.flops_ratios()):
            assert abs(r - D) / D <= 0.02

    @pytest.mark.parametrize("spec", [SparsePatternSpec.dense(), SparsePatternSpec(8, 3),
                                      SparsePatternSpec(5, sinks=4)])
    def test_cache_column_matches_footprint(self, spec):
        r = Rng(0)
        p = MixingParams.init(8, 2, 4, r, std=0.3)
        x = r.normal((77, 8))
        _, cache = kc.prefill(x, p, spec, RopeParams(4))
        row = cost.cost_rows([spec], 77, DIMS)[0]
        assert row.cache_entries == kc.cache_footprint(cache)["entries"] == expected_cache_entries(77, spec)


class TestBench:
    def test_repeats(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = cost.bench_operator(SparsePatternSpec(4), 32, SMALL, repeats=3)
        assert len(res.prefill_ns) == 3 and len(res.decode_ns) == 3
        assert res.decode_min <= res.decode_median

    def test_repeats_minimum(self):
        with pytest.raises(ValueError):
            cost.bench_operator(SparsePatternSpec(4), 32, SMALL, repeats=2)
        with pytest.raises(ValueError):
            cost.bench_operator(SparsePatternSpec(4), 32, SMALL, warmup=0)

    def test_prefill_monotone_in_t(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            med = [cost.bench_operator(SparsePatternSpec(4), T, SMALL, repeats=5).prefill_median
                   for T in (16, 256, 1024)]
        assert med[0] <= med[1] <= med[2]

    def test_weights_untouched(self, monkeypatch):
        made = []
        real = MixingParams.init

        def spy(*a, **kw):
            p = real(*a, **kw)
            made.append((p, {k: v.copy() for k, v in p.arrays().items()}))
            return p

        monkeypatch.setattr(cost.MixingParams, "init", spy)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            cost.bench_operator(SparsePatternSpec(2, 1), 40, SMALL, repeats=3)
        (p, before), = made
        assert all(np.array_equal(v, before[k]) for k, v in p.arrays().items())

    def test_resolution_warning(self, monkeypatch):
        monkeypatch.setattr(cost, "_clock_resolution_ns", lambda: 1e9)
        with pytest.warns(RuntimeWarning, match="timer resolution"):
            res = cost.bench_operator(SparsePatternSpec(2), 8, SMALL, repeats=3)
        assert res.warnings

    def test_machine_note(self):
        assert "cpus=" in cost.machine_note()
