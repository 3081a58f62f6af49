from __future__ import annotations

import numpy as np
import pytest

from ratplus.attention import (MixingParams, attend_online, attend_oracle, default_scale, gated_kv,
                               temporal_mixing_backward, temporal_mixing_forward, temporal_mixing_infer)
from ratplus.equiv import random_spec
from ratplus.numerics import RopeParams, Rng, finite_diff_grad, relative_error, rope_apply
from ratplus.patterns import PatternAssignment, SparsePatternSpec, TopK, attended_set

from oracles import complex_step_grad, reference_block


class TestOracle:
    def test_single_key(self, rng):
        k, v = rng.normal((5, 4)), rng.normal((5, 4))
        assert np.array_equal(attend_oracle(rng.normal(4), k, v, np.array([3])), v[3])

    def test_identical_keys_average(self, rng):
        k = np.tile(rng.normal(4), (6, 1))
        v = rng.normal((6, 4))
        out = attend_oracle(rng.normal(4), k, v, np.array([0, 2, 5]))
        assert np.abs(out - v[[0, 2, 5]].mean(axis=0)).max() <= 1e-15

    def test_empty_set(self, rng):
        with pytest.raises(ValueError):
            attend_oracle(np.ones(2), np.ones((3, 2)), np.ones((3, 2)), np.array([], dtype=int))

    def test_dense_matches_masked_softmax(self, rng):
        T, hd = 20, 6
        q, k, v = rng.normal((T, hd)), rng.normal((T, hd)), rng.normal((T, hd))
        s = q @ k.T / np.sqrt(hd) + np.triu(np.full((T, T), -np.inf), 1)
        w = np.exp(s - s.max(axis=1, keepdims=True))
        ref = (w / w.sum(axis=1, keepdims=True)) @ v
        got = np.stack([attend_oracle(q[t], k, v, attended_set(t, SparsePatternSpec.dense())) for t in range(T)])
        assert np.abs(got - ref).max() <= 1e-12


class TestOnline:
    def test_split_logits(self):
        # unit q and keys chosen so the scaled logits are exactly 1, 2, 3
        q = np.array([1.0])
        k = np.array([[1.0], [2.0], [3.0]])
        v = np.array([[10.0], [-4.0], [7.0]])
        got = attend_online(q, k, v, [[0, 1], [2]], scale=1.0)
        w = np.exp([1.0, 2.0, 3.0])
        assert abs(got[0] - (w @ v[:, 0]) / w.sum()) <= 1e-14

    def test_single_segment(self, rng):
        k, v, q = rng.normal((8, 4)), rng.normal((8, 4)), rng.normal(4)
        pos = np.array([1, 4, 7])
        assert np.abs(attend_online(q, k, v, [pos]) - attend_oracle(q, k, v, pos)).max() <= 1e-15

    def test_overlap_rejected(self, rng):
        with pytest.raises(ValueError):
            attend_online(np.ones(2), np.ones((4, 2)), np.ones((4, 2)), [[0, 1], [1, 2]])

    @pytest.mark.parametrize("seed", range(100))
    def test_random_specs_match_oracle(self, seed):
        r = Rng(seed)
        spec = random_spec(r)
        T, hd = int(r.integers(1, 65)), 8
        k, v = r.normal((T, hd)) * 2, r.normal((T, hd))
        for t in range(T):
            q = r.normal(hd) * 2
            a = attended_set(t, spec, q, k[:t + 1])
            got, _, w = attend_online(q, k, v, a.segments().values(), return_weights=True)
            assert np.abs(got - attend_oracle(q, k, v, a)).max() <= 1e-12
            assert abs(w.sum() - 1.0) <= 1e-12


class TestForward:
    def test_reduces_to_vanilla_attention(self, small_block):
        p, x, rope = small_block
        y, _ = temporal_mixing_forward(x, p, SparsePatternSpec.dense(), rope, force_gate=0.0, open_output_gate=True)
        T, H, hd = x.shape[0], p.heads, p.head_dim
        pos = np.arange(T)
        q = rope_apply((x @ p.wq).reshape(T, H, hd), pos, rope)
        k = rope_apply((x @ p.wk).reshape(T, H, hd), pos, rope)
        v = (x @ p.wv).reshape(T, H, hd)
        out = np.zeros((T, H, hd))
        for h in range(H):
            s = q[:, h] @ k[:, h].T / np.sqrt(hd) + np.triu(np.full((T, T), -np.inf), 1)
            w = np.exp(s - s.max(axis=1, keepdims=True))
            out[:, h] = (w / w.sum(axis=1, keepdims=True)) @ v[:, h]
        assert np.abs(y - out.reshape(T, -1) @ p.wo).max() <= 1e-10

    def test_dense_matches_reference_block(self, small_block):
        p, x, rope = small_block
        y, _ = temporal_mixing_forward(x, p, SparsePatternSpec.dense(), rope)
        assert np.abs(y - reference_block(x, p)).max() <= 1e-10

    def test_single_token(self, small_block):
        p, x, rope = small_block
        y, rec = temporal_mixing_forward(x[:1], p, SparsePatternSpec(4), rope)
        g = 1 / (1 + np.exp(-(x[0] @ p.wg)))
        vt = (1 - g) * (x[0] @ p.wv)
        og = 1 / (1 + np.exp(-(x[0] @ p.wog)))
        assert np.abs(y[0] - (og * vt) @ p.wo).max() <= 1e-14

    def test_zero_output_projection(self, small_block):
        p, x, rope = small_block
        p.wo = np.zeros_like(p.wo)
        y, _ = temporal_mixing_forward(x, p, SparsePatternSpec(2, 1), rope)
        assert not np.any(y)

    def test_batched_equals_rows(self, small_block, rng):
        p, x, rope = small_block
        xb = np.stack([x, rng.normal(x.shape)])
        spec = SparsePatternSpec(3, 2)
        yb, _ = temporal_mixing_forward(xb, p, spec, rope)
        for b in range(2):
            assert np.abs(yb[b] - temporal_mixing_forward(xb[b], p, spec, rope)[0]).max() <= 1e-14

    def test_width_mismatch(self, small_block):
        p, x, rope = small_block
        with pytest.raises(ValueError):
            temporal_mixing_forward(x[:, :5], p, SparsePatternSpec(), rope)

    def test_nope_mode(self, small_block):
        p, x, _ = small_block
        y, _ = temporal_mixing_forward(x, p, SparsePatternSpec(2), RopeParams(6, enabled=False))
        assert np.all(np.isfinite(y))

    def test_head_wise_pattern(self, small_block):
        p, x, rope = small_block
        assign = PatternAssignment([SparsePatternSpec(4)], {(0, 1): SparsePatternSpec.dense()})
        _, r = temporal_mixing_forward(x, p, assign, rope)
        _, r4 = temporal_mixing_forward(x, p, SparsePatternSpec(4), rope)
        _, rd = temporal_mixing_forward(x, p, SparsePatternSpec.dense(), rope)
        hd = p.head_dim
        assert np.array_equal(r.attn[..., :hd], r4.attn[..., :hd])
        assert np.array_equal(r.attn[..., hd:], rd.attn[..., hd:])
        assert not np.array_equal(r4.attn, rd.attn)

    def test_gated_kv_zero_gate_weights(self, small_block):
        p, x, _ = small_block
        kt, vt = gated_kv(x[None], p, SparsePatternSpec())
        assert kt.shape == (1, x.shape[0], p.heads, p.head_dim)
        assert np.all(np.isfinite(vt))

    @pytest.mark.parametrize("chunk", [1, 7, 64])
    @pytest.mark.parametrize("spec", [SparsePatternSpec.dense(), SparsePatternSpec(4, 2, recurrence_window=5),
                                      SparsePatternSpec(2, sinks=0, topk=TopK(3, 2), combine=True)])
    def test_chunked_inference_matches(self, small_block, chunk, spec):
        p, x, rope = small_block
        y, _ = temporal_mixing_forward(x, p, spec, rope)
        yi, _ = temporal_mixing_infer(x, p, spec, rope, chunk=chunk)
        assert np.abs(y - yi).max() <= 1e-13


class TestBackward:
    @pytest.mark.parametrize("spec", [SparsePatternSpec.dense(), SparsePatternSpec(4)])
    def test_matches_finite_diff(self, spec):
        r = Rng(11)
        p = MixingParams.init(16, 2, 8, r, std=0.3)
        x, w = r.normal((12, 16)), r.normal((12, 16))
        rope = RopeParams(8)

        def f(*_):
            return float((temporal_mixing_forward(x, p, spec, rope)[0] * w).sum())

        _, record = temporal_mixing_forward(x, p, spec, rope)
        gx, grads = temporal_mixing_backward(w, p, record, spec)
        assert relative_error(gx, finite_diff_grad(f, x)).max() <= 1e-4
        for name, arr in p.arrays().items():
            assert relative_error(grads[name], finite_diff_grad(f, arr)).max() <= 1e-4, name

    @pytest.mark.parametrize("spec", [SparsePatternSpec(2, 1, recurrence_window=3),
                                      SparsePatternSpec(2, sinks=0, topk=TopK(2, 2), combine=True)])
    def test_windowed_and_topk_finite_diff(self, small_block, spec):
        p, x, rope = small_block
        x = x[:10]
        w = Rng(2).normal(x.shape)

        def f(*_):
            return float((temporal_mixing_forward(x, p, spec, rope)[0] * w).sum())

        _, record = temporal_mixing_forward(x, p, spec, rope)
        gx, grads = temporal_mixing_backward(w, p, record)
        assert relative_error(gx, finite_diff_grad(f, x)).max() <= 1e-4
        assert relative_error(grads["wg"], finite_diff_grad(f, p.wg)).max() <= 1e-4

    def test_zero_upstream(self, small_block):
        p, x, rope = small_block
        _, record = temporal_mixing_forward(x, p, SparsePatternSpec(3), rope)
        gx, grads = temporal_mixing_backward(np.zeros((x.shape[0], p.model_dim)), p, record)
        assert not np.any(gx)
        assert all(not np.any(g) for g in grads.values())

    def test_dense_sum_matches_reference_derivative(self):
        r = Rng(5)
        p = MixingParams.init(8, 2, 4, r, std=0.4)
        x = r.normal((7, 8))
        rope = RopeParams(4)
        y, record = temporal_mixing_forward(x, p, SparsePatternSpec.dense(), rope)
        gx, grads = temporal_mixing_backward(np.ones_like(y), p, record)
        assert np.abs(gx - complex_step_grad(lambda a: reference_block(a, p).sum(), x)).max() <= 1e-8
        for name in ("wq", "wg", "wog"):
            def f(a, name=name):
                q = MixingParams(**{**p.arrays(), name: a, "heads": p.heads})
                return reference_block(x, q).sum()
            assert np.abs(grads[name] - complex_step_grad(f, getattr(p, name))).max() <= 1e-8, name

    def test_pattern_mismatch(self, small_block):
        p, x, rope = small_block
        _, record = temporal_mixing_forward(x, p, SparsePatternSpec(3), rope)
        with pytest.raises(ValueError):
            temporal_mixing_backward(np.ones((x.shape[0], p.model_dim)), p, record, SparsePatternSpec(4))

    def test_missing_record(self, small_block):
        p, _, _ = small_block
        with pytest.raises(ValueError):
            temporal_mixing_backward(np.ones((2, 12)), p, None)

    def test_scale_default(self):
        assert default_scale(16) == 0.25
