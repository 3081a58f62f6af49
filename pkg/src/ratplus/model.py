"""Desk-scale decoder LM built from temporal-mixing blocks.

Parameters live in one flat ``dict[str, ndarray]``; gradients come back in a
dict with the same keys and shapes.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kv_cache
from .attention import MIX_PARAM_NAMES, MixingParams, temporal_mixing_backward, temporal_mixing_forward
from .container import read_container, write_container
from .numerics import NumericError, RopeParams, Rng, rms_norm, rms_norm_backward, sigmoid
from .patterns import PatternAssignment, SparsePatternSpec

NORM_EPS = 1e-5


@dataclass
class ModelConfig:
    vocab: int = 16
    model_dim: int = 64
    layers: int = 2
    heads: int = 4
    head_dim: int = 16
    ffn_dim: int | None = None  # default: 8/3 * model_dim rounded up to a multiple of 8
    rope_base: float = 10000.0
    rope_enabled: bool = True
    context_length: int = 256
    active_length: int = 8
    recurrence: bool = True  # False gives a plain attention baseline (gates pinned at 0)
    tie_embeddings: bool = False
    init_std: float = 0.02
    seed: int = 0
    patterns: PatternAssignment | None = None

    def __post_init__(self):
        if self.ffn_dim is None:
            self.ffn_dim = int(-(-(8 * self.model_dim // 3) // 8) * 8)
        if self.patterns is None:
            self.patterns = PatternAssignment.uniform(SparsePatternSpec.dense(), self.layers)
        if len(self.patterns.per_layer) != self.layers:
            raise ValueError("pattern assignment must have one spec per layer")
        for name in ("vocab", "model_dim", "layers", "heads", "head_dim", "context_length"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def rope(self) -> RopeParams:
        return RopeParams(self.head_dim, self.rope_base, self.rope_enabled)

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "patterns"}
        d["patterns"] = self.patterns.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        allowed = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - allowed
        if unknown:
            raise KeyError(f"unknown model field(s): {sorted(unknown)}")
        pats = d.pop("patterns", None)
        if pats is not None:
            d["patterns"] = PatternAssignment.from_dict(pats)
        return cls(**d)


def resolve_pattern(pattern, layers: int) -> PatternAssignment:
    if pattern is None or isinstance(pattern, PatternAssignment):
        return pattern
    if isinstance(pattern, SparsePatternSpec):
        return PatternAssignment.uniform(pattern, layers)
    raise TypeError(f"unsupported pattern {pattern!r}")


def _silu_parts(a):
    s = sigmoid(a)
    return a * s, s


@dataclass
class ForwardRecord:
    tokens: np.ndarray
    patterns: PatternAssignment
    layers: list = field(default_factory=list)
    x_final: np.ndarray = None
    xn_final: np.ndarray = None


class RatPlusModel:
    def __init__(self, config: ModelConfig, params: dict | None = None):
        self.config = config
        self.params = params if params is not None else self._init_params()

    def _init_params(self) -> dict:
        c = self.config
        rng = Rng(c.seed)
        gd = c.heads * c.head_dim
        p = {"embed": rng.normal((c.vocab, c.model_dim), c.init_std)}
        for i in range(c.layers):
            pre = f"layers.{i}."
            p[pre + "norm1"] = np.ones(c.model_dim)
            for n in MIX_PARAM_NAMES:
                shape = (gd, c.model_dim) if n == "wo" else (c.model_dim, gd)
                p[pre + "mix." + n] = rng.normal(shape, c.init_std)
            p[pre + "norm2"] = np.ones(c.model_dim)
            p[pre + "ffn.w1"] = rng.normal((c.model_dim, c.ffn_dim), c.init_std)
            p[pre + "ffn.w3"] = rng.normal((c.model_dim, c.ffn_dim), c.init_std)
            p[pre + "ffn.w2"] = rng.normal((c.ffn_dim, c.model_dim), c.init_std)
        p["norm_f"] = np.ones(c.model_dim)
        if not c.tie_embeddings:
            p["head"] = rng.normal((c.model_dim, c.vocab), c.init_std)
        return p

    @property
    def head(self) -> np.ndarray:
        return self.params["embed"].T if self.config.tie_embeddings else self.params["head"]

    def copy(self) -> "RatPlusModel":
        return RatPlusModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def mixing(self, layer: int) -> MixingParams:
        pre = f"layers.{layer}.mix."
        return MixingParams(**{n: self.params[pre + n] for n in MIX_PARAM_NAMES}, heads=self.config.heads)

    @property
    def _force_gate(self):
        return None if self.config.recurrence else 0.0

    def num_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    # forward / backward ---------------------------------------------------

    def forward(self, tokens, pattern=None, record: bool = False):
        """Logits of shape ``(B, T, vocab)`` (or ``(T, vocab)`` for 1-D tokens)."""
        c = self.config
        tokens = np.asarray(tokens)
        squeeze = tokens.ndim == 1
        if squeeze:
            tokens = tokens[None]
        if tokens.shape[1] > c.context_length:
            raise ValueError(f"sequence length {tokens.shape[1]} exceeds context {c.context_length}")
        if tokens.min() < 0 or tokens.max() >= c.vocab:
            raise ValueError("token id out of range")
        pats = resolve_pattern(pattern, c.layers) or c.patterns
        p = self.params
        x = p["embed"][tokens]
        rec = ForwardRecord(tokens, pats)
        for i in range(c.layers):
            pre = f"layers.{i}."
            xn = rms_norm(x, p[pre + "norm1"], NORM_EPS)
            mix_out, mrec = temporal_mixing_forward(xn, self.mixing(i), pats, c.rope, layer=i,
                                                   force_gate=self._force_gate)
            h = x + mix_out
            hn = rms_norm(h, p[pre + "norm2"], NORM_EPS)
            a = hn @ p[pre + "ffn.w1"]
            b = hn @ p[pre + "ffn.w3"]
            sa, sig = _silu_parts(a)
            u = sa * b
            x_next = h + u @ p[pre + "ffn.w2"]
            if record:
                rec.layers.append(dict(x=x, xn=xn, mrec=mrec, h=h, hn=hn, a=a, b=b, sa=sa, sig=sig, u=u))
            x = x_next
        xn = rms_norm(x, p["norm_f"], NORM_EPS)
        logits = xn @ self.head
        if not np.all(np.isfinite(logits)):
            raise NumericError("non-finite logits")
        rec.x_final, rec.xn_final = x, xn
        out = logits[0] if squeeze else logits
        return (out, rec) if record else out

    def backward(self, grad_logits: np.ndarray, rec: ForwardRecord) -> dict:
        c = self.config
        p = self.params
        gl = grad_logits if grad_logits.ndim == 3 else grad_logits[None]
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        Dm = c.model_dim
        g_head = rec.xn_final.reshape(-1, Dm).T @ gl.reshape(-1, c.vocab)
        if c.tie_embeddings:
            grads["embed"] += g_head.T
        else:
            grads["head"] = g_head
        dxn = gl @ self.head.T
        dx, grads["norm_f"] = rms_norm_backward(dxn, rec.x_final, p["norm_f"], NORM_EPS)
        for i in reversed(range(c.layers)):
            pre = f"layers.{i}."
            L = rec.layers[i]
            F = c.ffn_dim
            # ffn
            grads[pre + "ffn.w2"] = L["u"].reshape(-1, F).T @ dx.reshape(-1, Dm)
            du = dx @ p[pre + "ffn.w2"].T
            da = du * L["b"] * L["sig"] * (1.0 + L["a"] * (1.0 - L["sig"]))
            db = du * L["sa"]
            hn_f = L["hn"].reshape(-1, Dm)
            grads[pre + "ffn.w1"] = hn_f.T @ da.reshape(-1, F)
            grads[pre + "ffn.w3"] = hn_f.T @ db.reshape(-1, F)
            dhn = da @ p[pre + "ffn.w1"].T + db @ p[pre + "ffn.w3"].T
            dh_norm, grads[pre + "norm2"] = rms_norm_backward(dhn, L["h"], p[pre + "norm2"], NORM_EPS)
            dh = dx + dh_norm
            # mixing
            dxn_mix, mg = temporal_mixing_backward(dh, self.mixing(i), L["mrec"])
            for n, g in mg.items():
                grads[pre + "mix." + n] = g
            dx_norm, grads[pre + "norm1"] = rms_norm_backward(dxn_mix, L["x"], p[pre + "norm1"], NORM_EPS)
            dx = dh + dx_norm
        np.add.at(grads["embed"], rec.tokens, dx)
        return grads

    def loss_and_grads(self, batch: np.ndarray, pattern=None, want_grads: bool = True):
        """Mean next-token cross-entropy over ``batch`` of shape ``(B, T+1)``."""
        batch = np.atleast_2d(np.asarray(batch))
        inputs, targets = batch[:, :-1], batch[:, 1:]
        logits, rec = self.forward(inputs, pattern, record=True)
        nll, dlogits = cross_entropy(logits, targets)
        if not want_grads:
            return nll, None
        return nll, self.backward(dlogits, rec)

    def nll_rows(self, batch: np.ndarray, pattern=None) -> np.ndarray:
        """Per-row summed next-token NLL of ``batch`` (shape ``(B, T+1)``), no gradients."""
        batch = np.atleast_2d(np.asarray(batch))
        logp = log_softmax(self.forward(batch[:, :-1], pattern))
        tgt = batch[:, 1:]
        return -np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0].sum(axis=1)

    # incremental decoding ---------------------------------------------------

    def start_decode(self, prompt, pattern=None):
        """Prefill ``prompt`` through every layer; returns ``(last logits, session)``."""
        c = self.config
        pats = resolve_pattern(pattern, c.layers) or c.patterns
        if not c.recurrence:
            raise ValueError("cached decoding needs the recurrence enabled")
        tokens = np.asarray(prompt)
        p = self.params
        x = p["embed"][tokens]
        caches = []
        for i in range(c.layers):
            pre = f"layers.{i}."
            xn = rms_norm(x, p[pre + "norm1"], NORM_EPS)
            y, cache = kv_cache.prefill(xn, self.mixing(i), pats, c.rope, layer=i)
            caches.append(cache)
            x = self._ffn(x + y, i)
        logits = rms_norm(x[-1], p["norm_f"], NORM_EPS) @ self.head
        return logits, DecodeSession(self, caches)

    def _ffn(self, h, i):
        p = self.params
        pre = f"layers.{i}."
        hn = rms_norm(h, p[pre + "norm2"], NORM_EPS)
        a = hn @ p[pre + "ffn.w1"]
        return h + (_silu_parts(a)[0] * (hn @ p[pre + "ffn.w3"])) @ p[pre + "ffn.w2"]

    # persistence ----------------------------------------------------------------

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.config.to_dict(), sort_keys=True).encode()).hexdigest()[:12]

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"kind": "checkpoint", "config": self.config.to_dict(), "config_hash": self.config_hash()}
        if extra:
            meta.update(extra)
        write_container(path, meta, self.params)

    @classmethod
    def load(cls, path) -> "RatPlusModel":
        meta, arrays = read_container(path, expect_kind="checkpoint")
        config = ModelConfig.from_dict(meta["config"])
        model = cls(config)
        missing = set(model.params) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint lacks {sorted(missing)}")
        for k in model.params:
            if arrays[k].shape != model.params[k].shape:
                raise ValueError(f"checkpoint shape mismatch for {k}")
        model.params = {k: arrays[k] for k in model.params}
        return model


@dataclass
class DecodeSession:
    model: RatPlusModel
    caches: list

    @property
    def t(self) -> int:
        return self.caches[0].t

    def step(self, token: int) -> np.ndarray:
        m = self.model
        p = m.params
        x = p["embed"][int(token)]
        for i, cache in enumerate(self.caches):
            pre = f"layers.{i}."
            xn = rms_norm(x, p[pre + "norm1"], NORM_EPS)
            y, _ = kv_cache.decode_step(cache, xn, m.mixing(i))
            x = m._ffn(x + y, i)
        return rms_norm(x, p["norm_f"], NORM_EPS) @ m.head

    def footprint(self) -> dict:
        tot = {"entries": 0, "bytes": 0}
        for c in self.caches:
            f = kv_cache.cache_footprint(c)
            tot["entries"] += f["entries"]
            tot["bytes"] += f["bytes"]
        return tot


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean NLL and its gradient w.r.t. ``logits``."""
    logp = log_softmax(logits)
    n = targets.size
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = float(-picked.sum() / n)
    grad = np.exp(logp)
    np.put_along_axis(grad, targets[..., None],
                      np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
    return loss, grad / n


def forward_lm(model: RatPlusModel, tokens, pattern=None) -> np.ndarray:
    return model.forward(tokens, pattern)
