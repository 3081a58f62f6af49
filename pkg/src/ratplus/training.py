"""Optimizer, learning-rate schedule, joint dense+sparse training, adaptation and evaluation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Corpus
from .model import RatPlusModel
from .numerics import NumericError, Rng
from .patterns import SparsePatternSpec

MODES = ("JOINT", "DENSE_ONLY", "SUMMED_LOSS")


class DivergenceError(NumericError):
    pass


@dataclass
class TrainSpec:
    mode: str = "JOINT"
    dense_spec: SparsePatternSpec = field(default_factory=SparsePatternSpec.dense)
    sparse_spec: SparsePatternSpec = field(default_factory=lambda: SparsePatternSpec(dilation=8, sinks=0))
    peak_lr: float = 3e-3
    final_lr: float = 3e-4
    warmup_fraction: float = 0.05
    batch: int = 8
    steps: int = 200
    seed: int = 0
    share_batch: bool = True  # JOINT: both updates see the same tokens
    weight_decay: float = 0.1
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    clip: float = 1.0
    seq_len: int | None = None  # defaults to the model context length

    def __post_init__(self):
        self.mode = self.mode.upper()
        if self.mode not in MODES:
            raise ValueError(f"unknown training mode {self.mode!r}; expected one of {MODES}")
        if self.steps < 0 or self.batch < 1:
            raise ValueError("steps must be >= 0 and batch >= 1")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["dense_spec"] = self.dense_spec.to_dict()
        d["sparse_spec"] = self.sparse_spec.to_dict()
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSpec":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise KeyError(f"unknown train field(s): {sorted(unknown)}")
        for k in ("dense_spec", "sparse_spec"):
            if k in d:
                d[k] = SparsePatternSpec.from_dict(d[k])
        return cls(**d)


def lr_at(step: int, total: int, peak: float, final: float, warmup_fraction: float) -> float:
    """Linear warmup to ``peak`` then cosine decay to ``final`` at ``total``."""
    warm = int(round(warmup_fraction * total))
    if warm and step < warm:
        return peak * (step + 1) / warm
    span = max(total - warm, 1)
    frac = min(max(step - warm, 0) / span, 1.0)
    return final + 0.5 * (peak - final) * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Adam with decoupled weight decay and global-norm clipping.

    Weight decay skips 1-D parameters (norm gains).
    """

    def __init__(self, params: dict, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.1, clip=1.0):
        self.b1, self.b2 = betas
        self.eps, self.wd, self.clip = eps, weight_decay, clip
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> float:
        """Update ``params`` in place; returns the pre-clip gradient norm."""
        norm = math.sqrt(sum(float((grads[k] ** 2).sum()) for k in sorted(grads)))
        if not math.isfinite(norm):
            raise DivergenceError("non-finite gradient norm")
        scale = min(1.0, self.clip / (norm + 1e-12)) if self.clip else 1.0
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in sorted(params):
            g = grads[k] * scale
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            if self.wd and params[k].ndim > 1:
                params[k] *= 1.0 - lr * self.wd
            params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return norm


@dataclass
class TraceRow:
    step: int
    loss: float
    lr: float
    pattern: str


@dataclass
class LossTrace:
    rows: list = field(default_factory=list)

    def add(self, step, loss, lr, pattern):
        self.rows.append(TraceRow(int(step), float(loss), float(lr), str(pattern)))

    def losses(self, pattern: str | None = None) -> np.ndarray:
        return np.array([r.loss for r in self.rows if pattern is None or r.pattern == pattern])

    def write_csv(self, path, meta: dict | None = None) -> None:
        """Write ``step,loss,lr,pattern`` rows; ``meta`` goes into leading ``#`` comment lines."""
        with open(path, "w", newline="") as fh:
            for k in sorted(meta or {}):
                fh.write(f"# {k}: {meta[k]}\n")
            w = csv.writer(fh)
            w.writerow(["step", "loss", "lr", "pattern"])
            for r in self.rows:
                w.writerow([r.step, repr(r.loss), repr(r.lr), r.pattern])

    @classmethod
    def read_csv(cls, path) -> "LossTrace":
        tr = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(ln for ln in fh if not ln.startswith("#")):
                tr.add(row["step"], row["loss"], row["lr"], row["pattern"])
        return tr


def _update(model, opt, batch, spec, lr, step, trace, label):
    loss, grads = model.loss_and_grads(batch, spec)
    if not math.isfinite(loss):
        raise DivergenceError(f"loss became {loss} at step {step} under {label}")
    opt.step(model.params, grads, lr)
    trace.add(step, loss, lr, label)
    return loss


def train(model: RatPlusModel, corpus: Corpus, spec: TrainSpec, *, progress=None):
    """Train in place under ``spec.mode``; returns ``(model, trace)``."""
    c = model.config
    if spec.mode == "JOINT" and spec.sparse_spec.dilation != c.active_length:
        raise ValueError(f"JOINT training needs sparse dilation == active length "
                         f"({spec.sparse_spec.dilation} != {c.active_length})")
    T = spec.seq_len or c.context_length
    rng = Rng(spec.seed)
    opt = AdamW(model.params, spec.betas, spec.eps, spec.weight_decay, spec.clip)
    trace = LossTrace()
    dense_label, sparse_label = spec.dense_spec.label(), spec.sparse_spec.label()
    for step in range(spec.steps):
        lr = lr_at(step, spec.steps, spec.peak_lr, spec.final_lr, spec.warmup_fraction)
        batch = corpus.sample_batch(rng, spec.batch, T)
        if spec.mode == "DENSE_ONLY":
            _update(model, opt, batch, spec.dense_spec, lr, step, trace, dense_label)
        elif spec.mode == "JOINT":
            _update(model, opt, batch, spec.sparse_spec, lr, step, trace, sparse_label)
            b2 = batch if spec.share_batch else corpus.sample_batch(rng, spec.batch, T)
            _update(model, opt, b2, spec.dense_spec, lr, step, trace, dense_label)
        else:
            ls, gs = model.loss_and_grads(batch, spec.sparse_spec)
            ld, gd = model.loss_and_grads(batch, spec.dense_spec)
            loss = 0.5 * ls + 0.5 * ld
            if not math.isfinite(loss):
                raise DivergenceError(f"loss became {loss} at step {step}")
            opt.step(model.params, {k: 0.5 * gs[k] + 0.5 * gd[k] for k in gs}, lr)
            trace.add(step, loss, lr, f"0.5*{sparse_label}+0.5*{dense_label}")
        if progress is not None:
            progress(step, trace.rows[-1])
    return model, trace


def train_joint(model: RatPlusModel, corpus: Corpus, spec: TrainSpec, **kw):
    if spec.mode != "JOINT":
        raise ValueError(f"train_joint needs mode JOINT, got {spec.mode}")
    return train(model, corpus, spec, **kw)


@dataclass
class AdaptResult:
    model: RatPlusModel
    trace: LossTrace
    eval_tokens: list = field(default_factory=list)  # tokens consumed at each eval point
    eval_loss: list = field(default_factory=list)


def adapt(model: RatPlusModel, corpus: Corpus, target_spec: SparsePatternSpec, lr: float,
          tokens_budget: int, *, batch: int = 8, seed: int = 0, seq_len: int | None = None,
          eval_corpus: Corpus | None = None, eval_every: int = 0, eval_windows: int | None = None,
          weight_decay: float = 0.0) -> AdaptResult:
    """Fine-tune a copy of ``model`` under ``target_spec`` at constant ``lr`` with no warmup.

    Runs ``tokens_budget // (batch * seq_len)`` steps. With ``eval_corpus`` and
    ``eval_every > 0`` the held-out mean NLL is recorded before training, every
    ``eval_every`` steps and at the end.
    """
    if tokens_budget < 0:
        raise ValueError("tokens_budget must be non-negative")
    m = model.copy()
    T = seq_len or m.config.context_length
    steps = tokens_budget // (batch * T)
    rng = Rng(seed)
    opt = AdamW(m.params, weight_decay=weight_decay)
    trace = LossTrace()
    res = AdaptResult(m, trace)
    label = target_spec.label()

    def record(step):
        if eval_corpus is not None and eval_every > 0:
            res.eval_tokens.append(step * batch * T)
            res.eval_loss.append(math.log(eval_ppl(m, eval_corpus, target_spec, max_windows=eval_windows)))

    record(0)
    for step in range(steps):
        _update(m, opt, corpus.sample_batch(rng, batch, T), target_spec, lr, step, trace, label)
        if eval_every > 0 and ((step + 1) % eval_every == 0 and step + 1 < steps):
            record(step + 1)
    if steps:
        record(steps)
    return res


def eval_ppl(model: RatPlusModel, corpus: Corpus, spec=None, *, seq_len: int | None = None,
             batch: int = 16, max_windows: int | None = None) -> float:
    """``exp`` of the mean next-token NLL over non-overlapping windows of ``corpus``."""
    if len(corpus) < 2:
        raise ValueError("cannot evaluate on an empty corpus")
    T = seq_len or model.config.context_length
    wins = corpus.windows(min(T, len(corpus) - 1))
    if max_windows is not None:
        wins = wins[:max_windows]
    # per-window sums are combined with fsum so the batch partition does not matter
    sums = []
    for i in range(0, len(wins), batch):
        sums.extend(model.nll_rows(wins[i:i + batch], spec).tolist())
    return math.exp(math.fsum(sums) / (len(wins) * (wins.shape[1] - 1)))
