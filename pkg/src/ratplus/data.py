"""Token corpora: synthetic tasks and byte-level text."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Rng

KINDS = ("COPY", "NEEDLE", "CHAR_LM", "LAG")


@dataclass
class Corpus:
    tokens: np.ndarray
    vocab: int
    tokenizer: str = "synthetic"
    answer_positions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 1:
            raise ValueError("token stream must be 1-D")
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() >= self.vocab):
            raise ValueError(f"token id out of range for vocab {self.vocab}")

    def __len__(self) -> int:
        return int(self.tokens.size)

    def split(self, fraction: float = 0.9) -> tuple["Corpus", "Corpus"]:
        """Contiguous train/held-out split; answer positions follow their tokens."""
        cut = int(len(self) * fraction)
        ap = self.answer_positions
        return (Corpus(self.tokens[:cut], self.vocab, self.tokenizer, ap[ap < cut]),
                Corpus(self.tokens[cut:], self.vocab, self.tokenizer, ap[ap >= cut] - cut))

    def windows(self, length: int) -> np.ndarray:
        """Non-overlapping ``(n, length + 1)`` windows sharing one boundary token."""
        n = (len(self) - 1) // length
        if n < 1:
            raise ValueError(f"corpus of {len(self)} tokens too short for windows of {length}")
        idx = np.arange(n)[:, None] * length + np.arange(length + 1)[None, :]
        return self.tokens[idx]

    def sample_batch(self, rng: Rng, batch: int, length: int) -> np.ndarray:
        if len(self) < length + 1:
            raise ValueError("corpus shorter than one training window")
        starts = rng.integers(0, len(self) - length, batch)
        return self.tokens[starts[:, None] + np.arange(length + 1)[None, :]]


def _copy(size: int, rng: Rng, vocab: int, span: int) -> Corpus:
    # token 0 separates episodes; each episode is a random prefix followed by its repeat
    out = []
    while sum(map(len, out)) < size:
        n = int(rng.integers(2, span + 1))
        pre = rng.integers(1, vocab, n)
        out.append(np.concatenate([[0], pre, pre]))
    return Corpus(np.concatenate(out)[:size], vocab)


def _needle(size: int, rng: Rng, vocab: int, span: int, pairs: int = 2) -> Corpus:
    # ids: 0 = KEY marker, 1 = QUERY marker, keys/values from the upper half,
    # distractors from the lower half
    if vocab < 8:
        raise ValueError("NEEDLE needs vocab >= 8")
    if not 1 <= pairs <= vocab - vocab // 2:
        raise ValueError(f"NEEDLE pairs must lie in [1, {vocab - vocab // 2}]")
    half = vocab // 2
    toks, answers = [], []
    pos = 0
    while pos < size:
        keys = rng.choice(np.arange(half, vocab), pairs, replace=False)
        vals = rng.integers(half, vocab, pairs)
        ep = []
        for k, v in zip(keys, vals):
            ep.extend(rng.integers(2, half, int(rng.integers(1, span + 1))).tolist())
            ep.extend([0, int(k), int(v)])
        ep.extend(rng.integers(2, half, int(rng.integers(1, span + 1))).tolist())
        q = int(rng.integers(0, pairs))
        ep.extend([1, int(keys[q])])
        answers.append(pos + len(ep))
        ep.append(int(vals[q]))
        toks.extend(ep)
        pos += len(ep)
    tokens = np.asarray(toks[:size])
    ap = np.asarray([a for a in answers if a < size], dtype=np.int64)
    return Corpus(tokens, vocab, answer_positions=ap)


def _lag(size: int, rng: Rng, vocab: int, lag: int, copy_lag: int = 0, copy_prob: float = 0.0,
         noise=(0.4, 0.3, 0.2, 0.1)) -> Corpus:
    # x[t] = perm[x[t - lag]] + offset (mod vocab) with offsets drawn from `noise`;
    # with probability copy_prob the token instead repeats x[t - copy_lag]
    perm = rng.permutation(vocab)
    offs = rng.choice(len(noise), size, p=np.asarray(noise))
    copies = rng.uniform(size) < copy_prob
    x = np.empty(size, dtype=np.int64)
    x[:lag] = rng.integers(0, vocab, min(lag, size))
    for t in range(lag, size):
        if copy_lag and t >= copy_lag and copies[t]:
            x[t] = x[t - copy_lag]
        else:
            x[t] = (perm[x[t - lag]] + offs[t]) % vocab
    return Corpus(x, vocab)


def lag_entropy(noise=(0.4, 0.3, 0.2, 0.1)) -> float:
    """Per-token entropy (nats) of the LAG task, i.e. the log of its best attainable PPL."""
    p = np.asarray(noise, dtype=float)
    return float(-(p * np.log(p)).sum())


def char_corpus(path) -> Corpus:
    data = Path(path).read_bytes()
    if not data:
        raise ValueError(f"{path} is empty")
    return Corpus(np.frombuffer(data, dtype=np.uint8).astype(np.int64), 256, tokenizer="bytes")


def synth_task_generate(kind: str, size: int, seed: int, *, vocab: int = 16, span: int = 8,
                        lag: int = 2, copy_lag: int = 0, copy_prob: float = 0.0, pairs: int = 2,
                        path=None) -> Corpus:
    """Deterministic corpus of ``size`` tokens.

    ``COPY`` repeats random prefixes, ``NEEDLE`` plants ``pairs`` key/value pairs
    in distractor text and queries one, ``LAG`` draws each token from a noisy
    permutation of the token ``lag`` steps back (optionally repeating the token ``copy_lag`` back with
    probability ``copy_prob``), and ``CHAR_LM`` reads bytes from ``path``.
    """
    kind = kind.upper()
    if kind not in KINDS:
        raise ValueError(f"unknown corpus kind {kind!r}; expected one of {KINDS}")
    if size <= 0:
        raise ValueError("size must be positive")
    if kind == "CHAR_LM":
        if path is None:
            raise ValueError("CHAR_LM needs a text file path")
        c = char_corpus(path)
        return Corpus(c.tokens[:size], 256, tokenizer="bytes")
    rng = Rng(seed)
    if kind == "COPY":
        return _copy(size, rng, vocab, span)
    if kind == "NEEDLE":
        return _needle(size, rng, vocab, span, pairs)
    return _lag(size, rng, vocab, lag, copy_lag, copy_prob)
