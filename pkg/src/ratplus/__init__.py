"""Gated recurrence over attention keys/values with dilated, local, sink and top-k sparse attention."""
from __future__ import annotations

from .attention import MixingParams, attend_online, attend_oracle, temporal_mixing_backward, temporal_mixing_forward
from .data import Corpus, synth_task_generate
from .kv_cache import cache_footprint, decode_step, new_cache, prefill
from .model import ModelConfig, RatPlusModel, forward_lm
from .numerics import RopeParams, Rng
from .patterns import PatternAssignment, SparsePatternSpec, TopK, attended_set, expected_cache_entries
from .training import TrainSpec, adapt, eval_ppl, train, train_joint

__version__ = "0.1.0"

__all__ = [
    "Corpus", "MixingParams", "ModelConfig", "PatternAssignment", "RatPlusModel", "Rng", "RopeParams",
    "SparsePatternSpec", "TopK", "TrainSpec", "adapt", "attend_online", "attend_oracle", "attended_set",
    "cache_footprint", "decode_step", "eval_ppl", "expected_cache_entries", "forward_lm", "new_cache",
    "prefill", "synth_task_generate", "temporal_mixing_backward", "temporal_mixing_forward", "train",
    "train_joint",
]
