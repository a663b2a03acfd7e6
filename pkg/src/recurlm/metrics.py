"""Metrics and accounting: bits per byte, centered scores, parameter overhead,
effective compute, and validation-loss evaluation in several modes.

Parameter counts are closed-form over the config (no arrays are built), so
overhead for billion-parameter configurations is instant. The baseline count
is total trainable parameters including embeddings, the LM head and, when
enabled, per-layer value-embedding tables; the overhead report also carries a
projection-only variant since gate/scalar counting conventions move the
layerwise figure by tenths of a percent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Corpus
from .model import Model, ModelConfig
from .tensor import cross_entropy, no_grad
from .training import baseline_step, interleaved_step, chunked_step, partition_strided, sequential_unroll

LN2 = math.log(2.0)


@dataclass
class EvalRecord:
    """Per-token cross-entropies (nats) with per-token byte lengths."""

    nats: np.ndarray
    byte_lengths: np.ndarray

    def __post_init__(self):
        self.nats = np.asarray(self.nats, dtype=np.float64).reshape(-1)
        self.byte_lengths = np.asarray(self.byte_lengths, dtype=np.float64).reshape(-1)
        if self.nats.shape != self.byte_lengths.shape:
            raise ValueError("nats and byte_lengths must align")
        if np.any(self.nats < 0):
            raise ValueError("cross-entropies must be non-negative")
        if np.any(self.byte_lengths < 1):
            raise ValueError("byte lengths must be >= 1")

    @classmethod
    def from_nats(cls, nats) -> "EvalRecord":
        nats = np.asarray(nats, dtype=np.float64).reshape(-1)
        return cls(nats, np.ones_like(nats))

    @property
    def mean_nats(self) -> float:
        return float(self.nats.mean())


def bpb(record: EvalRecord) -> float:
    """Total cross-entropy over ln(2) * total target bytes."""
    if record.nats.size == 0:
        raise ValueError("cannot compute bits per byte of an empty record")
    return float(record.nats.sum() / (LN2 * record.byte_lengths.sum()))


def centered_score(accuracy: float, random_baseline: float) -> float:
    """(a - r) / (1 - r); values above 1 are treated as percentages."""
    a = accuracy / 100.0 if accuracy > 1.0 else accuracy
    r = random_baseline / 100.0 if random_baseline > 1.0 else random_baseline
    if r >= 1.0:
        raise ValueError(f"random baseline must be < 1 after conversion, got {r}")
    if not 0.0 <= a <= 1.0 or r < 0.0:
        raise ValueError(f"accuracy {a} / baseline {r} outside [0, 1]")
    return (a - r) / (1.0 - r)


# -- parameter accounting -----------------------------------------------------


def backbone_param_count(config: ModelConfig) -> int:
    """Closed-form trainable-parameter count of the memory-free backbone."""
    c = config
    kv_dim = c.n_kv_heads * c.d_head
    att = c.d_model * c.n_heads * c.d_head + 2 * c.d_model * kv_dim + c.n_heads * c.d_head * c.d_model
    mlp = 8 * c.d_model * c.d_model
    per_layer = att + mlp + 2  # residual scale + embedding skip
    if c.value_embeddings:
        per_layer += c.vocab_size * kv_dim + c.d_model * c.n_kv_heads
    return 2 * c.vocab_size * c.d_model + c.n_layers * per_layer


def memory_param_count(config: ModelConfig, include_gates_and_scalars: bool = True) -> int:
    """Parameters added by the recurrent-memory pathway."""
    if config.memory is None:
        return 0
    c = config
    m = config.memory.resolve(c.n_layers)
    kv_dim = c.n_kv_heads * c.d_head
    n_targets = len(m.target_layers)
    total = 0
    if m.uses_kv:
        pairs = 1 if m.projection_sharing == "shared" else n_targets
        total += pairs * 2 * c.d_model * kv_dim
        if include_gates_and_scalars:
            total += n_targets * 2 * c.n_kv_heads * c.d_model
    if include_gates_and_scalars:
        if m.uses_residual:
            total += n_targets
        if m.source.kind == "learned_average":
            total += m.source.window
        if len(m.source_layers) > 1:
            total += len(m.source_layers)
    return total


@dataclass
class OverheadReport:
    added: int
    baseline: int
    fraction: float
    fraction_projections_only: float

    def __str__(self):
        return (f"+{self.added} params on {self.baseline} baseline: "
                f"{100 * self.fraction:.3f}% ({100 * self.fraction_projections_only:.3f}% projections only)")


def param_overhead(config: ModelConfig) -> OverheadReport:
    """Added-parameter fraction of a memory-enabled config over its backbone."""
    if config.memory is None:
        raise ValueError("param_overhead needs a memory-enabled config")
    base = backbone_param_count(config)
    added = memory_param_count(config, include_gates_and_scalars=True)
    core = memory_param_count(config, include_gates_and_scalars=False)
    return OverheadReport(added=added, baseline=base, fraction=added / base,
                          fraction_projections_only=core / base)


def effective_compute(strategy: str, ratio: float) -> float:
    """Baseline-equivalent training compute for a tokens-per-parameter budget.

    Interleaved training costs one initialization plus one effective
    refinement pass, so it is accounted at twice its raw ratio; baseline,
    chunked and sequential regimes cost one pass per token.
    """
    if strategy == "interleaved":
        return 2.0 * ratio
    if strategy in ("baseline", "chunked", "sequential"):
        return float(ratio)
    raise ValueError(f"unknown strategy {strategy!r}")


# -- validation evaluation -----------------------------------------------------

VAL_MODES = ("parallel", "refined", "sequential", "chunked")


def validation_record(model: Model, corpus: Corpus, seq_len: int, batch_size: int,
                      n_batches: int, seed: int, mode: str = "sequential",
                      chunk_size: int = 64) -> EvalRecord:
    """Per-token validation cross-entropies under a chosen evaluation mode.

    parallel:   one zero-memory pass (a memory model's initialization
                behavior; exactly the baseline forward for baseline models)
    refined:    zero-memory pass plus one full refinement; every position is
                scored with memory read from the initialization buffer,
                matching the training-time conditions
    sequential: the exact decode-time recurrence (per-position forwards)
    chunked:    boundary-carried memory with the given chunk size
    """
    if mode not in VAL_MODES:
        raise ValueError(f"unknown validation mode {mode!r}; expected one of {VAL_MODES}")
    all_nats = []
    with no_grad():
        for tokens, targets in corpus.batches("val", seq_len, batch_size, seed, n_batches):
            if mode == "parallel" or model.mem is None:
                out = model.forward_full(tokens)
                nats = cross_entropy(out.logits, targets, reduction="none").data
            elif mode == "refined":
                bd = interleaved_step(model, tokens, targets, partition_strided(seq_len, 1))
                nats = bd.per_position_refined
            elif mode == "chunked":
                bd = chunked_step(model, tokens, targets, chunk_size)
                nats = bd.per_position_init
            else:
                bd, _ = sequential_unroll(model, tokens, targets)
                nats = bd.per_position_init
            all_nats.append(np.asarray(nats).reshape(-1))
    return EvalRecord.from_nats(np.concatenate(all_nats))


def validation_ce(model: Model, corpus: Corpus, seq_len: int, batch_size: int,
                  n_batches: int, seed: int, mode: str = "sequential", chunk_size: int = 64) -> float:
    return validation_record(model, corpus, seq_len, batch_size, n_batches, seed, mode, chunk_size).mean_nats
