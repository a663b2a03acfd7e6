"""recurlm: a byte-level transformer language model with a cross-token
recurrent memory pathway, built on a from-scratch numpy autodiff core.

The previous token's source-layer hidden state is carried forward and
injected into the next token's computation (attention K/V projection plus
residual injection). Training approximates the token-level recurrence with
interleaved parallel refinement over a shared sequence buffer; chunked and
exact-sequential regimes are included, the latter serving as the oracle.
"""

from .data import Corpus, byte_tokenize, detokenize, load_corpus
from .decoding import DecodeSession, decode_step, decode_step_two_pass, generate
from .memory import MemoryConfig, MemorySourceSpec
from .metrics import EvalRecord, bpb, centered_score, effective_compute, param_overhead
from .model import ForwardOut, KVCache, Model, ModelConfig
from .tensor import Tensor, cross_entropy, grad_check, no_grad
from .training import (AdamW, LossBreakdown, PartitionSpec, SequenceBuffer, TrainPlan,
                       baseline_step, chunked_step, init_forward, interleaved_step, lr_at,
                       partition_strided, refine_subset, sequential_unroll, train_run)

__version__ = "0.1.0"

__all__ = [
    "AdamW", "Corpus", "DecodeSession", "EvalRecord", "ForwardOut", "KVCache",
    "LossBreakdown", "MemoryConfig", "MemorySourceSpec", "Model", "ModelConfig",
    "PartitionSpec", "SequenceBuffer", "Tensor", "TrainPlan", "baseline_step", "bpb",
    "byte_tokenize", "centered_score", "chunked_step", "cross_entropy", "decode_step",
    "decode_step_two_pass", "detokenize", "effective_compute", "generate", "grad_check",
    "init_forward", "interleaved_step", "load_corpus", "lr_at", "no_grad",
    "param_overhead", "partition_strided", "refine_subset", "sequential_unroll", "train_run",
]
