"""Training regimes and optimization.

Three ways to train the recurrent-memory model, plus the plain baseline step:

- interleaved: one full-sequence initialization pass with zero memory builds
  a buffer of per-layer raw K/V and source states; disjoint position subsets
  are then refined in parallel, each position reading its memory from the
  buffer, and refined rows are written back so later subsets see them. The
  loss averages the initialization loss with the per-subset losses, and one
  backward runs through all stages (write-back does not stop gradients).
- chunked: contiguous chunks processed sequentially; every position of a
  chunk reads the source state of the last position of the previous chunk.
- sequential: the exact token-level recurrence, one position at a time
  through the decoding path. Slow by construction; it is the ground truth
  the parallel schemes approximate, and the oracle the tests compare against.

Positions are 1-indexed in the strided-partition definition ("subset s holds
s, s+S, s+2S, ..."); storage uses 0-based arrays, so internal subset index
s0 corresponds to subset s0+1.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .decoding import DecodeSession, step_auto
from .memory import select_memory
from .model import Model
from .tensor import Tensor, cross_entropy


@dataclass
class PartitionSpec:
    """Disjoint position subsets covering a sequence (0-based arrays)."""

    seq_len: int
    subsets: list

    def __post_init__(self):
        cover = np.concatenate([np.asarray(s) for s in self.subsets]) if self.subsets else np.array([], int)
        if len(np.unique(cover)) != len(cover):
            raise ValueError("partition subsets overlap")
        if len(cover) != self.seq_len or (len(cover) and (cover.min() < 0 or cover.max() >= self.seq_len)):
            raise ValueError(f"partition does not cover positions 0..{self.seq_len - 1} exactly")

    @property
    def n_subsets(self) -> int:
        return len(self.subsets)


def partition_strided(seq_len: int, n_subsets: int) -> PartitionSpec:
    """Subset s (1-based) holds positions s, s+S, s+2S, ... for S subsets."""
    if not 1 <= n_subsets <= seq_len:
        raise ValueError(f"subset count {n_subsets} outside [1, {seq_len}]")
    return PartitionSpec(seq_len, [np.arange(s, seq_len, n_subsets) for s in range(n_subsets)])


@dataclass
class SequenceBuffer:
    """Per-layer raw K/V rows plus per-position source states for one stage."""

    keys: list
    values: list
    source_states: Tensor | None
    stage: int = 0

    @property
    def seq_len(self) -> int:
        return self.keys[0].shape[1]


@dataclass
class LossBreakdown:
    """Loss components and compute accounting for one training step."""

    init_loss: float
    subset_losses: list
    combined: float
    token_forwards: int  # positions computed per sequence this step
    n_stages: int = 1
    loss: Tensor | None = None  # combined loss, backward-able
    per_position_init: np.ndarray | None = None
    per_position_refined: np.ndarray | None = None

    def recombine(self) -> float:
        """Recompute the combination from stored components."""
        return (self.init_loss + sum(self.subset_losses)) / (len(self.subset_losses) + 1)


def init_forward(model: Model, tokens, targets):
    """Full parallel pass with zero memory; populates a complete buffer."""
    out = model.forward_full(tokens, memories=None, want_buffer=True)
    ce = cross_entropy(out.logits, targets, reduction="none")
    buffer = SequenceBuffer(out.raw_keys, out.raw_values, out.source_state, stage=0)
    return buffer, ce


def refine_subset(model: Model, tokens, targets, positions, buffer: SequenceBuffer,
                  isolated: bool = False):
    """Recompute `positions` against `buffer` and write the rows back.

    Each position reads its memory from the stage's input buffer. By default
    all subset positions are recomputed in one parallel forward, so earlier
    same-subset positions' fresh K/V are visible (causally) to later ones;
    `isolated=True` recomputes positions one at a time against the unmodified
    input buffer instead, hiding same-subset predecessors' fresh rows.

    Returns (per-position CE tensor (B, P), the written-back buffer).
    """
    positions = np.asarray(positions)
    if positions.size and (positions.min() < 0 or positions.max() >= buffer.seq_len):
        raise ValueError(f"refinement positions outside [0, {buffer.seq_len})")
    tokens = np.asarray(tokens)
    memories = None
    if model.mem is not None:
        memories = select_memory(buffer.source_states, positions, model.mem.source,
                                 model.params.get("mem.time_mix"))

    if not isolated:
        out = model.forward_refine(tokens[:, positions], positions, memories,
                                   buffer.keys, buffer.values)
        new_keys, new_values = out.buffer_keys, out.buffer_values
        logits, src_rows = out.logits, out.source_state
    else:
        logit_parts, src_parts = [], []
        key_parts = [[] for _ in range(model.config.n_layers)]
        value_parts = [[] for _ in range(model.config.n_layers)]
        for j, p in enumerate(positions):
            mem_j = memories[:, j : j + 1] if memories is not None else None
            o = model.forward_refine(tokens[:, p : p + 1], np.array([p]), mem_j,
                                     buffer.keys, buffer.values)
            logit_parts.append(o.logits)
            if o.source_state is not None:
                src_parts.append(o.source_state)
            for i in range(model.config.n_layers):
                key_parts[i].append(o.buffer_keys[i][:, p : p + 1])
                value_parts[i].append(o.buffer_values[i][:, p : p + 1])
        logits = T.concat(logit_parts, axis=1)
        src_rows = T.concat(src_parts, axis=1) if src_parts else None
        new_keys = [T.scatter_rows(buffer.keys[i], T.concat(key_parts[i], axis=1), positions)
                    for i in range(model.config.n_layers)]
        new_values = [T.scatter_rows(buffer.values[i], T.concat(value_parts[i], axis=1), positions)
                      for i in range(model.config.n_layers)]

    new_src = buffer.source_states
    if src_rows is not None:
        new_src = T.scatter_rows(buffer.source_states, src_rows, positions)
    ce = cross_entropy(logits, tokens_targets_at(targets, positions), reduction="none")
    return ce, SequenceBuffer(new_keys, new_values, new_src, stage=buffer.stage + 1)


def tokens_targets_at(targets, positions) -> np.ndarray:
    return np.asarray(targets)[:, np.asarray(positions)]


def refine_subset_bruteforce(model: Model, tokens, targets, positions, buffer: SequenceBuffer):
    """Reference recomputation of one refinement stage, one position at a time.

    Each position reads memory from the stage's input buffer, while its
    attention context accumulates the fresh K/V rows of earlier same-subset
    positions. Independent of the batched path; used to cross-check it.
    """
    positions = np.sort(np.asarray(positions))
    tokens = np.asarray(tokens)
    work_k, work_v = buffer.keys, buffer.values
    ce_parts, src_parts = [], []
    for p in positions:
        memories = None
        if model.mem is not None:
            memories = select_memory(buffer.source_states, np.array([p]), model.mem.source,
                                     model.params.get("mem.time_mix"))
        out = model.forward_refine(tokens[:, p : p + 1], np.array([p]), memories, work_k, work_v)
        work_k, work_v = out.buffer_keys, out.buffer_values
        ce_parts.append(cross_entropy(out.logits, np.asarray(targets)[:, p : p + 1], reduction="none"))
        if out.source_state is not None:
            src_parts.append(out.source_state)
    new_src = buffer.source_states
    if src_parts:
        new_src = T.scatter_rows(buffer.source_states, T.concat(src_parts, axis=1), positions)
    ce = T.concat(ce_parts, axis=1)
    return ce, SequenceBuffer(work_k, work_v, new_src, stage=buffer.stage + 1)


def interleaved_step(model: Model, tokens, targets, partition: PartitionSpec | int = 2,
                     isolated: bool = False, corrupt_writeback: bool = False) -> LossBreakdown:
    """Initialization pass plus one refinement per subset; loss is the mean of
    the initialization loss and the per-subset losses.

    `corrupt_writeback` perturbs written-back source states (test hook for the
    oracle suite's negative control). Call `.loss.backward()` to get gradients
    through all stages.
    """
    tokens = np.asarray(tokens)
    if isinstance(partition, int):
        partition = partition_strided(tokens.shape[1], partition)
    start_forwards = model.position_forwards
    buffer, init_ce = init_forward(model, tokens, targets)
    loss_terms = [init_ce.mean()]
    subset_losses = []
    refined = np.full(tokens.shape, np.nan)
    for positions in partition.subsets:
        ce, buffer = refine_subset(model, tokens, targets, positions, buffer, isolated=isolated)
        if corrupt_writeback and buffer.source_states is not None:
            buffer = SequenceBuffer(buffer.keys, buffer.values,
                                    buffer.source_states + 0.1, buffer.stage)
        loss_terms.append(ce.mean())
        subset_losses.append(float(ce.data.mean()))
        refined[:, positions] = ce.data
    combined = loss_terms[0]
    for term in loss_terms[1:]:
        combined = combined + term
    combined = combined * (1.0 / len(loss_terms))
    return LossBreakdown(
        init_loss=float(init_ce.data.mean()),
        subset_losses=subset_losses,
        combined=combined.item(),
        token_forwards=model.position_forwards - start_forwards,
        n_stages=partition.n_subsets + 1,
        loss=combined,
        per_position_init=init_ce.data.copy(),
        per_position_refined=refined,
    )


def chunk_bounds(seq_len: int, chunk_size: int) -> list:
    if chunk_size < 1:
        raise ValueError("chunk size must be >= 1")
    return [(lo, min(lo + chunk_size, seq_len)) for lo in range(0, seq_len, chunk_size)]


def chunked_step(model: Model, tokens, targets, chunk_size: int) -> LossBreakdown:
    """Sequential contiguous chunks; memory crosses chunk boundaries only.

    Every position of chunk j reads the source state of the last position of
    chunk j-1 (zero for the first chunk). Within a chunk computation is
    parallel; earlier chunks' K/V are reused, not recomputed.
    """
    tokens = np.asarray(tokens)
    B, seq_len = tokens.shape
    c = model.config
    start_forwards = model.position_forwards
    bounds = chunk_bounds(seq_len, chunk_size)
    prev_keys = prev_values = None
    carry = None
    ce_parts = []
    for lo, hi in bounds:
        width = hi - lo
        pad = np.zeros((B, width, c.n_kv_heads, c.d_head), dtype=c.np_dtype)
        if prev_keys is None:
            buf_k = [Tensor(pad) for _ in range(c.n_layers)]
            buf_v = [Tensor(pad.copy()) for _ in range(c.n_layers)]
        else:
            buf_k = [T.concat([prev_keys[i], Tensor(pad)], axis=1) for i in range(c.n_layers)]
            buf_v = [T.concat([prev_values[i], Tensor(pad.copy())], axis=1) for i in range(c.n_layers)]
        memories = None
        if model.mem is not None and carry is not None:
            memories = carry * np.ones((1, width, 1), dtype=c.np_dtype)
        out = model.forward_refine(tokens[:, lo:hi], np.arange(lo, hi), memories, buf_k, buf_v)
        prev_keys, prev_values = out.buffer_keys, out.buffer_values
        if model.mem is not None:
            carry = out.source_state[:, width - 1 : width]
        ce_parts.append(cross_entropy(out.logits, np.asarray(targets)[:, lo:hi], reduction="none"))
    ce = T.concat(ce_parts, axis=1)
    loss = ce.mean()
    value = loss.item()
    return LossBreakdown(
        init_loss=value,
        subset_losses=[],
        combined=value,
        token_forwards=model.position_forwards - start_forwards,
        n_stages=len(bounds),
        loss=loss,
        per_position_init=ce.data.copy(),
    )


def baseline_step(model: Model, tokens, targets) -> LossBreakdown:
    """Plain parallel training step (zero memory when a memory config exists)."""
    start_forwards = model.position_forwards
    out = model.forward_full(tokens)
    ce = cross_entropy(out.logits, targets, reduction="none")
    loss = ce.mean()
    value = loss.item()
    return LossBreakdown(init_loss=value, subset_losses=[], combined=value,
                         token_forwards=model.position_forwards - start_forwards,
                         n_stages=1, loss=loss, per_position_init=ce.data.copy())


def sequential_unroll(model: Model, tokens, targets):
    """Exact token-level recurrence: position t consumes the state produced by
    position t-1's forward and attends over true refined K/V of predecessors.

    O(seq_len) sequential forwards; desk-scale sequences only. Returns
    (LossBreakdown, memory chain list of per-position source states).
    """
    tokens = np.asarray(tokens)
    B, seq_len = tokens.shape
    start_forwards = model.position_forwards
    session = DecodeSession(model, batch=B, max_len=seq_len)
    ce_parts, chain = [], []
    for t in range(seq_len):
        logits = step_auto(session, tokens[:, t : t + 1])
        ce_parts.append(cross_entropy(logits, np.asarray(targets)[:, t : t + 1], reduction="none"))
        chain.append(session.ring[-1] if session.ring else None)
    ce = T.concat(ce_parts, axis=1)
    loss = ce.mean()
    value = loss.item()
    breakdown = LossBreakdown(init_loss=value, subset_losses=[], combined=value,
                              token_forwards=model.position_forwards - start_forwards,
                              n_stages=seq_len, loss=loss, per_position_init=ce.data.copy())
    return breakdown, chain


STRATEGIES = ("baseline", "interleaved", "chunked", "sequential")


def strategy_step(model: Model, tokens, targets, strategy: str, n_subsets: int = 2,
                  chunk_size: int = 64, isolated: bool = False) -> LossBreakdown:
    if strategy == "interleaved":
        return interleaved_step(model, tokens, targets, n_subsets, isolated=isolated)
    if strategy == "chunked":
        return chunked_step(model, tokens, targets, chunk_size)
    if strategy == "baseline":
        return baseline_step(model, tokens, targets)
    if strategy == "sequential":
        breakdown, _ = sequential_unroll(model, tokens, targets)
        return breakdown
    raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")


# -- optimization ---------------------------------------------------------------


def lr_at(step: int, total_steps: int, base_lr: float) -> float:
    """No warmup; constant, then linear warmdown to zero over the final half."""
    if total_steps <= 0 or step <= total_steps / 2:
        return base_lr
    half = total_steps / 2
    return base_lr * max(0.0, (total_steps - step) / (total_steps - half))


class AdamW:
    """Decoupled-weight-decay adaptive update.

    Weight decay applies to matrix parameters only; embeddings and scalars
    (residual/memory scales, mixing weights) decay-free.
    """

    def __init__(self, model: Model, lr: float = 3e-4, betas=(0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.1):
        self.model = model
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.steps = 0
        self.m = {name: np.zeros_like(p.data) for name, p in model.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in model.params.items()}

    def zero_grad(self):
        self.model.zero_grad()

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.steps += 1
        t = self.steps
        for name, p in self.model.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            update = m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay and self.model.kinds[name] == "matrix":
                update = update + self.weight_decay * p.data
            p.data -= lr * update

    def state_dict(self) -> dict:
        out = {"__steps__": np.array([self.steps], dtype=np.int64)}
        for name in self.m:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def load_state_dict(self, state: dict):
        self.steps = int(state["__steps__"][0])
        for name in self.m:
            self.m[name] = state[f"m.{name}"].astype(self.m[name].dtype, copy=True)
            self.v[name] = state[f"v.{name}"].astype(self.v[name].dtype, copy=True)


@dataclass
class TrainPlan:
    """Budget and schedule for one run. `ratio` is informational: tokens per
    trainable parameter; `steps_for_ratio` turns it into a step count."""

    steps: int
    batch_size: int = 16
    lr: float = 3e-4
    seed: int = 0
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.1
    ratio: float | None = None
    checkpoint_every: int = 0  # 0: final checkpoint only

    @staticmethod
    def steps_for_ratio(ratio: float, n_params: int, tokens_per_step: int) -> int:
        return max(1, math.ceil(ratio * n_params / tokens_per_step))


def format_log_line(step: int, breakdown: LossBreakdown, lr: float, tokens_per_sec: float,
                    cumulative_forwards: int) -> str:
    subs = ",".join(f"{v:.6f}" for v in breakdown.subset_losses) or "-"
    return (f"step={step} init={breakdown.init_loss:.6f} subsets={subs} "
            f"combined={breakdown.combined:.6f} lr={lr:.6g} tok_s={tokens_per_sec:.0f} "
            f"token_forwards={breakdown.token_forwards} cum_token_forwards={cumulative_forwards}")


def train_run(model: Model, optimizer: AdamW, plan: TrainPlan, batch_fn, strategy: str = "interleaved",
              n_subsets: int = 2, chunk_size: int = 64, log=None, checkpoint_fn=None,
              start_step: int = 0, end_step: int | None = None) -> list:
    """Drive optimization steps from `start_step` (resume point) up to
    `end_step` (default: the whole plan); the schedule always spans plan.steps.

    `batch_fn(step) -> (tokens, targets)` must be deterministic in `step` so
    a resumed run replays the same batches. Returns per-step breakdowns.
    """
    history = []
    stop = plan.steps if end_step is None else min(end_step, plan.steps)
    cumulative = start_step * _forwards_per_step(strategy, model.config.seq_len, chunk_size)
    for step in range(start_step, stop):
        t0 = time.perf_counter()
        tokens, targets = batch_fn(step)
        optimizer.zero_grad()
        breakdown = strategy_step(model, tokens, targets, strategy, n_subsets, chunk_size)
        breakdown.loss.backward()
        lr = lr_at(step, plan.steps, plan.lr)
        optimizer.step(lr=lr)
        elapsed = max(time.perf_counter() - t0, 1e-9)
        cumulative += breakdown.token_forwards
        if log is not None:
            log(format_log_line(step, breakdown, lr, tokens.size / elapsed, cumulative))
        breakdown.loss = None  # free the graph
        history.append(breakdown)
        if checkpoint_fn is not None:
            last = step == plan.steps - 1
            if last or (plan.checkpoint_every and (step + 1) % plan.checkpoint_every == 0):
                checkpoint_fn(step + 1)
    return history


def _forwards_per_step(strategy: str, seq_len: int, chunk_size: int) -> int:
    return 2 * seq_len if strategy == "interleaved" else seq_len
