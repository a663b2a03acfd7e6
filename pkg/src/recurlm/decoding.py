"""KV-cached autoregressive decoding with the recurrent state handoff.

One `DecodeSession` owns one sequence (optionally batched for teacher-forced
evaluation): a per-layer cache of post-RoPE K/V plus a short ring of recent
source-layer states. Default memory sources consume exactly one transformer
forward per generated token; the current-token sources run a second
refinement forward (the refined outputs are what enter the cache).
"""

from __future__ import annotations

import numpy as np

from .memory import select_memory_from_ring
from .model import KVCache, Model
from .tensor import Tensor, no_grad, softmax


class DecodeSession:
    """Decoding state for one sequence; not shared between threads."""

    def __init__(self, model: Model, batch: int = 1, max_len: int | None = None):
        self.model = model
        self.batch = batch
        self.max_len = max_len if max_len is not None else model.config.seq_len
        self.cache = KVCache(model.config.n_layers)
        self.ring: list[Tensor] = []  # most recent source states, newest last
        self.position = 0
        self.forwards = 0

    @property
    def _ring_cap(self) -> int:
        mem = self.model.mem
        return mem.source.max_lag if mem is not None else 0

    def _zero_state(self) -> Tensor:
        c = self.model.config
        return Tensor(np.zeros((self.batch, 1, c.d_model), dtype=c.np_dtype))

    def _push_state(self, state: Tensor | None):
        if self.model.mem is None:
            return
        self.ring.append(state)
        cap = self._ring_cap
        if len(self.ring) > cap:
            del self.ring[: len(self.ring) - cap]


def _normalize_token(session, token) -> np.ndarray:
    arr = np.asarray(token)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.shape != (session.batch, 1):
        raise ValueError(f"expected token batch of shape {(session.batch, 1)}, got {arr.shape}")
    return arr


def decode_step(session: DecodeSession, token) -> Tensor:
    """One forward for one new token; stores this position's source state.

    Raises for current-token memory sources, which need `decode_step_two_pass`.
    """
    mem = session.model.mem
    if mem is not None and mem.source.needs_two_pass:
        raise ValueError(f"memory source {mem.source.kind!r} needs decode_step_two_pass")
    if session.position >= session.max_len:
        raise ValueError(f"decode session is full (max length {session.max_len})")
    token = _normalize_token(session, token)
    memory = None
    if mem is not None:
        memory = select_memory_from_ring(session.ring, mem.source,
                                         session.model.params.get("mem.time_mix"), session._zero_state())
    out = session.model.forward_step(token, session.position, session.cache, memory)
    session.forwards += 1
    session.position += 1
    session._push_state(out.source_state)
    return out.logits


def decode_step_two_pass(session: DecodeSession, token) -> Tensor:
    """Two forwards: pass 1 produces this position's state with lagged memory,
    pass 2 re-runs the position injecting it. Pass-2 K/V and state are kept."""
    mem = session.model.mem
    if mem is None or not mem.source.needs_two_pass:
        kind = "none" if mem is None else mem.source.kind
        raise ValueError(f"two-pass decoding requires a current-token memory source, got {kind!r}")
    if session.position >= session.max_len:
        raise ValueError(f"decode session is full (max length {session.max_len})")
    token = _normalize_token(session, token)
    zero = session._zero_state()
    lagged = session.ring[-1] if session.ring else zero

    scratch = session.cache.clone()  # pass-1 K/V must not enter the real cache
    first = session.model.forward_step(token, session.position, scratch, lagged)
    own_state = first.source_state
    memory = own_state if mem.source.kind == "current" else own_state + lagged

    out = session.model.forward_step(token, session.position, session.cache, memory)
    session.forwards += 2
    session.position += 1
    session._push_state(out.source_state)
    return out.logits


def step_auto(session: DecodeSession, token) -> Tensor:
    """Dispatch to the single- or two-pass step per the model's memory source."""
    mem = session.model.mem
    if mem is not None and mem.source.needs_two_pass:
        return decode_step_two_pass(session, token)
    return decode_step(session, token)


def prefill(session: DecodeSession, prompt: np.ndarray, parallel: bool = False):
    """Consume prompt tokens. Sequential (default) preserves the exact
    recurrence; parallel is a single zero-memory pass, a documented
    approximation that seeds the state ring with zero-memory states."""
    prompt = np.atleast_2d(np.asarray(prompt))
    if not parallel:
        for t in range(prompt.shape[1]):
            step_auto(session, prompt[:, t : t + 1])
        return
    if session.position != 0:
        raise ValueError("parallel prefill requires a fresh session")
    model = session.model
    out = model.forward_full(prompt, want_buffer=True)
    n = prompt.shape[1]
    positions = np.arange(n)
    for i in range(model.config.n_layers):
        k_post = model.rope(model.rmsnorm(out.raw_keys[i]), positions)
        session.cache.keys[i] = k_post
        session.cache.values[i] = out.raw_values[i]
    session.position = n
    session.forwards += 1
    if model.mem is not None:
        for lag in range(min(session._ring_cap, n), 0, -1):
            session._push_state(out.source_state[:, n - lag : n - lag + 1])


def generate(model: Model, prompt, n: int, temperature: float = 0.0, seed: int = 0,
             max_len: int | None = None, parallel_prefill: bool = False,
             trace: list | None = None) -> np.ndarray:
    """Greedy (temperature 0) or temperature sampling of `n` tokens after `prompt`.

    Deterministic for fixed seed. If `trace` is given, appends one
    (token_id, top_logit, memory_norm) triple per generated token.
    """
    prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)
    rng = np.random.default_rng(seed)
    with no_grad():
        session = DecodeSession(model, batch=1, max_len=max_len)
        logits = None
        if prompt.size:
            prefill(session, prompt[None, :-1], parallel=parallel_prefill)
            logits = step_auto(session, prompt[None, -1:])
        out = list(prompt)
        for i in range(n):
            if logits is None:
                raise ValueError("generation needs at least one prompt token")
            row = logits.data[0, 0]
            if temperature <= 0.0:
                nxt = int(np.argmax(row))
            else:
                probs = softmax(Tensor(row / temperature)).data
                nxt = int(rng.choice(len(row), p=probs / probs.sum()))
            if trace is not None:
                mem_norm = float(np.linalg.norm(session.ring[-1].data)) if session.ring else 0.0
                trace.append((nxt, float(row.max()), mem_norm))
            out.append(nxt)
            if i + 1 < n:
                logits = step_auto(session, np.array([[nxt]]))
    return np.asarray(out, dtype=np.int64)
