"""Decoder-only transformer with an optional recurrent-memory pathway.

Backbone (all of it exercised by the tests):
- untied input embedding and LM head, no biases, no dropout
- parameter-free RMSNorm, pre-norm blocks
- per-head RMS normalization of q/k, then RoPE (base 10,000, half-split pairs)
- grouped key/value heads (query heads grouped contiguously per kv head)
- squared-ReLU MLP with hidden width 4*d
- learnable per-block residual scale plus a skip back to the initial embedding
- sliding-window / full-context layer schedule; the final layer is always full
- logits soft-capped to (-c, c) via c*tanh(z/c)
- optional per-layer value-embedding tables mixed into V through a sigmoid gate

Three forward modes share one block implementation:
- full:    parallel over all positions (training init pass, baseline eval)
- refine:  recompute a subset of positions against buffered raw K/V, with
           fresh rows substituted at the recomputed positions (write-back)
- step:    one new position against a cache of post-RoPE K/V (decoding)

When `ModelConfig.memory` is set, per-position memory vectors are injected
into target layers (see `memory.py`); passing zero memories reproduces the
plain backbone exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .memory import MemoryConfig, combine_kv, dual_gates, project_memory
from .tensor import Tensor

RMS_EPS = 1e-6
MASKED = -1e30


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    n_kv_heads: int = 0  # 0 -> n_heads
    d_head: int = 0  # 0 -> d_model // n_heads
    vocab_size: int = 256
    seq_len: int = 128
    window_pattern: str = "SSSL"  # S = sliding, L = full; tiled; last layer forced full
    window_size: int = 0  # 0 -> ceil(seq_len / 4)
    softcap: float = 15.0
    rope_base: float = 10000.0
    value_embeddings: bool = False
    dtype: str = "float64"
    memory: MemoryConfig | None = None

    def __post_init__(self):
        if self.n_kv_heads == 0:
            object.__setattr__(self, "n_kv_heads", self.n_heads)
        if self.d_head == 0:
            if self.d_model % self.n_heads:
                raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
            object.__setattr__(self, "d_head", self.d_model // self.n_heads)
        if self.window_size == 0:
            object.__setattr__(self, "window_size", math.ceil(self.seq_len / 4))
        if self.n_heads * self.d_head != self.d_model:
            raise ValueError(f"n_heads*d_head = {self.n_heads * self.d_head} != d_model = {self.d_model}")
        if self.n_heads % self.n_kv_heads:
            raise ValueError(f"n_kv_heads {self.n_kv_heads} must divide n_heads {self.n_heads}")
        if self.d_head % 2:
            raise ValueError(f"d_head must be even for rotary embeddings, got {self.d_head}")
        if set(self.window_pattern) - {"S", "L"} or not self.window_pattern:
            raise ValueError(f"window pattern must be non-empty over {{S, L}}, got {self.window_pattern!r}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")
        if self.memory is not None:
            self.memory.resolve(self.n_layers)  # validates layer indices

    @classmethod
    def from_depth(cls, n_layers: int, **overrides) -> "ModelConfig":
        """Constant-aspect-ratio scaling: d = 64 * depth, head dim 128."""
        d = 64 * n_layers
        if d % 128:
            raise ValueError("depth must be even so d = 64*depth splits into 128-wide heads")
        return cls(n_layers=n_layers, d_model=d, n_heads=d // 128, d_head=128, **overrides)

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def layer_is_full(self, i: int) -> bool:
        """Full-context flag for 0-based layer i; the last layer is always full."""
        if i == self.n_layers - 1:
            return True
        return self.window_pattern[i % len(self.window_pattern)] == "L"

    def with_memory(self, memory: MemoryConfig | None) -> "ModelConfig":
        return replace(self, memory=memory)


@dataclass
class ForwardOut:
    logits: Tensor  # (B, P, vocab)
    hiddens: list  # per layer, (B, P, d) block outputs at the query rows
    source_state: Tensor | None = None  # (B, P, d) mixed source-layer state
    raw_keys: list | None = None  # per layer raw pre-RoPE K at query rows
    raw_values: list | None = None
    buffer_keys: list | None = None  # refine mode: full-length buffers after write-back
    buffer_values: list | None = None


class KVCache:
    """Per-layer post-RoPE keys and values for incremental decoding."""

    def __init__(self, n_layers: int):
        self.keys = [None] * n_layers
        self.values = [None] * n_layers

    def __len__(self):
        return 0 if self.keys[0] is None else self.keys[0].shape[1]

    def append(self, i: int, k_new: Tensor, v_new: Tensor):
        if self.keys[i] is None:
            self.keys[i], self.values[i] = k_new, v_new
        else:
            self.keys[i] = T.concat([self.keys[i], k_new], axis=1)
            self.values[i] = T.concat([self.values[i], v_new], axis=1)

    def clone(self) -> "KVCache":
        """Shallow copy; appends on the clone leave this cache untouched."""
        other = KVCache(len(self.keys))
        other.keys = list(self.keys)
        other.values = list(self.values)
        return other


class Model:
    """Parameters plus the three forward modes. Read-only during forwards."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.mem = config.memory.resolve(config.n_layers) if config.memory else None
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self.kinds: dict[str, str] = {}
        self.position_forwards = 0  # positions computed per sequence, for compute accounting
        self._rope_tables_np = None
        self._build(np.random.default_rng(seed))

    # -- parameter construction ------------------------------------------------

    def _add(self, name, data, kind):
        self.params[name] = Tensor(np.asarray(data, dtype=self.config.np_dtype), requires_grad=True)
        self.kinds[name] = kind

    def _mat(self, rng, name, fan_in, shape):
        self._add(name, rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape), "matrix")

    def _build(self, rng):
        c = self.config
        kv_dim = c.n_kv_heads * c.d_head
        self._add("emb", rng.normal(0.0, 0.02, size=(c.vocab_size, c.d_model)), "embedding")
        for i in range(c.n_layers):
            p = f"layers.{i}."
            self._mat(rng, p + "wq", c.d_model, (c.d_model, c.n_heads * c.d_head))
            self._mat(rng, p + "wk", c.d_model, (c.d_model, kv_dim))
            self._mat(rng, p + "wv", c.d_model, (c.d_model, kv_dim))
            self._mat(rng, p + "wo", c.n_heads * c.d_head, (c.n_heads * c.d_head, c.d_model))
            self._mat(rng, p + "w1", c.d_model, (c.d_model, 4 * c.d_model))
            self._mat(rng, p + "w2", 4 * c.d_model, (4 * c.d_model, c.d_model))
            self._add(p + "resid_scale", 1.0, "scalar")
            self._add(p + "embed_skip", 0.0, "scalar")
            if c.value_embeddings:
                self._add(p + "ve", rng.normal(0.0, 0.02, size=(c.vocab_size, kv_dim)), "embedding")
                self._add(p + "ve_gate", np.zeros((c.d_model, c.n_kv_heads)), "matrix")
        self._mat(rng, "lm_head", c.d_model, (c.d_model, c.vocab_size))
        if self.mem is not None:
            m = self.mem
            if m.uses_kv:
                if m.projection_sharing == "shared":
                    self._mat(rng, "mem.key_proj", c.d_model, (c.d_model, kv_dim))
                    self._mat(rng, "mem.value_proj", c.d_model, (c.d_model, kv_dim))
                else:
                    for layer in m.target_layers:
                        self._mat(rng, f"mem.key_proj.{layer}", c.d_model, (c.d_model, kv_dim))
                        self._mat(rng, f"mem.value_proj.{layer}", c.d_model, (c.d_model, kv_dim))
                for layer in m.target_layers:
                    self._add(f"mem.gate.{layer}", np.zeros((c.d_model, 2 * c.n_kv_heads)), "matrix")
            if m.uses_residual:
                for layer in m.target_layers:
                    self._add(f"mem.scale.{layer}", m.gamma_init, "scalar")
            if m.source.kind == "learned_average":
                self._add("mem.time_mix", np.zeros(m.source.window), "scalar")
            if len(m.source_layers) > 1:
                self._add("mem.layer_mix", np.zeros(len(m.source_layers)), "scalar")

    def named_parameters(self) -> dict:
        return dict(self.params)

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"state dict mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, arr in state.items():
            p = self.params[name]
            if p.data.shape != arr.shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {p.data.shape}")
            p.data = arr.astype(self.config.np_dtype, copy=True)

    # -- building blocks ---------------------------------------------------------

    @staticmethod
    def rmsnorm(x: Tensor) -> Tensor:
        return x / T.sqrt(T.tmean(T.square(x), axis=-1, keepdims=True) + RMS_EPS)

    def softcap(self, z: Tensor) -> Tensor:
        c = self.config.softcap
        return c * T.tanh(z / c)

    def _rope_cos_sin(self, positions: np.ndarray):
        half = self.config.d_head // 2
        need = int(positions.max()) + 1 if positions.size else 1
        if self._rope_tables_np is None or self._rope_tables_np[0].shape[0] < need:
            grow = max(need, self.config.seq_len)
            inv = self.config.rope_base ** (-np.arange(half, dtype=np.float64) * 2.0 / self.config.d_head)
            ang = np.arange(grow, dtype=np.float64)[:, None] * inv[None, :]
            dt = self.config.np_dtype
            self._rope_tables_np = (np.cos(ang).astype(dt), np.sin(ang).astype(dt))
        cos, sin = self._rope_tables_np
        return cos[positions][None, :, None, :], sin[positions][None, :, None, :]

    def rope(self, x: Tensor, positions: np.ndarray) -> Tensor:
        """Rotate feature pairs (i, i + d_head/2) by position-dependent angles."""
        half = self.config.d_head // 2
        cos, sin = self._rope_cos_sin(np.asarray(positions))
        x1, x2 = x[..., :half], x[..., half:]
        return T.concat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def _attend(self, q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray) -> Tensor:
        B, P, H, Dh = q.shape
        C, KV = k.shape[1], k.shape[2]
        G = H // KV
        # fold the query-head group into the row axis so every matmul is an
        # exact batched GEMM (no broadcast to reduce in backward)
        qg = q.reshape(B, P, KV, G, Dh).transpose(0, 2, 3, 1, 4).reshape(B, KV, G * P, Dh)
        kt = k.transpose(0, 2, 3, 1)  # (B,KV,Dh,C)
        mask_g = np.broadcast_to(mask, (G, P, C)).reshape(G * P, C)
        scores = (qg @ kt) * (1.0 / math.sqrt(Dh)) + mask_g
        probs = T.softmax(scores, axis=-1)
        vt = v.transpose(0, 2, 1, 3)  # (B,KV,C,Dh)
        out = probs @ vt  # (B,KV,G*P,Dh)
        return out.reshape(B, KV, G, P, Dh).transpose(0, 3, 1, 2, 4).reshape(B, P, H * Dh)

    def _mask(self, q_pos: np.ndarray, k_pos: np.ndarray, sliding: bool) -> np.ndarray:
        diff = q_pos[:, None].astype(np.int64) - k_pos[None, :]
        allowed = diff >= 0
        if sliding:
            allowed &= diff < self.config.window_size
        return np.where(allowed, 0.0, MASKED).astype(self.config.np_dtype)

    def _memory_rows(self, i: int, memories: Tensor | None):
        """Residual-injection and kv-projection inputs for 0-based layer i."""
        if self.mem is None or memories is None:
            return None, None, None, None
        layer = i + 1
        if layer not in self.mem.target_layers:
            return None, None, None, None
        scale = self.params.get(f"mem.scale.{layer}") if self.mem.uses_residual else None
        if self.mem.uses_kv:
            suffix = "" if self.mem.projection_sharing == "shared" else f".{layer}"
            key_w = self.params[f"mem.key_proj{suffix}"]
            value_w = self.params[f"mem.value_proj{suffix}"]
            gate_w = self.params[f"mem.gate.{layer}"]
            return scale, key_w, value_w, gate_w
        return scale, None, None, None

    # -- the unified forward -----------------------------------------------------

    def _forward(self, tokens: np.ndarray, q_pos: np.ndarray, memories: Tensor | None,
                 mode: str, buffer_keys=None, buffer_values=None, cache: KVCache | None = None,
                 want_buffer: bool = False) -> ForwardOut:
        c = self.config
        tokens = np.asarray(tokens)
        if tokens.ndim != 2 or tokens.shape[1] != len(q_pos):
            raise ValueError(f"tokens shape {tokens.shape} does not match {len(q_pos)} query positions")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= c.vocab_size):
            flat = np.argwhere((tokens < 0) | (tokens >= c.vocab_size))[0]
            raise ValueError(f"token id out of range [0, {c.vocab_size}) at (sequence, position) {tuple(flat)}")
        if memories is not None and memories.shape[-1] != c.d_model:
            raise ValueError(f"memory dimension {memories.shape[-1]} != d_model {c.d_model}")
        if self.mem is not None and memories is None:
            memories = Tensor(np.zeros((tokens.shape[0], tokens.shape[1], c.d_model), dtype=c.np_dtype))
        B, P = tokens.shape
        KV, Dh = c.n_kv_heads, c.d_head

        if mode == "refine":
            ctx_pos = np.arange(buffer_keys[0].shape[1])
        elif mode == "step":
            if len(cache) != q_pos[0]:
                raise ValueError(f"cache holds {len(cache)} positions but query position is {q_pos[0]}")
            ctx_pos = np.arange(q_pos[0] + 1)
        else:
            ctx_pos = q_pos
        masks = {
            False: self._mask(q_pos, ctx_pos, sliding=False),
            True: self._mask(q_pos, ctx_pos, sliding=True),
        }

        x0 = T.take(self.params["emb"], tokens, axis=0)
        x = x0
        hiddens, raw_keys, raw_values, new_bk, new_bv = [], [], [], [], []
        for i in range(c.n_layers):
            p = f"layers.{i}."
            x_in = self.params[p + "resid_scale"] * x + self.params[p + "embed_skip"] * x0
            mem_scale, key_w, value_w, gate_w = self._memory_rows(i, memories)
            if mem_scale is not None:
                x_in = x_in + mem_scale * memories
            xn = self.rmsnorm(x_in)
            q = (xn @ self.params[p + "wq"]).reshape(B, P, c.n_heads, Dh)
            k_local = (xn @ self.params[p + "wk"]).reshape(B, P, KV, Dh)
            v_local = (xn @ self.params[p + "wv"]).reshape(B, P, KV, Dh)
            if c.value_embeddings:
                ve = T.take(self.params[p + "ve"], tokens, axis=0).reshape(B, P, KV, Dh)
                gate = T.sigmoid(x_in @ self.params[p + "ve_gate"]).reshape(B, P, KV, 1)
                v_local = v_local + gate * ve
            if key_w is not None:
                k_rec, v_rec = project_memory(memories, key_w, value_w, KV, Dh)
                g_local, g_rec = dual_gates(x_in, gate_w)
                k_raw, v_raw = combine_kv(k_local, v_local, k_rec, v_rec, g_local, g_rec,
                                          self.mem.kv_mode, self.mem.kv_parts)
            else:
                k_raw, v_raw = k_local, v_local

            if mode == "full":
                k_ctx = self.rope(self.rmsnorm(k_raw), q_pos)
                v_ctx = v_raw
                if want_buffer:
                    raw_keys.append(k_raw)
                    raw_values.append(v_raw)
            elif mode == "refine":
                bk = T.scatter_rows(buffer_keys[i], k_raw, q_pos, axis=1)
                bv = T.scatter_rows(buffer_values[i], v_raw, q_pos, axis=1)
                new_bk.append(bk)
                new_bv.append(bv)
                k_ctx = self.rope(self.rmsnorm(bk), ctx_pos)
                v_ctx = bv
            else:  # step
                k_new = self.rope(self.rmsnorm(k_raw), q_pos)
                cache.append(i, k_new, v_raw)
                k_ctx, v_ctx = cache.keys[i], cache.values[i]

            q_rot = self.rope(self.rmsnorm(q), q_pos)
            att = self._attend(q_rot, k_ctx, v_ctx, masks[not c.layer_is_full(i)])
            y = x_in + att @ self.params[p + "wo"]
            h = self.rmsnorm(y) @ self.params[p + "w1"]
            x = y + T.square(T.relu(h)) @ self.params[p + "w2"]
            hiddens.append(x)

        logits = self.softcap(self.rmsnorm(x) @ self.params["lm_head"])
        self.position_forwards += P
        out = ForwardOut(logits=logits, hiddens=hiddens, source_state=self._source_state(hiddens))
        if want_buffer:
            out.raw_keys, out.raw_values = raw_keys, raw_values
        if mode == "refine":
            out.buffer_keys, out.buffer_values = new_bk, new_bv
        return out

    def _source_state(self, hiddens) -> Tensor | None:
        if self.mem is None:
            return None
        layers = self.mem.source_layers
        if len(layers) == 1:
            return hiddens[layers[0] - 1]
        w = T.softmax(self.params["mem.layer_mix"], axis=-1)
        out = None
        for j, layer in enumerate(layers):
            term = w[j] * hiddens[layer - 1]
            out = term if out is None else out + term
        return out

    # -- public forward modes ------------------------------------------------------

    def forward_full(self, tokens, memories: Tensor | None = None, want_buffer: bool = False) -> ForwardOut:
        """Parallel forward over whole sequences (B, T)."""
        tokens = np.asarray(tokens)
        return self._forward(tokens, np.arange(tokens.shape[1]), memories, "full", want_buffer=want_buffer)

    def forward_refine(self, tokens_at, positions, memories, buffer_keys, buffer_values) -> ForwardOut:
        """Recompute `positions` (0-based) against buffered raw K/V.

        Attention sees fresh raw K/V rows at the recomputed positions and
        buffer rows everywhere else; the returned buffer lists are the
        written-back buffers.
        """
        return self._forward(np.asarray(tokens_at), np.asarray(positions), memories, "refine",
                             buffer_keys=buffer_keys, buffer_values=buffer_values)

    def forward_step(self, token, position: int, cache: KVCache, memory: Tensor | None = None) -> ForwardOut:
        """One position (B, 1) against a KV cache; appends this position's K/V."""
        return self._forward(np.asarray(token), np.array([position]), memory, "step", cache=cache)
