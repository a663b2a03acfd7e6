"""Cross-token recurrent memory: configuration and the injection primitives.

The memory vector for a position is a source-layer hidden state taken from
earlier positions (usually the immediately preceding one). It enters the
transformer two ways, both optional per config:

- ``kv_projection``: the memory is projected into per-layer key/value head
  space and mixed with the locally computed raw K/V through a pair of
  input-dependent per-head gates (``2 * sigmoid(W x)``, neutral at init).
- ``residual_injection``: the memory, scaled by a learnable per-layer
  coefficient, is added to the block input before normalization.

Everything here is stateless given its inputs; parameters live in the model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

SOURCE_KINDS = ("previous", "learned_average", "current", "current_plus_previous")
INJECTIONS = ("kv_projection", "residual_injection")
KV_MODES = ("additive", "replace_local")
KV_PARTS = ("keys_and_values", "keys_only", "values_only")
SHARING = ("shared", "layerwise")


@dataclass(frozen=True)
class MemorySourceSpec:
    """Which earlier (or same-position) source state feeds a position.

    kind:
      previous               state from `lag` positions back (zero before start)
      learned_average        softmax-weighted mix of the last `window` states
      current                the position's own state, from a first pass
      current_plus_previous  own state plus the immediately preceding one
    """

    kind: str = "previous"
    lag: int = 1
    window: int = 4

    def __post_init__(self):
        if self.kind not in SOURCE_KINDS:
            raise ValueError(f"unknown memory source kind {self.kind!r}")
        if self.lag < 1 or self.window < 1:
            raise ValueError("memory source lag/window must be >= 1")

    @property
    def needs_two_pass(self) -> bool:
        return self.kind in ("current", "current_plus_previous")

    @property
    def forwards_per_token(self) -> int:
        return 2 if self.needs_two_pass else 1

    @property
    def max_lag(self) -> int:
        if self.kind == "previous":
            return self.lag
        if self.kind == "learned_average":
            return self.window
        return 1  # current kinds keep one carried state


@dataclass(frozen=True)
class MemoryConfig:
    """Recurrent-memory wiring for a model.

    `source_layers` holds 1-based layer indices; a single entry reads that
    layer's output, several entries are mixed through learnable softmax
    weights. `target_layers` of None means every layer receives injections.
    """

    source_layers: tuple = ()  # filled from depth when empty
    projection_sharing: str = "shared"
    injection: tuple = ("kv_projection", "residual_injection")
    kv_mode: str = "additive"
    kv_parts: str = "keys_and_values"
    target_layers: tuple | None = None
    gamma_init: float = 0.1
    source: MemorySourceSpec = field(default_factory=MemorySourceSpec)

    def __post_init__(self):
        object.__setattr__(self, "source_layers", _as_layer_tuple(self.source_layers))
        if self.target_layers is not None:
            object.__setattr__(self, "target_layers", _as_layer_tuple(self.target_layers))
        if self.projection_sharing not in SHARING:
            raise ValueError(f"unknown projection sharing {self.projection_sharing!r}")
        if self.kv_mode not in KV_MODES:
            raise ValueError(f"unknown kv mode {self.kv_mode!r}")
        if self.kv_parts not in KV_PARTS:
            raise ValueError(f"unknown kv parts {self.kv_parts!r}")
        bad = set(self.injection) - set(INJECTIONS)
        if bad:
            raise ValueError(f"unknown injection(s) {sorted(bad)}")
        if self.injection and self.target_layers is not None and not self.target_layers:
            raise ValueError("target_layers must be non-empty when injections are enabled")

    def resolve(self, n_layers: int) -> "MemoryConfig":
        """Fill depth-dependent defaults and validate layer indices."""
        src = self.source_layers or (default_source_layer(n_layers),)
        tgt = self.target_layers if self.target_layers is not None else tuple(range(1, n_layers + 1))
        for layer in (*src, *tgt):
            if not 1 <= layer <= n_layers:
                raise ValueError(f"layer index {layer} outside [1, {n_layers}]")
        cfg = MemoryConfig(
            source_layers=src,
            projection_sharing=self.projection_sharing,
            injection=tuple(self.injection),
            kv_mode=self.kv_mode,
            kv_parts=self.kv_parts,
            target_layers=tgt,
            gamma_init=self.gamma_init,
            source=self.source,
        )
        return cfg

    @property
    def uses_kv(self) -> bool:
        return "kv_projection" in self.injection

    @property
    def uses_residual(self) -> bool:
        return "residual_injection" in self.injection


def default_source_layer(n_layers: int) -> int:
    """Upper-middle source layer: 60% of depth, rounded up."""
    return max(1, math.ceil(0.6 * n_layers))


def _as_layer_tuple(value) -> tuple:
    if isinstance(value, int):
        return (value,)
    return tuple(int(v) for v in value)


# -- injection primitives --------------------------------------------------


def dual_gates(x: Tensor, gate_w: Tensor):
    """Input-dependent local/recurrent gates, each (B, P, n_kv, 1) in (0, 2).

    Zero gate weights give exactly 1.0 on both sides (2 * sigmoid(0)).
    """
    n_kv = gate_w.shape[1] // 2
    g = 2.0 * T.sigmoid(x @ gate_w)  # (B, P, 2*n_kv)
    shape = (*x.shape[:2], n_kv, 1)
    return g[:, :, :n_kv].reshape(shape), g[:, :, n_kv:].reshape(shape)


def project_memory(m: Tensor, key_w: Tensor, value_w: Tensor, n_kv: int, d_head: int):
    """Project a memory vector into raw key/value head space."""
    shape = (*m.shape[:2], n_kv, d_head)
    return (m @ key_w).reshape(shape), (m @ value_w).reshape(shape)


def combine_kv(k_local, v_local, k_rec, v_rec, g_local, g_rec, kv_mode: str, kv_parts: str):
    """Mix local and recurrent raw K/V through the gates.

    additive adds the gated recurrent term to the gated local one;
    replace_local drops the local term on the side(s) receiving memory.
    The gates always modulate whichever terms are present.
    """
    rec_keys = kv_parts in ("keys_and_values", "keys_only")
    rec_vals = kv_parts in ("keys_and_values", "values_only")
    if kv_mode == "additive":
        k = g_local * k_local + g_rec * k_rec if rec_keys else g_local * k_local
        v = g_local * v_local + g_rec * v_rec if rec_vals else g_local * v_local
    else:
        k = g_rec * k_rec if rec_keys else g_local * k_local
        v = g_rec * v_rec if rec_vals else g_local * v_local
    return k, v


# -- memory selection --------------------------------------------------------


def select_memory(history: Tensor, positions, spec: MemorySourceSpec, time_mix: Tensor | None = None) -> Tensor:
    """Memory vectors for `positions` (0-based) read from per-position `history`.

    `history` is (B, T, d) source states; states before the sequence start
    are zero. Current kinds require history to be populated at the queried
    positions themselves (an initialization pass provides that).
    """
    positions = np.asarray(positions)

    def lagged(lag):
        idx = positions - lag
        rows = T.take(history, np.maximum(idx, 0), axis=1)
        valid = (idx >= 0).astype(history.dtype).reshape(1, -1, 1)
        return rows * valid

    if spec.kind == "previous":
        return lagged(spec.lag)
    if spec.kind == "learned_average":
        if time_mix is None:
            raise ValueError("learned_average memory source needs mixing weights")
        w = T.softmax(time_mix, axis=-1)
        out = None
        for j in range(spec.window):
            term = w[j] * lagged(j + 1)
            out = term if out is None else out + term
        return out
    if spec.kind == "current":
        return T.take(history, positions, axis=1)
    # current_plus_previous
    return T.take(history, positions, axis=1) + lagged(1)


def select_memory_from_ring(ring, spec: MemorySourceSpec, time_mix: Tensor | None, zero: Tensor) -> Tensor:
    """Decode-time memory from a ring of recent states (ring[-1] is the newest).

    `zero` supplies the shape/dtype for missing states. Current kinds use the
    lag-1 state here; their own-state half is produced by the second pass.
    """
    def back(k):
        return ring[-k] if len(ring) >= k else zero

    if spec.kind == "learned_average":
        if time_mix is None:
            raise ValueError("learned_average memory source needs mixing weights")
        w = T.softmax(time_mix, axis=-1)
        out = None
        for j in range(spec.window):
            term = w[j] * back(j + 1)
            out = term if out is None else out + term
        return out
    if spec.kind == "previous":
        return back(spec.lag)
    return back(1)
