"""Cross-module consistency checks on tiny models.

Every check pits one computation path against an independent one: parallel
vs cached, batched refinement vs per-position recomputation, the interleaved
singleton-subset schedule vs the exact sequential unroll, autodiff vs finite
differences. The `oracle-check` command runs them all and exits non-zero on
any failure; the test suite reuses them directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoding import DecodeSession, decode_step
from .memory import MemoryConfig, MemorySourceSpec
from .model import KVCache, Model, ModelConfig
from .tensor import Tensor, grad_check, no_grad
from .training import (interleaved_step, partition_strided, refine_subset,
                       refine_subset_bruteforce, init_forward, sequential_unroll)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def tiny_memory_config(**overrides) -> MemoryConfig:
    defaults = dict(source_layers=(2,))
    defaults.update(overrides)
    return MemoryConfig(**defaults)


def tiny_model_config(memory: MemoryConfig | None = None, **overrides) -> ModelConfig:
    defaults = dict(n_layers=2, d_model=16, n_heads=2, n_kv_heads=2, vocab_size=16, seq_len=8)
    defaults.update(overrides)
    return ModelConfig(memory=memory, **defaults)


def _random_tokens(config: ModelConfig, batch: int, seed: int):
    rng = np.random.default_rng(seed)
    return (rng.integers(0, config.vocab_size, size=(batch, config.seq_len)),
            rng.integers(0, config.vocab_size, size=(batch, config.seq_len)))


def check_zero_memory_equivalence(n_configs: int = 10, tol: float = 1e-6) -> CheckResult:
    """Memory-enabled forward with zero memories == plain backbone forward."""
    rng = np.random.default_rng(2024)
    worst = 0.0
    for trial in range(n_configs):
        n_layers = int(rng.integers(1, 4))
        n_heads = int(rng.integers(1, 4))
        d_head = 2 * int(rng.integers(2, 5))
        divisors = [k for k in range(1, n_heads + 1) if n_heads % k == 0]
        cfg = dict(
            n_layers=n_layers,
            d_model=n_heads * d_head,
            n_heads=n_heads,
            n_kv_heads=int(rng.choice(divisors)),
            d_head=d_head,
            vocab_size=int(rng.integers(8, 40)),
            seq_len=int(rng.integers(4, 12)),
            window_pattern="SL" if rng.integers(2) else "SSSL",
            value_embeddings=bool(rng.integers(2)),
        )
        mem = MemoryConfig(
            source_layers=(int(rng.integers(1, n_layers + 1)),),
            projection_sharing="layerwise" if rng.integers(2) else "shared",
            kv_parts=str(rng.choice(["keys_and_values", "keys_only", "values_only"])),
        )
        seed = int(rng.integers(0, 2**31))
        plain = Model(ModelConfig(**cfg), seed=seed)
        withmem = Model(ModelConfig(**cfg, memory=mem), seed=seed)
        # randomize the memory-pathway parameters; they are all multiplied by m = 0
        for name, p in withmem.params.items():
            if name.startswith(("mem.key_proj", "mem.value_proj", "mem.scale")):
                p.data = rng.normal(size=p.data.shape).astype(p.data.dtype)
        tokens, _ = _random_tokens(plain.config, 2, seed ^ 0x5A5A)
        with no_grad():
            a = plain.forward_full(tokens).logits.data
            b = withmem.forward_full(tokens, memories=None).logits.data
        worst = max(worst, float(np.max(np.abs(a - b))))
    return CheckResult("zero-memory equivalence", worst < tol,
                       f"max |logit delta| {worst:.3e} over {n_configs} random configs (tol {tol:g})")


def check_gate_neutrality() -> CheckResult:
    """Zero gate weights give both gates == 1.0 exactly on every layer/head."""
    from .memory import dual_gates

    cfg = tiny_model_config(tiny_memory_config(), n_layers=3, n_heads=4, n_kv_heads=2, d_model=32)
    model = Model(cfg, seed=7)
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 5, cfg.d_model)))
    exact = True
    for layer in model.mem.target_layers:
        g_local, g_rec = dual_gates(x, model.params[f"mem.gate.{layer}"])
        exact &= bool(np.all(g_local.data == 1.0) and np.all(g_rec.data == 1.0))
    return CheckResult("gate neutrality", exact, "2*sigmoid(0) == 1.0 bit-exactly on all target layers")


def check_cache_vs_full(tol: float = 1e-5) -> CheckResult:
    """Incremental cached decoding == full parallel forward, per position."""
    worst = 0.0
    for memory, seed in ((None, 11), (tiny_memory_config(), 13)):
        cfg = tiny_model_config(memory, n_layers=3, seq_len=10, window_pattern="SL")
        model = Model(cfg, seed=seed)
        tokens, _ = _random_tokens(cfg, 2, seed)
        with no_grad():
            full = model.forward_full(tokens).logits.data  # zero memory everywhere
            cache = KVCache(cfg.n_layers)
            zero = Tensor(np.zeros((2, 1, cfg.d_model))) if memory else None
            for t in range(cfg.seq_len):
                out = model.forward_step(tokens[:, t : t + 1], t, cache, zero)
                worst = max(worst, float(np.max(np.abs(out.logits.data[:, 0] - full[:, t]))))
    return CheckResult("cache vs full equivalence", worst < tol,
                       f"max per-position |delta| {worst:.3e} (tol {tol:g})")


def check_interleaved_singletons_vs_sequential(tol: float = 1e-5, corrupt: bool = False) -> CheckResult:
    """Singleton-subset interleaving in order == the exact sequential unroll."""
    cfg = tiny_model_config(tiny_memory_config(), seq_len=6)
    model = Model(cfg, seed=5)
    tokens, targets = _random_tokens(cfg, 2, 5)
    with no_grad():
        seq_bd, _ = sequential_unroll(model, tokens, targets)
        inter = interleaved_step(model, tokens, targets, partition_strided(cfg.seq_len, cfg.seq_len),
                                 corrupt_writeback=corrupt)
    delta = float(np.max(np.abs(inter.per_position_refined - seq_bd.per_position_init)))
    return CheckResult("singleton interleaving vs sequential unroll", delta < tol,
                       f"max per-position loss |delta| {delta:.3e} (tol {tol:g})")


def check_decode_vs_unroll(tol: float = 1e-5) -> CheckResult:
    """Teacher-forced decode_step chain == sequential unroll, and the state
    consumed at step t+1 is bit-identical to the state produced at step t."""
    cfg = tiny_model_config(tiny_memory_config(), seq_len=8)
    model = Model(cfg, seed=9)
    tokens, targets = _random_tokens(cfg, 1, 3)
    with no_grad():
        bd, chain = sequential_unroll(model, tokens, targets)
        session = DecodeSession(model, batch=1)
        worst = 0.0
        handoff_ok = True
        prev_state = None
        for t in range(cfg.seq_len):
            if prev_state is not None:
                handoff_ok &= bool(np.array_equal(session.ring[-1].data, prev_state))
            logits = decode_step(session, tokens[:, t : t + 1])
            prev_state = session.ring[-1].data.copy()
            nll = -np.log(np.exp(logits.data[0, 0] - logits.data[0, 0].max())
                          / np.exp(logits.data[0, 0] - logits.data[0, 0].max()).sum())[targets[0, t]]
            worst = max(worst, abs(nll - bd.per_position_init[0, t]))
    ok = worst < tol and handoff_ok
    return CheckResult("decode vs unroll", ok,
                       f"max loss |delta| {worst:.3e}, state handoff bit-identical: {handoff_ok}")


def check_refine_bruteforce(tol: float = 1e-5) -> CheckResult:
    """Batched subset refinement == per-position accumulated recomputation."""
    cfg = tiny_model_config(tiny_memory_config(), seq_len=8)
    model = Model(cfg, seed=21)
    tokens, targets = _random_tokens(cfg, 2, 17)
    part = partition_strided(cfg.seq_len, 2)
    with no_grad():
        buffer, _ = init_forward(model, tokens, targets)
        worst = 0.0
        buf_batched = buf_loop = buffer
        for positions in part.subsets:
            ce_a, buf_batched = refine_subset(model, tokens, targets, positions, buf_batched)
            ce_b, buf_loop = refine_subset_bruteforce(model, tokens, targets, positions, buf_loop)
            worst = max(worst, float(np.max(np.abs(ce_a.data - ce_b.data))))
            worst = max(worst, float(np.max(np.abs(
                buf_batched.source_states.data - buf_loop.source_states.data))))
    return CheckResult("refinement vs brute-force recomputation", worst < tol,
                       f"max |delta| {worst:.3e} across stages (tol {tol:g})")


def check_gradients(tol: float = 1e-3, step: float = 1e-4) -> CheckResult:
    """Finite differences vs autodiff on the full interleaved loss."""
    mem = MemoryConfig(source_layers=(1, 2), source=MemorySourceSpec(kind="learned_average", window=2))
    cfg = tiny_model_config(mem, n_kv_heads=1, value_embeddings=True)
    model = Model(cfg, seed=1)
    tokens, targets = _random_tokens(cfg, 1, 2)

    def loss():
        return interleaved_step(model, tokens, targets, 2).loss

    report = grad_check(loss, model.named_parameters(), step=step, tol=tol)
    return CheckResult("gradient check (interleaved loss)", report.passed,
                       f"worst rel err {report.worst:.3e} over {len(report.per_param)} parameters (tol {tol:g})")


ALL_CHECKS = (
    check_zero_memory_equivalence,
    check_gate_neutrality,
    check_cache_vs_full,
    check_interleaved_singletons_vs_sequential,
    check_decode_vs_unroll,
    check_refine_bruteforce,
    check_gradients,
)


def run_all(checks=ALL_CHECKS) -> list:
    return [check() for check in checks]
