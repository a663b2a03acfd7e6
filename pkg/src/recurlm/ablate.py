"""Ablation harness: train config variants under identical seeds/budgets and
tabulate them, mirroring the row structure of the reference experiments.

Presets cover the four standard axes — recurrent source layer, temporal
memory source, injection mechanism (plus the KV-variant detail rows), and
the interleaved subset count. Published large-scale BPB figures ride along
as a reference column; they are context, not pass/fail targets, since these
runs are desk-scale. Generic sweeps over arbitrary dotted config keys are
also supported.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

from .config import ConfigError, RunConfig
from .metrics import bpb, effective_compute, param_overhead, validation_record
from .model import Model
from .training import AdamW, train_run

# Large-scale reference BPB figures for the preset rows (20L backbone, ratio 10).
REFERENCE_BPB = {
    "source-layer": {"baseline": 0.767, 0.4: 0.757, 0.6: 0.754, 0.8: 0.756, 1.0: 0.755,
                     "learned-average": 0.754},
    "memory-source": {"baseline": 0.767, "previous(4)": 0.760, "previous(3)": 0.760,
                      "previous(2)": 0.757, "previous(1)": 0.754, "learned_average(4)": 0.754,
                      "current": 0.754, "current_plus_previous": 0.752},
    "injection": {"baseline": 0.767, "residual_injection": 0.756, "kv_projection": 0.755,
                  "kv_projection+residual_injection": 0.754},
    "kv-variants": {"values_only": 0.756, "keys_only": 0.762, "keys_and_values": 0.755,
                    "replace_local early third": 0.760},
    "subsets": {"baseline": 0.767, "S=2": 0.754, "S=4": 0.754, "S=8": 0.754},
}

PRESETS = ("source-layer", "memory-source", "injection", "kv-variants", "subsets")


@dataclass
class AblationRow:
    variant: str
    overrides: dict
    val_ce: float
    val_bpb: float
    forwards_per_token: int
    overhead: float
    token_forwards_per_step: int
    reference_bpb: float | None


@dataclass
class AblationTable:
    name: str
    rows: list

    HEADER = ("variant", "val_ce", "bpb", "forwards_per_token", "param_overhead_pct",
              "token_forwards_per_step", "reference_bpb")

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write(",".join(self.HEADER) + "\n")
        for r in self.rows:
            ref = "" if r.reference_bpb is None else f"{r.reference_bpb:.3f}"
            out.write(f"{r.variant},{r.val_ce:.6f},{r.val_bpb:.6f},{r.forwards_per_token},"
                      f"{100 * r.overhead:.4f},{r.token_forwards_per_step},{ref}\n")
        return out.getvalue()

    def to_text(self) -> str:
        lines = [f"ablation table: {self.name}"]
        widths = [max(len(h), 24) for h in self.HEADER]
        lines.append("  ".join(h.ljust(w) for h, w in zip(self.HEADER, widths)))
        for r in self.rows:
            ref = "-" if r.reference_bpb is None else f"{r.reference_bpb:.3f}"
            cells = [r.variant, f"{r.val_ce:.6f}", f"{r.val_bpb:.6f}", str(r.forwards_per_token),
                     f"{100 * r.overhead:.4f}", str(r.token_forwards_per_step), ref]
            lines.append("  ".join(c.ljust(w) for c, w in zip(cells, widths)))
        return "\n".join(lines) + "\n"


def run_variant(cfg: RunConfig, variant: str, overrides: dict, reference: float | None = None,
                log=None) -> AblationRow:
    """Train one variant to the configured budget and evaluate it."""
    run_cfg = RunConfig(dict(cfg.values))
    for key, value in overrides.items():
        run_cfg.set(key, str(value))
    v = run_cfg.values
    model_cfg = run_cfg.model_config()
    model = Model(model_cfg, seed=v["model.seed"])
    plan = run_cfg.train_plan(model.parameter_count())
    corpus = run_cfg.corpus()
    optimizer = AdamW(model, lr=plan.lr, betas=plan.betas, eps=plan.eps,
                      weight_decay=plan.weight_decay)
    strategy = v["train.strategy"]

    def batch_fn(step):
        return corpus.batch("train", model_cfg.seq_len, plan.batch_size, plan.seed, step)

    history = train_run(model, optimizer, plan, batch_fn, strategy=strategy,
                        n_subsets=v["train.n_subsets"], chunk_size=v["train.chunk_size"])
    record = validation_record(model, corpus, model_cfg.seq_len, plan.batch_size,
                               v["train.val_batches"], v["train.val_seed"], v["train.val_mode"],
                               v["train.chunk_size"])
    forwards = 1
    if model_cfg.memory is not None and strategy != "baseline":
        forwards = model_cfg.memory.source.forwards_per_token
    overhead = param_overhead(model_cfg).fraction if model_cfg.memory is not None else 0.0
    row = AblationRow(variant=variant, overrides=overrides, val_ce=record.mean_nats,
                      val_bpb=bpb(record), forwards_per_token=forwards, overhead=overhead,
                      token_forwards_per_step=history[-1].token_forwards if history else 0,
                      reference_bpb=reference)
    if log is not None:
        log(f"variant {variant}: val_ce={row.val_ce:.6f} bpb={row.val_bpb:.6f}")
    return row


def sweep(cfg: RunConfig, key: str, values, log=None) -> AblationTable:
    """Generic one-axis sweep over a dotted config key."""
    if key not in cfg.values:
        raise ConfigError(f"unknown sweep key {key!r}")
    rows = [run_variant(cfg, f"{key}={value}", {key: value}, log=log) for value in values]
    return AblationTable(name=f"sweep {key}", rows=rows)


def _baseline_overrides() -> dict:
    return {"memory.enabled": "false", "train.strategy": "baseline"}


def preset_table(cfg: RunConfig, preset: str, log=None) -> AblationTable:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    refs = REFERENCE_BPB[preset]
    rows = []

    if preset == "source-layer":
        depth = cfg.values["model.n_layers"]
        rows.append(run_variant(cfg, "baseline", _baseline_overrides(), refs["baseline"], log))
        analogs = []
        for rel in (0.4, 0.6, 0.8, 1.0):
            layer = max(1, round(rel * depth))
            if layer not in analogs:
                analogs.append(layer)
                rows.append(run_variant(cfg, f"layer {layer}", {"memory.source_layers": layer},
                                        refs[rel], log))
        mix = ",".join(str(v) for v in analogs)
        rows.append(run_variant(cfg, f"learned average of layers {mix}",
                                {"memory.source_layers": mix}, refs["learned-average"], log))

    elif preset == "memory-source":
        rows.append(run_variant(cfg, "baseline", _baseline_overrides(), refs["baseline"], log))
        for lag in (4, 3, 2, 1):
            rows.append(run_variant(cfg, f"previous({lag})",
                                    {"memory.source.kind": "previous", "memory.source.lag": lag},
                                    refs[f"previous({lag})"], log))
        rows.append(run_variant(cfg, "learned_average(4)",
                                {"memory.source.kind": "learned_average", "memory.source.window": 4},
                                refs["learned_average(4)"], log))
        for kind in ("current", "current_plus_previous"):
            rows.append(run_variant(cfg, kind, {"memory.source.kind": kind}, refs[kind], log))

    elif preset == "injection":
        rows.append(run_variant(cfg, "baseline", _baseline_overrides(), refs["baseline"], log))
        for label, inj in (("residual_injection", "residual_injection"),
                           ("kv_projection", "kv_projection"),
                           ("kv_projection+residual_injection", "kv_projection,residual_injection")):
            rows.append(run_variant(cfg, label, {"memory.injection": inj}, refs[label], log))

    elif preset == "kv-variants":
        for parts in ("values_only", "keys_only", "keys_and_values"):
            rows.append(run_variant(cfg, parts,
                                    {"memory.injection": "kv_projection", "memory.kv_parts": parts},
                                    refs[parts], log))
        early = ",".join(str(v) for v in range(1, max(1, cfg.values["model.n_layers"] // 3) + 1))
        rows.append(run_variant(cfg, "replace_local early third",
                                {"memory.injection": "kv_projection", "memory.kv_mode": "replace_local",
                                 "memory.target_layers": early},
                                refs["replace_local early third"], log))

    else:  # subsets
        rows.append(run_variant(cfg, "baseline", _baseline_overrides(), refs["baseline"], log))
        for s in (2, 4, 8):
            rows.append(run_variant(cfg, f"S={s}", {"train.n_subsets": s}, refs[f"S={s}"], log))

    return AblationTable(name=preset, rows=rows)
