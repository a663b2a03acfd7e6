"""Checkpoint files: a JSON header (model config, seed, step, metadata)
followed by named tensor blobs in the package's binary array format.

Checkpoints carry parameters and optimizer moments, so a resumed run
reproduces the uninterrupted one exactly (batch sampling is a pure function
of the step index).
"""

from __future__ import annotations

import dataclasses
import json
import struct

from .memory import MemoryConfig, MemorySourceSpec
from .model import Model, ModelConfig
from .serialize import read_named, write_named
from .training import AdamW

HEADER_MAGIC = b"RLCK"


def config_to_dict(config: ModelConfig) -> dict:
    out = dataclasses.asdict(config)
    return out


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    mem = d.pop("memory", None)
    if mem is not None:
        src = mem.pop("source", None)
        if src is not None:
            mem["source"] = MemorySourceSpec(**src)
        mem["source_layers"] = tuple(mem.get("source_layers") or ())
        if mem.get("target_layers") is not None:
            mem["target_layers"] = tuple(mem["target_layers"])
        mem["injection"] = tuple(mem.get("injection") or ())
        mem = MemoryConfig(**mem)
    return ModelConfig(**d, memory=mem)


def save_checkpoint(path, model: Model, optimizer: AdamW | None = None, step: int = 0,
                    meta: dict | None = None) -> None:
    header = {
        "config": config_to_dict(model.config),
        "seed": model.seed,
        "step": step,
        "meta": meta or {},
        "has_optimizer": optimizer is not None,
    }
    arrays = {f"param.{name}": arr for name, arr in model.state_dict().items()}
    if optimizer is not None:
        arrays.update({f"opt.{name}": arr for name, arr in optimizer.state_dict().items()})
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(HEADER_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        write_named(fh, arrays)


def load_checkpoint(path):
    """Rebuild (model, optimizer_state_or_None, step, meta) from a file."""
    with open(path, "rb") as fh:
        if fh.read(4) != HEADER_MAGIC:
            raise ValueError(f"{path}: not a recurlm checkpoint")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays = read_named(fh)
    model = Model(config_from_dict(header["config"]), seed=header.get("seed", 0))
    model.load_state_dict({k[len("param.") :]: v for k, v in arrays.items() if k.startswith("param.")})
    opt_state = None
    if header.get("has_optimizer"):
        opt_state = {k[len("opt.") :]: v for k, v in arrays.items() if k.startswith("opt.")}
    return model, opt_state, header.get("step", 0), header.get("meta", {})
