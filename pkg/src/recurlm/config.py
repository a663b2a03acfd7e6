"""Run configuration: flat dotted-key text files plus --set overrides.

A config file holds one ``key = value`` assignment per line (``#`` comments),
keys are dotted paths into a fixed schema, and unknown keys are an error —
typos never pass silently. The same parser handles command-line overrides,
so ``--set train.lr=1e-3`` and a config line are interchangeable.
"""

from __future__ import annotations

from dataclasses import dataclass

from .data import load_corpus
from .memory import MemoryConfig, MemorySourceSpec
from .model import ModelConfig
from .training import TrainPlan


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_int_list(text: str) -> tuple:
    t = text.strip()
    if not t or t.lower() in ("none", "default"):
        return ()
    if t.lower() == "all":
        return ("all",)
    return tuple(int(v) for v in t.replace(",", " ").split())


def _parse_str_list(text: str) -> tuple:
    t = text.strip()
    if not t or t.lower() == "none":
        return ()
    return tuple(v.strip() for v in t.split(",") if v.strip())


def _parse_str(text: str) -> str:
    return text.strip().strip("\"'")


# key -> (default, parser)
SCHEMA = {
    "model.n_layers": (4, int),
    "model.d_model": (128, int),
    "model.n_heads": (4, int),
    "model.n_kv_heads": (0, int),
    "model.d_head": (0, int),
    "model.vocab_size": (256, int),
    "model.seq_len": (128, int),
    "model.window_pattern": ("SSSL", _parse_str),
    "model.window_size": (0, int),
    "model.softcap": (15.0, float),
    "model.rope_base": (10000.0, float),
    "model.value_embeddings": (False, _parse_bool),
    "model.dtype": ("float64", _parse_str),
    "model.seed": (0, int),
    "memory.enabled": (True, _parse_bool),
    "memory.source_layers": ((), _parse_int_list),
    "memory.projection_sharing": ("shared", _parse_str),
    "memory.injection": (("kv_projection", "residual_injection"), _parse_str_list),
    "memory.kv_mode": ("additive", _parse_str),
    "memory.kv_parts": ("keys_and_values", _parse_str),
    "memory.target_layers": (("all",), _parse_int_list),
    "memory.gamma_init": (0.1, float),
    "memory.source.kind": ("previous", _parse_str),
    "memory.source.lag": (1, int),
    "memory.source.window": (4, int),
    "train.strategy": ("interleaved", _parse_str),
    "train.steps": (50, int),
    "train.ratio": (0.0, float),
    "train.n_subsets": (2, int),
    "train.chunk_size": (64, int),
    "train.batch_size": (8, int),
    "train.lr": (3e-4, float),
    "train.weight_decay": (0.1, float),
    "train.seed": (0, int),
    "train.checkpoint_every": (0, int),
    "train.val_every": (0, int),
    "train.val_batches": (8, int),
    "train.val_seed": (99, int),
    "train.val_mode": ("sequential", _parse_str),
    "train.isolated_refinement": (False, _parse_bool),
    "data.kind": ("counter", _parse_str),
    "data.path": ("", _parse_str),
    "data.n_bytes": (1 << 18, int),
    "data.seed": (1234, int),
    "data.val_fraction": (0.1, float),
    "data.base": (8, int),
    "data.min_len": (2, int),
    "data.max_len": (8, int),
    "data.weighted": (False, _parse_bool),
    "run.out_dir": ("runs/run", _parse_str),
}


@dataclass
class RunConfig:
    """A resolved flat mapping of every schema key to a typed value."""

    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def set(self, key: str, raw: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        _, parser = SCHEMA[key]
        try:
            self.values[key] = parser(raw)
        except ConfigError:
            raise
        except Exception as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc

    # -- typed builders ------------------------------------------------------

    def model_config(self) -> ModelConfig:
        v = self.values
        memory = None
        if v["memory.enabled"]:
            targets = v["memory.target_layers"]
            targets = None if targets == ("all",) else targets
            memory = MemoryConfig(
                source_layers=v["memory.source_layers"],
                projection_sharing=v["memory.projection_sharing"],
                injection=v["memory.injection"],
                kv_mode=v["memory.kv_mode"],
                kv_parts=v["memory.kv_parts"],
                target_layers=targets,
                gamma_init=v["memory.gamma_init"],
                source=MemorySourceSpec(
                    kind=v["memory.source.kind"],
                    lag=v["memory.source.lag"],
                    window=v["memory.source.window"],
                ),
            )
        try:
            return ModelConfig(
                n_layers=v["model.n_layers"],
                d_model=v["model.d_model"],
                n_heads=v["model.n_heads"],
                n_kv_heads=v["model.n_kv_heads"],
                d_head=v["model.d_head"],
                vocab_size=v["model.vocab_size"],
                seq_len=v["model.seq_len"],
                window_pattern=v["model.window_pattern"],
                window_size=v["model.window_size"],
                softcap=v["model.softcap"],
                rope_base=v["model.rope_base"],
                value_embeddings=v["model.value_embeddings"],
                dtype=v["model.dtype"],
                memory=memory,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_plan(self, n_params: int | None = None) -> TrainPlan:
        v = self.values
        steps = v["train.steps"]
        if v["train.ratio"] > 0:
            if n_params is None:
                raise ConfigError("train.ratio needs the parameter count to derive steps")
            tokens_per_step = v["train.batch_size"] * v["model.seq_len"]
            steps = TrainPlan.steps_for_ratio(v["train.ratio"], n_params, tokens_per_step)
        return TrainPlan(
            steps=steps,
            batch_size=v["train.batch_size"],
            lr=v["train.lr"],
            seed=v["train.seed"],
            weight_decay=v["train.weight_decay"],
            ratio=v["train.ratio"] or None,
            checkpoint_every=v["train.checkpoint_every"],
        )

    def corpus(self):
        v = self.values
        kw = {}
        if v["data.kind"] in ("counter", "group_sum"):
            kw = {"base": v["data.base"], "min_len": v["data.min_len"],
                  "max_len": v["data.max_len"], "weighted": v["data.weighted"]}
        return load_corpus(v["data.kind"], path=v["data.path"], n_bytes=v["data.n_bytes"],
                           seed=v["data.seed"], val_fraction=v["data.val_fraction"], **kw)


def default_config() -> RunConfig:
    return RunConfig({key: default for key, (default, _) in SCHEMA.items()})


def load_config(path: str | None = None, overrides=()) -> RunConfig:
    """Defaults, then the config file, then --set overrides, in that order."""
    cfg = default_config()
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
                key, _, value = line.partition("=")
                try:
                    cfg.set(key.strip(), value.strip())
                except ConfigError as exc:
                    raise ConfigError(f"{path}:{lineno}: {exc}") from exc
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        cfg.set(key.strip(), value.strip())
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """Render a config as reloadable `key = value` lines."""
    lines = []
    for key in SCHEMA:
        val = cfg.values[key]
        if isinstance(val, tuple):
            val = ",".join(str(v) for v in val)
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"
