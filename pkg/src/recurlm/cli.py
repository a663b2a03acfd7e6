"""Operator surface: train, eval, ablate, oracle-check, generate.

Every command takes `--config PATH` (flat dotted-key text), repeatable
`--set key=value` overrides, `--seed N` (overrides model and training
seeds) and `--out DIR`. Exit codes: 0 success, 1 usage/config error,
2 oracle failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .ablate import PRESETS, preset_table, sweep
from .checkpoint import config_to_dict, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, dump_config, load_config
from .data import detokenize
from .decoding import generate
from .metrics import bpb, effective_compute, param_overhead, validation_record
from .model import Model
from .oracles import run_all
from .training import AdamW, train_run


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p):
    p.add_argument("--config", default=None, help="config file of dotted key = value lines")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, default=None, help="override model and training seeds")
    p.add_argument("--out", default=None, help="output directory")


def _build_parser() -> _Parser:
    parser = _Parser(prog="recurlm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model to the configured budget")
    _add_common(p)
    p.add_argument("--resume", default=None, help="checkpoint file to resume from")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the configured validation split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", default=None, help="validation mode (parallel/refined/sequential/chunked)")

    p = sub.add_parser("generate", help="sample bytes from a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", default=" ", help="prompt text")
    p.add_argument("--tokens", type=int, default=64, help="number of bytes to generate")
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--log-tokens", action="store_true",
                   help="log (token id, top-1 logit, memory norm) per token to stderr")

    p = sub.add_parser("ablate", help="train and tabulate config variants")
    _add_common(p)
    p.add_argument("--table", default=None, choices=PRESETS, help="preset table to reproduce")
    p.add_argument("--sweep", default=None, metavar="KEY=V1,V2,...",
                   help="generic sweep over one dotted config key")

    p = sub.add_parser("oracle-check", help="run the cross-module oracle suite")
    _add_common(p)
    return parser


def _config_from_args(args) -> RunConfig:
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg.set("model.seed", str(args.seed))
        cfg.set("train.seed", str(args.seed))
    if args.out is not None:
        cfg.set("run.out_dir", args.out)
    return cfg


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    v = cfg.values
    model_cfg = cfg.model_config()
    out_dir = v["run.out_dir"]
    os.makedirs(out_dir, exist_ok=True)

    start_step = 0
    if args.resume:
        model, opt_state, start_step, _meta = load_checkpoint(args.resume)
        if config_to_dict(model.config) != config_to_dict(model_cfg):
            raise ConfigError("checkpoint model config differs from the requested config")
    else:
        model = Model(model_cfg, seed=v["model.seed"])
    plan = cfg.train_plan(model.parameter_count())
    optimizer = AdamW(model, lr=plan.lr, betas=plan.betas, eps=plan.eps,
                      weight_decay=plan.weight_decay)
    if args.resume and opt_state is not None:
        optimizer.load_state_dict(opt_state)
    corpus = cfg.corpus()

    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))
    log_path = os.path.join(out_dir, "train.log")
    log_fh = open(log_path, "a", encoding="utf-8")

    def log(line):
        print(line)
        log_fh.write(line + "\n")
        log_fh.flush()

    def batch_fn(step):
        return corpus.batch("train", model_cfg.seq_len, plan.batch_size, plan.seed, step)

    tokens_per_step = plan.batch_size * model_cfg.seq_len

    def checkpoint_fn(step):
        meta = {
            "strategy": v["train.strategy"],
            "tokens_seen": step * tokens_per_step,
            "ratio": step * tokens_per_step / model.parameter_count(),
        }
        path = os.path.join(out_dir, f"ckpt_{step:06d}.bin")
        save_checkpoint(path, model, optimizer, step=step, meta=meta)
        save_checkpoint(os.path.join(out_dir, "ckpt_last.bin"), model, optimizer, step=step, meta=meta)
        log(f"checkpoint step={step} -> {path}")

    val_every = v["train.val_every"]
    history = []
    step_cursor = start_step
    while step_cursor < plan.steps:
        stop = min(plan.steps, step_cursor + val_every) if val_every else plan.steps
        part = train_run(model, optimizer, plan, batch_fn, strategy=v["train.strategy"],
                         n_subsets=v["train.n_subsets"], chunk_size=v["train.chunk_size"],
                         log=log, checkpoint_fn=checkpoint_fn, start_step=step_cursor, end_step=stop)
        history.extend(part)
        step_cursor = stop
        if val_every and step_cursor < plan.steps:
            record = validation_record(model, corpus, model_cfg.seq_len, plan.batch_size,
                                       v["train.val_batches"], v["train.val_seed"],
                                       v["train.val_mode"], v["train.chunk_size"])
            log(f"val step={step_cursor} ce={record.mean_nats:.6f} bpb={bpb(record):.6f}")
    record = validation_record(model, corpus, model_cfg.seq_len, plan.batch_size,
                               v["train.val_batches"], v["train.val_seed"], v["train.val_mode"],
                               v["train.chunk_size"])
    log(f"final val ce={record.mean_nats:.6f} bpb={bpb(record):.6f}")
    log_fh.close()
    return 0


def cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    v = cfg.values
    model, _opt, step, meta = load_checkpoint(args.checkpoint)
    corpus = cfg.corpus()
    mode = args.mode or v["train.val_mode"]
    record = validation_record(model, corpus, model.config.seq_len, v["train.batch_size"],
                               v["train.val_batches"], v["train.val_seed"], mode,
                               v["train.chunk_size"])
    overhead = param_overhead(model.config).fraction if model.config.memory is not None else 0.0
    strategy = meta.get("strategy", v["train.strategy"])
    ratio = meta.get("ratio", 0.0)
    row = (f"model={args.checkpoint} step={step} tokens_seen={meta.get('tokens_seen', 0)} "
           f"ratio={ratio:.4f} effective_compute={effective_compute(strategy, ratio):.4f} "
           f"val_ce={record.mean_nats:.6f} bpb={bpb(record):.6f} param_overhead={overhead:.6f} "
           f"mode={mode}")
    print(row)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "eval.txt"), "a", encoding="utf-8") as fh:
            fh.write(row + "\n")
    return 0


def cmd_generate(args) -> int:
    model, _opt, _step, _meta = load_checkpoint(args.checkpoint)
    prompt = np.frombuffer(args.prompt.encode("utf-8"), dtype=np.uint8).astype(np.int64)
    if prompt.size == 0:
        raise UsageError("prompt must be at least one byte")
    trace = [] if args.log_tokens else None
    ids = generate(model, prompt, args.tokens, temperature=args.temperature,
                   seed=args.seed or 0, max_len=prompt.size + args.tokens, trace=trace)
    sys.stdout.buffer.write(detokenize(ids[prompt.size:]))
    sys.stdout.buffer.write(b"\n")
    sys.stdout.flush()
    if trace:
        for tok, top, mem_norm in trace:
            print(f"token={tok} top_logit={top:.4f} memory_norm={mem_norm:.4f}", file=sys.stderr)
    return 0


def cmd_ablate(args) -> int:
    cfg = _config_from_args(args)
    if bool(args.table) == bool(args.sweep):
        raise UsageError("ablate needs exactly one of --table or --sweep")
    log = lambda line: print(line, file=sys.stderr)
    if args.table:
        table = preset_table(cfg, args.table, log=log)
    else:
        key, _, values = args.sweep.partition("=")
        if not values:
            raise UsageError("--sweep expects KEY=V1,V2,...")
        table = sweep(cfg, key.strip(), [v.strip() for v in values.split(",")], log=log)
    print(table.to_text())
    out_dir = args.out or cfg.values["run.out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    name = table.name.replace(" ", "_").replace("=", "-")
    with open(os.path.join(out_dir, f"ablation_{name}.csv"), "w", encoding="utf-8") as fh:
        fh.write(table.to_csv())
    return 0


def cmd_oracle_check(args) -> int:
    results = run_all()
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 2


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "generate": cmd_generate,
    "ablate": cmd_ablate,
    "oracle-check": cmd_oracle_check,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
