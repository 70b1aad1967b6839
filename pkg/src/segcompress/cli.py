"""Command-line entry point: ``segcompress <command> --config C --out D``.

Exit codes: 0 on success, 2 when the produced artifact exceeds the byte
budget, 1 on any error.
"""
import argparse
import logging
import os
import sys
from dataclasses import replace

from .checkpoint import Checkpoint
from .config import ConfigError, PipelineConfig, load_config, with_seed
from .losses import KINDS
from .pipeline import (
    RunDir,
    StageError,
    eval_checkpoint,
    load_splits,
    loss_sweep,
    run_pipeline,
    stage_data,
    stage_train,
)
from .prune import prune_checkpoint, pruned_count, pruned_size_mb
from .quant import ptq_checkpoint

EXIT_OK, EXIT_ERROR, EXIT_BUDGET = 0, 1, 2


def _config(args):
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    return cfg


def _budget_exit(cfg, size_mb):
    if size_mb > cfg.max_mb:
        print(f"budget exceeded: {size_mb:.2f} MB > {cfg.max_mb:.2f} MB", file=sys.stderr)
        return EXIT_BUDGET
    return EXIT_OK


def _val_set(run, cfg):
    _, data_res = stage_data(run, cfg)
    return load_splits(run, data_res)[1]


def _default_checkpoint(run, args):
    return args.checkpoint or run.path("checkpoints", "baseline.csgc")


def _print_eval(label, res, size_mb):
    iou = " ".join("nan" if v != v else f"{v:.3f}" for v in res["iou"])
    print(f"{label}: mIoU {res['miou']:.4f}  size {size_mb:.2f} MB  IoU [{iou}]")


def cmd_gen_data(args, cfg):
    run = RunDir(args.out)
    _, res = stage_data(run, cfg)
    print(run.path(res["train_manifest"]))
    print(run.path(res["val_manifest"]))
    return EXIT_OK


def cmd_train(args, cfg):
    run = RunDir(args.out)
    data_hash, data_res = stage_data(run, cfg)
    _, res = stage_train(run, cfg, data_hash, data_res, lambda: load_splits(run, data_res))
    ckpt = Checkpoint.load(run.path(res["checkpoint"]))
    print(run.path(res["checkpoint"]))
    return _budget_exit(cfg, ckpt.size_mb())


def cmd_eval(args, cfg):
    run = RunDir(args.out)
    ckpt = Checkpoint.load(_default_checkpoint(run, args))
    res = eval_checkpoint(ckpt, _val_set(run, cfg), cfg.include_background)
    _print_eval(os.path.basename(_default_checkpoint(run, args)), res, ckpt.size_mb())
    return _budget_exit(cfg, ckpt.size_mb())


def cmd_prune(args, cfg):
    if cfg.prune is None:
        raise ConfigError("the prune command needs a [prune] section", path=args.config)
    run = RunDir(args.out)
    ckpt = Checkpoint.load(_default_checkpoint(run, args))
    amount = args.amount if args.amount is not None else cfg.prune.amounts[0]
    pruned, masks = prune_checkpoint(ckpt, replace(cfg.prune.spec, amount=amount))
    path = run.path("checkpoints", f"pruned_{amount:g}.csgc")
    os.makedirs(os.path.dirname(path), exist_ok=True)
    pruned.save(path)
    size = pruned_size_mb(ckpt.size_mb(), pruned_count(masks) / ckpt.count_params())
    _print_eval(f"pruned({amount:g})", eval_checkpoint(pruned, _val_set(run, cfg), cfg.include_background), size)
    print(path)
    return _budget_exit(cfg, size)


def cmd_quantize(args, cfg):
    run = RunDir(args.out)
    q = ptq_checkpoint(Checkpoint.load(_default_checkpoint(run, args)), cfg.quant.layer_filter)
    path = run.path("checkpoints", "quantized.csgc")
    os.makedirs(os.path.dirname(path), exist_ok=True)
    q.save(path)
    _print_eval("quantized", eval_checkpoint(q, _val_set(run, cfg), cfg.include_background), q.size_mb())
    print(path)
    return _budget_exit(cfg, q.size_mb())


def cmd_pipeline(args, cfg):
    result = run_pipeline(cfg, args.out)
    with open(result.report_path) as f:
        sys.stdout.write(f.read())
    return EXIT_BUDGET if result.budget_exceeded else EXIT_OK


def cmd_sweep(args, cfg):
    result = loss_sweep(cfg, args.out, losses=args.losses, seeds=args.seeds)
    with open(result.report_path) as f:
        sys.stdout.write(f.read())
    return EXIT_OK


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate and write the synthetic dataset"),
    "train": (cmd_train, "train the baseline model"),
    "eval": (cmd_eval, "evaluate a checkpoint on the validation split"),
    "prune": (cmd_prune, "prune a checkpoint"),
    "quantize": (cmd_quantize, "post-training quantize a checkpoint"),
    "pipeline": (cmd_pipeline, "run every stage and write the report"),
    "sweep": (cmd_sweep, "compare losses over several seeds"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="segcompress", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log stage progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="INI experiment file (defaults apply when omitted)")
        p.add_argument("--out", default="runs/default", help="run directory")
        p.add_argument("--seed", type=int, help="override every seed in the config")
        if name in ("eval", "prune", "quantize"):
            p.add_argument("--checkpoint", help="input checkpoint (default: <out>/checkpoints/baseline.csgc)")
        if name == "prune":
            p.add_argument("--amount", type=float, help="pruning amount (default: first configured amount)")
        if name == "sweep":
            p.add_argument("--losses", nargs="+", choices=KINDS)
            p.add_argument("--seeds", nargs="+", type=int)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command][0](args, cfg)
    except (ConfigError, StageError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
