"""Command-line front end: train, eval, explain, profile, param-count.

All randomness funnels through --seed, outputs land under --out, and no
output file carries a timestamp, so identical invocations produce
byte-identical artifacts. Exit codes: 0 success, 1 usage error, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import data as data_mod
from . import explain as explain_mod
from . import model as model_mod
from . import profiler as profiler_mod
from . import train as train_mod

__all__ = ["main", "run"]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems become exit code 1, not 2
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="paca", description="Patch-to-cluster attention models, desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=str, default="out")
        p.add_argument("--config", type=str, default=None, help="key=value file; flags override it")

    def model_flags(p):
        p.add_argument("--model", choices=["b0", "b1", "b2", "tiny-debug"], default="tiny-debug",
                       help="tiny-debug is an in-repo toy config for fast runs, not a published one")
        p.add_argument("--geometry", choices=["in1k", "c100"], default="in1k")
        p.add_argument("--classes", type=int, default=None)

    p = sub.add_parser("param-count", help="print the trainable parameter count")
    model_flags(p)
    common(p)

    p = sub.add_parser("profile", help="FLOP scaling table and fitted exponent")
    p.add_argument("--mechanism", choices=list(profiler_mod.MECHANISMS), required=True)
    p.add_argument("--n", type=str, default="256,1024,4096", help="comma-separated sequence lengths")
    p.add_argument("--c", type=int, default=64)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--m", type=int, default=49, help="clusters (paca) or patch size (nested)")
    p.add_argument("--reduction", type=int, default=4)
    p.add_argument("--instrumented", action="store_true", help="run the real ops under the meter")
    common(p)

    for name in ("train", "eval", "explain"):
        p = sub.add_parser(name)
        model_flags(p)
        p.add_argument("--dataset", choices=["synth", "cifar10", "cifar100"], default="synth")
        p.add_argument("--data-dir", type=str, default=None, help="directory with CIFAR binary files")
        p.add_argument("--synth-n", type=int, default=512)
        if name == "train":
            p.add_argument("--steps", type=int, default=200)
            p.add_argument("--batch-size", type=int, default=32)
            p.add_argument("--lr", type=float, default=5e-4)
            p.add_argument("--weight-decay", type=float, default=0.05)
            p.add_argument("--warmup-steps", type=int, default=None)
            p.add_argument("--grad-clip", type=float, default=5.0)
            p.add_argument("--eval-every", type=int, default=0)
            p.add_argument("--augment", action="store_true")
            p.add_argument("--quiet", action="store_true")
        else:
            p.add_argument("--checkpoint", type=str, required=True)
            p.add_argument("--batch-size", type=int, default=64)
        if name == "explain":
            p.add_argument("--index", type=int, default=0, help="dataset image to explain")
            p.add_argument("--layer", type=int, default=None)
            p.add_argument("--top-k", type=int, default=6)
            p.add_argument("--source", choices=["clusters", "attention"], default="clusters")
        common(p)

    return parser


def _apply_config_file(parser: _Parser, args: argparse.Namespace, argv: list[str]) -> argparse.Namespace:
    """Load key=value defaults from --config, then reparse so flags win."""
    if not getattr(args, "config", None):
        return args
    values: dict[str, object] = {}
    with open(args.config, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise _UsageError(f"{args.config}:{line_no}: expected key=value")
            key, raw = (s.strip() for s in line.split("=", 1))
            values[key.replace("-", "_")] = raw
    sub_actions = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    subparser = sub_actions.choices[args.command]
    typed: dict[str, object] = {}
    for action in subparser._actions:
        if action.dest in values:
            raw = values.pop(action.dest)
            if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                typed[action.dest] = str(raw).lower() in ("1", "true", "yes")
            else:
                typed[action.dest] = action.type(raw) if action.type else raw
    if values:
        raise _UsageError(f"unknown config keys: {', '.join(sorted(values))}")
    subparser.set_defaults(**typed)
    return parser.parse_args(argv)


def _model_config(args) -> model_mod.ModelConfig:
    return model_mod.preset(args.model, flavor=args.geometry, classes=args.classes)


def _load_dataset(args, cfg: model_mod.ModelConfig, split: str) -> data_mod.Dataset:
    if args.dataset == "synth":
        seed = args.seed if split == "train" else args.seed + 1
        n = args.synth_n if split == "train" else max(64, args.synth_n // 4)
        return data_mod.synth_dataset(seed, n, cfg.classes, geometry=cfg.input_size)
    variant = "c10" if args.dataset == "cifar10" else "c100"
    if not args.data_dir:
        raise ValueError(f"--data-dir is required for {args.dataset}")
    ds = data_mod.load_cifar(args.data_dir, variant, split)
    if ds.geometry() != cfg.input_size:
        raise ValueError(f"dataset geometry {ds.geometry()} does not match model input {cfg.input_size}")
    return ds


def _cmd_param_count(args) -> int:
    cfg = _model_config(args)
    m = model_mod.build_model(cfg, seed=args.seed)
    print(model_mod.param_count(m))
    return 0


def _cmd_profile(args) -> int:
    ns = [int(s) for s in args.n.split(",") if s]
    report = profiler_mod.scaling_report(
        args.mechanism, args.c, args.heads, args.m, ns, reduction=args.reduction, instrumented=args.instrumented
    )
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"profile_{args.mechanism}.csv")
    profiler_mod.write_scaling_csv(report, path)
    print(f"{args.mechanism}: fitted exponent {report.slope:.4f} over N={ns} -> {path}")
    return 0


def _cmd_train(args) -> int:
    cfg = _model_config(args)
    train_ds = _load_dataset(args, cfg, "train")
    eval_ds = _load_dataset(args, cfg, "test") if args.eval_every else None
    m = model_mod.build_model(cfg, seed=args.seed)
    tc = train_mod.TrainConfig(
        steps=args.steps,
        lr=args.lr,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        warmup_steps=args.warmup_steps,
        seed=args.seed,
        grad_clip=args.grad_clip,
        eval_every=args.eval_every,
        augment=args.augment,
    )
    os.makedirs(args.out, exist_ok=True)
    rows = train_mod.train_loop(m, train_ds, tc, eval_ds=eval_ds, out_dir=args.out, verbose=not args.quiet)
    top1 = train_mod.evaluate(m, train_ds, args.batch_size)
    print(f"final loss {rows[-1][2]:.4f}  train top-1 {top1:.4f}  artifacts in {args.out}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _model_config(args)
    m = model_mod.load_checkpoint(args.checkpoint, cfg)
    ds = _load_dataset(args, cfg, "test")
    top1 = train_mod.evaluate(m, ds, args.batch_size)
    print(f"top-1 {top1:.4f} on {len(ds)} samples")
    return 0


def _cmd_explain(args) -> int:
    cfg = _model_config(args)
    m = model_mod.load_checkpoint(args.checkpoint, cfg)
    ds = _load_dataset(args, cfg, "test")
    if not 0 <= args.index < len(ds):
        raise ValueError(f"--index {args.index} out of range for {len(ds)} samples")
    image = explain_mod.unit_image(ds.images[args.index])
    label = int(ds.labels[args.index])
    report = explain_mod.cluster_importance(m, image, label, layer=args.layer, source=args.source)
    heatmaps = explain_mod.extract_heatmaps(m, image, layer=report.layer, source=args.source)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "importance.csv"), "w", encoding="utf-8") as f:
        f.write("cluster,importance,entropy,rank\n")
        for c in range(len(report.importance)):
            f.write(f"{c},{report.importance[c]:.8g},{report.entropy[c]:.8g},{report.rank[c]}\n")
    for pos, c in enumerate(report.order[: args.top_k]):
        explain_mod.export_heatmap(heatmaps[c], os.path.join(args.out, f"top{pos}_cluster{c}.pgm"), "gray")
        explain_mod.export_heatmap(
            heatmaps[c], os.path.join(args.out, f"top{pos}_cluster{c}.ppm"), "overlay", image01=image
        )
    flag = "" if report.correct_prediction else "  (warning: model misclassifies this image)"
    print(f"layer {report.layer}: order {report.order[: args.top_k]}{flag}  artifacts in {args.out}")
    return 0


_COMMANDS = {
    "param-count": _cmd_param_count,
    "profile": _cmd_profile,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "explain": _cmd_explain,
}


def run(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config_file(parser, args, argv)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except Exception as e:  # runtime failures get a distinct exit code
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
