"""Command-line entry point.

    lipdistill <gen-data|train|ablation|eval|gradcheck|inspect-align>
               [--config FILE] [--key value ...]

Any flat configuration key (see ``lipdistill <cmd> --help`` and config.py)
can be set as ``--section.field value``; a handful of common toggles have
short aliases. Exit codes: 0 success, 1 validation error, 2 runtime
failure. The LIPDISTILL_OUT environment variable sets the default output
root (default ./runs).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .align import build_alignment_map
from .config import ConfigError, RunConfig, build_run_config, flatten_run_config, known_keys
from .gradchecks import run_suite, GRADCHECK_TOL
from .synthdata import generate_dataset, dump_dataset, load_dataset
from .train import (train_teacher, train_student, evaluate_top1, build_model,
                    load_checkpoint, run_kd_ablation)

_ALIASES = {
    "kd1": "distill.kd1",
    "kd2": "distill.kd2",
    "mixup": "distill.mixup",
    "sigma": "distill.sigma",
    "word_isolation": "train.word_isolation",
    "spec_augment": "train.spec_augment",
    "word_boundary": "train.word_boundary",
    "seed": "train.seed",
    "epochs": "train.epochs",
}


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as validation errors (exit 1)."""

    def error(self, message):
        raise ConfigError(message)


def _out_root() -> Path:
    return Path(os.environ.get("LIPDISTILL_OUT", "runs"))


def _add_common(sub):
    sub.add_argument("--config", help="JSON file of flat dotted configuration keys")
    sub.add_argument("--out", help="output directory (default under the output root)")
    sub.add_argument("--data", help="directory holding a materialized dataset dump")
    sub.add_argument("--kd1", action=argparse.BooleanOptionalAction, default=None,
                     help="sequence-level distillation")
    sub.add_argument("--kd2", action=argparse.BooleanOptionalAction, default=None,
                     help="frame-level distillation")
    sub.add_argument("--mixup", action=argparse.BooleanOptionalAction, default=None)
    sub.add_argument("--word-isolation", dest="word_isolation",
                     action=argparse.BooleanOptionalAction, default=None)
    sub.add_argument("--spec-augment", dest="spec_augment",
                     action=argparse.BooleanOptionalAction, default=None)
    sub.add_argument("--word-boundary", dest="word_boundary",
                     action=argparse.BooleanOptionalAction, default=None)
    sub.add_argument("--sigma", type=float, default=None, help="alignment Gaussian std")
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--epochs", type=int, default=None)


def _collect_overrides(args, extras) -> dict:
    overrides = {}
    i = 0
    while i < len(extras):
        token = extras[i]
        if not token.startswith("--"):
            raise ConfigError(f"unexpected argument {token!r}")
        key, eq, value = token[2:].partition("=")
        if not eq:
            if i + 1 >= len(extras):
                raise ConfigError(f"missing value for --{key}")
            value = extras[i + 1]
            i += 2
        else:
            i += 1
        overrides[key] = value
    unknown = set(overrides) - set(known_keys())
    if unknown:
        raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
    for alias, key in _ALIASES.items():
        value = getattr(args, alias, None)
        if value is not None:
            overrides[key] = value
    return overrides


def _run_config(args, extras) -> RunConfig:
    return build_run_config(args.config, _collect_overrides(args, extras))


def _dataset_for(cfg: RunConfig, args):
    if getattr(args, "data", None):
        ds = load_dataset(args.data)
        if ds.cfg != cfg.data:
            raise ConfigError("materialized dataset config does not match the run config; "
                              "regenerate it or align data.* keys")
        return ds
    return generate_dataset(cfg.data)


def _resolve_out(args, cfg: RunConfig, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    if cfg.out_dir:
        return Path(cfg.out_dir)
    return _out_root() / default_name


def cmd_gen_data(args, extras) -> int:
    cfg = _run_config(args, extras)
    out = _resolve_out(args, cfg, "dataset")
    ds = generate_dataset(cfg.data)
    manifest = dump_dataset(ds, out)
    sizes = {split: len(ds[split]) for split in ds.splits}
    print(f"materialized {sizes} samples")
    print(manifest)
    return 0


def cmd_train(args, extras) -> int:
    cfg = _run_config(args, extras)
    if args.role == "student" and not args.teacher:
        raise ConfigError("training a student requires --teacher <checkpoint>")
    ds = _dataset_for(cfg, args)
    out = _resolve_out(args, cfg, args.role)
    if args.role == "teacher":
        result = train_teacher(ds, cfg.model, cfg.train, out_dir=out)
        wi = cfg.train.word_isolation
    else:
        teacher_ckpt = load_checkpoint(args.teacher)
        result = train_student(ds, teacher_ckpt, cfg.model, cfg.train,
                               cfg.distill, out_dir=out)
        wi = False
    model = build_model(result.checkpoint)
    test_top1 = evaluate_top1(model, ds["test"], word_isolation=wi)
    for record in result.metrics:
        print(json.dumps(record, sort_keys=True))
    print(f"best epoch {result.checkpoint.epoch}, test top1 {test_top1:.4f}")
    print(out / f"{args.role}.ckpt")
    return 0


def cmd_ablation(args, extras) -> int:
    cfg = _run_config(args, extras)
    seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    if not seeds:
        raise ConfigError("need at least one seed")
    ds = _dataset_for(cfg, args)
    out = _resolve_out(args, cfg, "ablation")
    summary = run_kd_ablation(ds, cfg.model, cfg.train, cfg.distill, seeds,
                              out_dir=out, log=print)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "runs.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config", "seed", "test_top1"])
        for name, cell in summary["cells"].items():
            for seed, acc in zip(seeds, cell["accs"]):
                writer.writerow([name, seed, f"{acc:.6f}"])
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config", "mean_top1", "std_top1", "n_seeds"])
        for name, cell in summary["cells"].items():
            writer.writerow([name, f"{cell['mean']:.6f}", f"{cell['std']:.6f}", len(seeds)])
    print(f"\nteacher mean test top1: {np.mean(summary['teacher']['accs']):.4f}")
    print(f"{'config':22s} {'mean':>8s} {'std':>8s}")
    for name, cell in summary["cells"].items():
        print(f"{name:22s} {cell['mean']:8.4f} {cell['std']:8.4f}")
    print(out / "summary.csv")
    return 0


def cmd_eval(args, extras) -> int:
    cfg = _run_config(args, extras)
    ckpt = load_checkpoint(args.checkpoint)
    ds = _dataset_for(cfg, args)
    if args.split not in ds.splits:
        raise ConfigError(f"unknown split {args.split!r}")
    model = build_model(ckpt)
    wi = bool(ckpt.flags.get("word_isolation", False)) if ckpt.role == "teacher" else False
    acc = evaluate_top1(model, ds[args.split], word_isolation=wi)
    print(f"{ckpt.role} {args.split} top1 {acc:.4f}")
    return 0


def cmd_gradcheck(args, extras) -> int:
    results = run_suite()
    failed = False
    for name, err, ok in results:
        print(f"{name:28s} max rel err {err:.3e}  {'pass' if ok else 'FAIL'}")
        failed = failed or not ok
    print(f"{len(results)} components, tolerance {GRADCHECK_TOL:g}")
    if failed:
        raise RuntimeError("gradient check failed")
    return 0


def cmd_inspect_align(args, extras) -> int:
    amap = build_alignment_map(args.t_audio, args.n_visual, args.sigma, args.window)
    out = Path(args.out) if args.out else _out_root() / "alignment.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in amap.weights:
            writer.writerow([f"{v:.12g}" for v in row])
    centers_path = out.with_name(out.stem + "_centers.csv")
    with open(centers_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["visual_frame", "audio_center"])
        for j, c in enumerate(amap.centers):
            writer.writerow([j, c])
    sums = amap.weights.sum(axis=1)
    print(f"map {amap.n_visual} x {amap.t_audio}, sigma {amap.sigma}, window {amap.window}")
    print(f"centers: {list(amap.centers)}")
    print(f"row sums: min {sums.min():.12f}, max {sums.max():.12f}")
    print(out)
    return 0


def _build_parser() -> _Parser:
    parser = _Parser(prog="lipdistill",
                     description="cross-modal distillation for word-level lipreading on synthetic data")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="materialize the synthetic dataset")
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = subs.add_parser("train", help="train the audio teacher or the visual student")
    p.add_argument("role", choices=["teacher", "student"])
    p.add_argument("--teacher", help="teacher checkpoint (student training)")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("ablation", help="run the four-cell distillation comparison over seeds")
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated training seeds")
    _add_common(p)
    p.set_defaults(func=cmd_ablation)

    p = subs.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("gradcheck", help="finite-difference check of every layer and loss")
    p.set_defaults(func=cmd_gradcheck)

    p = subs.add_parser("inspect-align", help="dump the audio-to-visual alignment map as CSV")
    p.add_argument("--t-audio", type=int, default=139)
    p.add_argument("--n-visual", type=int, default=29)
    p.add_argument("--sigma", type=float, default=3.0)
    p.add_argument("--window", type=int, default=7)
    p.add_argument("--out", help="output CSV path")
    p.set_defaults(func=cmd_inspect_align)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args, extras = parser.parse_known_args(argv)
        return args.func(args, extras)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
