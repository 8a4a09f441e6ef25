"""``mldd`` command line: synth | train | eval | predict | gradcheck | ablate.

Exit codes: 0 success, 1 verification failure, 2 usage/config/input error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import config as C
from .data import SynthConfig, load_index, synth_generate
from .train import ablate, evaluate, load_model, predict_file, train, write_ablation, write_metrics
from .verify import TOLERANCE, run_gradcheck

EXIT_OK, EXIT_VERIFY, EXIT_USAGE = 0, 1, 2


def _layers(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--layers expects e.g. 1,2,3, got {text!r}")
    if not vals or any(v not in (1, 2, 3) for v in vals):
        raise argparse.ArgumentTypeError("--layers values must come from {1,2,3}")
    return vals


def _train_cfg(args, **extra) -> C.TrainConfig:
    overrides = dict(seed=args.seed, checkpoint=getattr(args, "checkpoint", None))
    if getattr(args, "data", None):
        overrides["data_root"] = args.data
    overrides.update(extra)
    return C.load(C.TrainConfig, args.config, **overrides)


def cmd_synth(args) -> int:
    cfg = C.load(SynthConfig, args.config, seed=args.seed)
    out = Path(args.out or "data")
    idx = synth_generate(cfg, out)
    n_train = len(load_index(out, "train"))
    n_val = len(load_index(out, "val"))
    print(f"wrote {len(idx)} samples to {out} ({n_train} train, {n_val} val, {cfg.height}x{cfg.width})")
    return EXIT_OK


def cmd_train(args) -> int:
    extra = {}
    if args.layers:
        if len(args.layers) != 1:
            raise ValueError("train takes a single depth, e.g. --layers 2")
        extra["n_layers"] = args.layers[0]
    if args.out:
        extra["out_dir"] = args.out
    cfg = _train_cfg(args, **extra)
    t0 = time.perf_counter()
    res = train(cfg)
    print(f"trained {res.steps} steps in {time.perf_counter() - t0:.1f}s; best epoch {res.best_epoch} "
          f"val mDice {res.best_mdice:.4f} mIoU {res.best_miou:.4f}")
    print(f"checkpoint: {res.checkpoint}\nrunlog: {res.runlog}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _train_cfg(args)
    model = load_model(cfg, cfg.checkpoint)
    index = load_index(cfg.data_root, args.split)
    if not index.ids:
        raise ValueError(f"split {args.split!r} of {cfg.data_root} is empty")
    rows = evaluate(model, index)
    out = Path(args.out or "metrics.tsv")
    md, mi = write_metrics(rows, out)
    print(f"{'id':<14}{'dice':>8}{'iou':>8}")
    for r in rows:
        print(f"{r.id:<14}{r.dice:8.4f}{r.iou:8.4f}")
    print(f"{'mean':<14}{md:8.4f}{mi:8.4f}\nmDice {md:.4f}  mIoU {mi:.4f}  -> {out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _train_cfg(args)
    out = Path(args.out or Path(args.image).with_suffix(".pgm"))
    mask = predict_file(cfg, cfg.checkpoint, args.image, out)
    print(f"wrote {out} ({mask.shape[-2]}x{mask.shape[-1]}, {int(mask.sum())} foreground pixels)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    results = run_gradcheck(args.seed or 0, report=print)
    failed = [n for n, e in results.items() if not e < TOLERANCE]
    print(f"{len(results)} checks in {time.perf_counter() - t0:.1f}s, tolerance {TOLERANCE:g}")
    if failed:
        print("FAILED: " + ", ".join(failed))
        return EXIT_VERIFY
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _train_cfg(args)
    out = Path(args.out or cfg.out_dir)
    rows = ablate(cfg, args.layers or [1, 2, 3], out_dir=out)
    out.mkdir(parents=True, exist_ok=True)
    write_ablation(rows, out / "ablation.tsv")
    print(f"{'depth':>5}{'mDice':>9}{'mIoU':>9}   per-seed mDice")
    for r in rows:
        print(f"{r.depth:>5}{r.mean_dice:9.4f}{r.mean_iou:9.4f}   " + " ".join(f"{v:.4f}" for v in r.mdice))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "gradcheck": cmd_gradcheck, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mldd", description="Multi-layer dense attention decoder toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="key = value config file")
        s.add_argument("--seed", type=int)
        s.add_argument("--out")
        if name in ("train", "ablate"):
            s.add_argument("--layers", type=_layers)
        if name in ("train", "eval", "predict"):
            s.add_argument("--checkpoint")
        if name in ("train", "eval", "ablate"):
            s.add_argument("--data", help="dataset root (overrides data_root)")
        if name == "eval":
            s.add_argument("--split", default="val")
        if name == "predict":
            s.add_argument("image", help="P6 image to segment")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (C.ConfigError, ValueError, OSError) as exc:
        print(f"mldd {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
