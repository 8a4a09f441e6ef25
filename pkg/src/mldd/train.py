"""Training, evaluation, prediction and depth-ablation workflows."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import (DatasetIndex, batch_iter, load_index, multiscale_pick, read_ppm, resize_image,
                   resize_mask, snap32, write_pgm)
from .decoder import DecoderConfig
from .config import TrainConfig
from .layers import AdamState, adam_step, load_checkpoint, save_checkpoint
from .losses import binarize, dice, iou, total_loss
from .model import SegModel
from .tensor import Tensor

log = logging.getLogger(__name__)


def decoder_config(cfg: TrainConfig) -> DecoderConfig:
    return DecoderConfig(width=cfg.width, n_layers=cfg.n_layers, channel_act=cfg.channel_act,
                         reduction=cfg.reduction)


def build_model(cfg: TrainConfig) -> SegModel:
    return SegModel(decoder_config(cfg), seed=cfg.seed)


def load_model(cfg: TrainConfig, checkpoint) -> SegModel:
    model = build_model(cfg)
    load_checkpoint(model.reg, checkpoint)
    return model


def epoch_seed(seed: int, epoch: int) -> int:
    return seed * 100_003 + epoch


# ---------------------------------------------------------------- inference

def predict_logits(model: SegModel, image: Tensor) -> np.ndarray:
    """Logits at the image's own extents for a [3,H,W] image of any size."""
    h, w = image.shape[1:]
    th, tw = snap32(h), snap32(w)
    x = resize_image(image, th, tw) if (th, tw) != (h, w) else image
    with T.no_grad():
        logits = model(Tensor(x.data[None])).final_logits
        if (th, tw) != (h, w):
            logits = T.upsample_bilinear(logits, h, w)
    return logits.data[0]


@dataclass
class EvalRow:
    id: str
    dice: float
    iou: float


def evaluate(model: SegModel, index: DatasetIndex) -> list[EvalRow]:
    rows = []
    for sid in index.ids:
        s = index.load(sid)
        logits = predict_logits(model, s.image)
        if logits.shape[1:] != s.mask.shape[1:]:
            with T.no_grad():
                logits = T.upsample_bilinear(Tensor(logits[None]), *s.mask.shape[1:]).data[0]
        pred = binarize(logits)
        rows.append(EvalRow(sid, dice(pred, s.mask), iou(pred, s.mask)))
    return rows


def summarize(rows: Sequence[EvalRow]) -> tuple[float, float]:
    if not rows:
        return float("nan"), float("nan")
    return float(np.mean([r.dice for r in rows])), float(np.mean([r.iou for r in rows]))


def write_metrics(rows: Sequence[EvalRow], path) -> tuple[float, float]:
    md, mi = summarize(rows)
    with open(path, "w", newline="") as fh:
        fh.write("id\tdice\tiou\n")
        for r in rows:
            fh.write(f"{r.id}\t{r.dice!r}\t{r.iou!r}\n")
        fh.write(f"mean\t{md!r}\t{mi!r}\n")
    return md, mi


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    steps: int
    best_epoch: int
    best_mdice: float
    best_miou: float
    losses: list[float] = field(default_factory=list)
    checkpoint: Path | None = None
    runlog: Path | None = None


class RunLog:
    """CSV with one ``step`` row per optimizer step and one ``val`` row per evaluation."""

    def __init__(self, path: Path, n_layers: int):
        self.path = path
        self.fh = open(path, "w", newline="")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        self.layer_cols = [f"loss_L{j}" for j in range(1, n_layers + 1)]
        self.writer.writerow(["kind", "step", "epoch", "height", "width", *self.layer_cols, "total",
                              "mdice", "miou"])
        self.last_step = 0

    def step(self, step: int, epoch: int, h: int, w: int, per_layer: dict[int, float], total: float):
        if step <= self.last_step:
            raise ValueError("runlog steps must increase strictly")
        self.last_step = step
        self.writer.writerow(["step", step, epoch, h, w, *(repr(per_layer[j]) for j in sorted(per_layer)),
                              repr(total), "", ""])

    def val(self, step: int, epoch: int, mdice: float, miou: float):
        self.writer.writerow(["val", step, epoch, "", "", *([""] * len(self.layer_cols)), "",
                              repr(mdice), repr(miou)])

    def close(self):
        self.fh.close()


def _check_dataset(index: DatasetIndex, what: str) -> None:
    if not index.ids:
        raise ValueError(f"{what} split of {index.root} is empty")
    for s in index.samples():
        h, w = s.image.shape[1:]
        if h % 32 or w % 32:
            raise ValueError(f"{s.id}: training extents {h}x{w} are not multiples of 32")


def train(cfg: TrainConfig, on_step: Callable[[int, float], None] | None = None) -> TrainResult:
    """Train from scratch; keeps the checkpoint with the best validation mDice."""
    root = Path(cfg.data_root)
    train_idx = load_index(root, cfg.train_split)
    val_idx = load_index(root, cfg.val_split)
    _check_dataset(train_idx, cfg.train_split)
    if val_idx.ids:
        val_idx.samples()

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = Path(cfg.checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)

    model = build_model(cfg)
    state = AdamState(lr=cfg.lr)
    runlog = RunLog(out_dir / "runlog.csv", cfg.n_layers)
    result = TrainResult(0, -1, -math.inf, -math.inf, checkpoint=ckpt, runlog=runlog.path)
    step = 0
    try:
        for epoch in range(cfg.epochs):
            for batch in batch_iter(train_idx, cfg.batch_size, epoch_seed(cfg.seed, epoch)):
                images, masks = batch.images, batch.masks
                h, w = images.shape[2:]
                if cfg.multiscale:
                    h, w = multiscale_pick(step, *images.shape[2:])
                    images, masks = resize_image(images, h, w), resize_mask(masks, h, w)
                rep = total_loss(model(images), masks)
                rep.total.backward()
                adam_step(model.reg, state)
                step += 1
                total = rep.total_value
                if not math.isfinite(total):
                    raise FloatingPointError(f"non-finite loss at step {step}")
                result.losses.append(total)
                runlog.step(step, epoch, h, w, rep.values, total)
                if on_step:
                    on_step(step, total)
                if cfg.max_steps and step >= cfg.max_steps:
                    break
            _end_epoch(model, val_idx, cfg, runlog, result, step, epoch, ckpt)
            if cfg.max_steps and step >= cfg.max_steps:
                break
    finally:
        runlog.close()
    result.steps = step
    return result


def _end_epoch(model, val_idx, cfg, runlog, result, step, epoch, ckpt) -> None:
    if not val_idx.ids:
        save_checkpoint(model.reg, ckpt)
        result.best_epoch = epoch
        return
    md, mi = summarize(evaluate(model, val_idx))
    runlog.val(step, epoch, md, mi)
    log.info("epoch %d step %d val mDice %.4f mIoU %.4f", epoch, step, md, mi)
    if md > result.best_mdice:  # ties keep the earlier epoch
        result.best_mdice, result.best_miou, result.best_epoch = md, mi, epoch
        save_checkpoint(model.reg, ckpt)


# ---------------------------------------------------------------- predict

def predict_file(cfg: TrainConfig, checkpoint, image_path, out_path) -> np.ndarray:
    model = load_model(cfg, checkpoint)
    image = read_ppm(image_path)
    mask = binarize(predict_logits(model, image))
    write_pgm(mask, out_path)
    return mask.data


# ---------------------------------------------------------------- ablation

@dataclass
class AblationRow:
    depth: int
    mdice: list[float]
    miou: list[float]

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.mdice))

    @property
    def mean_iou(self) -> float:
        return float(np.mean(self.miou))


def ablate(cfg: TrainConfig, layers: Sequence[int], seeds: Sequence[int] | None = None,
           out_dir=None) -> list[AblationRow]:
    """Train one model per (depth, seed) on identical data; report best val metrics per seed."""
    for d in layers:
        if d not in (1, 2, 3):
            raise ValueError(f"ablation depths must come from {{1, 2, 3}}, got {d}")
    seeds = list(seeds) if seeds is not None else [cfg.seed, cfg.seed + 1, cfg.seed + 2]
    base = Path(out_dir or cfg.out_dir)
    rows = []
    for d in layers:
        row = AblationRow(d, [], [])
        for s in seeds:
            run_dir = base / f"L{d}_s{s}"
            run_cfg = dataclasses.replace(cfg, n_layers=d, seed=s, out_dir=str(run_dir),
                                          checkpoint=str(run_dir / "model.mldd1"))
            res = train(run_cfg)
            row.mdice.append(res.best_mdice)
            row.miou.append(res.best_miou)
            log.info("depth %d seed %d best val mDice %.4f", d, s, res.best_mdice)
        rows.append(row)
    return rows


def write_ablation(rows: Sequence[AblationRow], path) -> None:
    n = max(len(r.mdice) for r in rows)
    head = ["depth", "mdice", "miou"] + [f"mdice_s{k}" for k in range(n)] + [f"miou_s{k}" for k in range(n)]
    with open(path, "w") as fh:
        fh.write("\t".join(head) + "\n")
        for r in rows:
            vals = [str(r.depth), f"{r.mean_dice:.6f}", f"{r.mean_iou:.6f}"]
            vals += [f"{v:.6f}" for v in r.mdice] + [f"{v:.6f}" for v in r.miou]
            fh.write("\t".join(vals) + "\n")
