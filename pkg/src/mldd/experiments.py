"""The two training experiments used for acceptance: 8-image overfit and decoder-depth ablation."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .data import SynthConfig, load_index, synth_generate
from .train import AblationRow, ablate, evaluate, load_model, summarize, train, write_ablation


@dataclass
class OverfitResult:
    mdice: float
    miou: float
    losses: list[float]
    seconds: float

    def moving_average(self, window: int = 50) -> np.ndarray:
        return np.convolve(self.losses, np.ones(window) / window, mode="valid")


def overfit(workdir, steps: int = 300, lr: float = 1e-4, n_images: int = 8, seed: int = 0,
            **train_overrides) -> OverfitResult:
    """Train on ``n_images`` 64x64 samples for ``steps`` steps, then score the same images."""
    work = Path(workdir)
    data = work / "data"
    synth_generate(SynthConfig(n_images=n_images, val_fraction=0.0, seed=seed), data)
    cfg = TrainConfig(lr=lr, max_steps=steps, epochs=10**6, seed=seed, data_root=str(data),
                      out_dir=str(work / "run"), checkpoint=str(work / "run" / "model.mldd1"),
                      multiscale=False, **train_overrides)
    t0 = time.perf_counter()
    res = train(cfg)
    md, mi = summarize(evaluate(load_model(cfg, cfg.checkpoint), load_index(data, "train")))
    return OverfitResult(md, mi, res.losses, time.perf_counter() - t0)


@dataclass
class AblationResult:
    rows: list[AblationRow]
    seconds: float

    def mean_dice(self, depth: int) -> float:
        return next(r.mean_dice for r in self.rows if r.depth == depth)


def depth_ablation(workdir, layers=(1, 2, 3), seeds=(0, 1, 2), n_images: int = 200, data_seed: int = 0,
                   **train_overrides) -> AblationResult:
    """One model per (depth, seed) on one shared 160/40 synthetic split."""
    work = Path(workdir)
    data = work / "data"
    synth_generate(SynthConfig(n_images=n_images, val_fraction=0.2, seed=data_seed), data)
    cfg = dataclasses.replace(TrainConfig(data_root=str(data), out_dir=str(work)), **train_overrides)
    t0 = time.perf_counter()
    rows = ablate(cfg, list(layers), seeds=list(seeds), out_dir=work)
    write_ablation(rows, work / "ablation.tsv")
    return AblationResult(rows, time.perf_counter() - t0)
