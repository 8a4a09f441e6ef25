"""Acceptance suite: one test per primary criterion, each printing a PASS/FAIL line.

The lines are collected in ``RESULTS`` and echoed in the pytest terminal summary (see conftest.py).
Run directly with ``python tests/test_acceptance.py`` to print them without pytest.
The two training experiments take about 30 s and 30 min respectively.
"""

from __future__ import annotations

import math
import time

import numpy as np
import pytest

from mldd import tensor as T
from mldd.cli import main
from mldd.decoder import DecoderConfig, cam, dense_attention_gate
from mldd.experiments import depth_ablation, overfit
from mldd.layers import ParamRegistry
from mldd.losses import dice, iou, total_loss, weight_map, weighted_bce
from mldd.model import SegModel
from mldd.tensor import Tensor
from mldd.verify import TOLERANCE, run_gradcheck

RESULTS: list[str] = []

# ablation training profile (see README): lr is raised from the 1e-4 default so that
# every depth learns a non-trivial mask within 50 epochs and the comparison is informative
ABLATION_EPOCHS = 50
ABLATION_LR = 1e-3


def record(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------- gradient suite

def test_gradient_suite():
    t0 = time.perf_counter()
    errs = run_gradcheck(seed=0)
    secs = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    required = {"conv2d", "upsample_bilinear", "relu", "sigmoid", "softmax_channels", "global_pool_max",
                "global_pool_avg", "channel_reduce_max", "channel_reduce_mean", "avg_pool2d",
                "concat_channels", "broadcast_mul", "weighted_bce", "weighted_iou", "decode_block"}
    ok = required <= set(errs) and all(e < TOLERANCE for e in errs.values()) and secs < 60
    record("gradient suite", ok,
           f"{len(errs)} checks, worst {worst} {errs[worst]:.2e} (< {TOLERANCE:g}), {secs:.1f}s (< 60s)")


# ---------------------------------------------------------------- metric oracle

def _brute_counts(p, g):
    tp = fp = fn = 0
    for a, b in zip(p.ravel().tolist(), g.ravel().tolist()):
        if a and b:
            tp += 1
        elif a:
            fp += 1
        elif b:
            fn += 1
    return tp, fp, fn


def test_metric_oracle():
    rng = np.random.default_rng(2024)
    worst_d = worst_i = worst_id = 0.0
    for k in range(1000):
        # vary density so sparse, dense and empty masks all occur
        p = (rng.random((16, 16)) < rng.choice([0.0, 0.02, 0.3, 0.7])).astype(float)
        g = (rng.random((16, 16)) < rng.choice([0.0, 0.02, 0.3, 0.7])).astype(float)
        tp, fp, fn = _brute_counts(p, g)
        ref_d = 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
        ref_i = 1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn)
        d, j = dice(p, g), iou(p, g)
        worst_d = max(worst_d, abs(d - ref_d))
        worst_i = max(worst_i, abs(j - ref_i))
        worst_id = max(worst_id, abs(d - 2 * j / (1 + j)))
    ok = worst_d <= 1e-12 and worst_i <= 1e-12 and worst_id <= 1e-12
    record("metric oracle", ok, f"1000 pairs, max |dice err| {worst_d:.1e}, |iou err| {worst_i:.1e}, "
                                f"|dice - 2iou/(1+iou)| {worst_id:.1e} (all <= 1e-12)")


# ---------------------------------------------------------------- loss identities

def _naive_weight_map(m: np.ndarray, k: int = 31) -> np.ndarray:
    h, w = m.shape
    r = k // 2
    out = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            s = 0.0
            for y in range(max(0, i - r), min(h, i + r + 1)):
                s += float(m[y, max(0, j - r):min(w, j + r + 1)].sum())
            out[i, j] = 1.0 + 5.0 * abs(s / (k * k) - m[i, j])
    return out


def _fixtures():
    yy, xx = np.mgrid[0:64, 0:64]
    disc = (((yy - 30) ** 2 + (xx - 24) ** 2) <= 121).astype(float)
    corner = ((yy < 20) & (xx > 40)).astype(float)
    speckle = (np.random.default_rng(1).random((64, 64)) < 0.3).astype(float)
    return {"disc": disc, "corner": corner, "speckle": speckle, "empty": np.zeros((64, 64))}


def test_loss_identities():
    exact = all(np.array_equal(weight_map(Tensor(m[None, None])).data[0, 0], _naive_weight_map(m))
                for m in _fixtures().values())

    rng = np.random.default_rng(3)
    gt = Tensor((rng.random((2, 1, 64, 64)) < 0.3).astype(float))
    logits = {j: Tensor(rng.standard_normal((2, 1, 64, 64))) for j in (1, 2, 3)}
    rep = total_loss(logits, gt)
    add_err = abs(rep.total_value - sum(rep.values.values()))

    ones = Tensor(np.ones((2, 1, 64, 64)))
    ln2_err = abs(weighted_bce(Tensor(np.zeros((2, 1, 64, 64))), gt, ones).item() - math.log(2))
    ok = exact and add_err <= 1e-12 and ln2_err <= 1e-9
    record("loss identities", ok, f"weight map exact on 4 fixtures: {exact}; |total - sum(layers)| "
                                  f"{add_err:.1e} (<= 1e-12); |bce - ln2| {ln2_err:.1e} (<= 1e-9)")


# ---------------------------------------------------------------- shape / zero-init

def test_shape_and_zero_init_contract():
    x = Tensor(np.random.default_rng(4).random((1, 3, 64, 64)))
    problems = []
    for n_layers in (1, 2, 3):
        with T.no_grad():
            grid = SegModel(DecoderConfig(n_layers=n_layers), seed=0)(x)
        if grid.block_counts() != [3, 2, 1][:n_layers]:
            problems.append(f"L={n_layers} counts {grid.block_counts()}")
        for j, layer in enumerate(grid.p[1:], start=1):
            for i, t in layer.items():
                if t.shape != (1, 32, 16 >> (i - 1), 16 >> (i - 1)):
                    problems.append(f"P[{j}][{i}] {t.shape}")
        if any(lg.shape != (1, 1, 64, 64) for lg in [*grid.layer_logits.values(), grid.final_logits]):
            problems.append(f"L={n_layers} logit shape")

    cfg = DecoderConfig()
    reg = ParamRegistry(seed=0)
    reg.conv("b/gate", 1, 3 * cfg.width, 3, pad=1)
    for br in ("max", "avg"):
        reg.conv(f"b/ca_{br}1", cfg.bottleneck, cfg.width, 1)
        reg.conv(f"b/ca_{br}2", cfg.width, cfg.bottleneck, 1)
    reg.conv("b/sa", 1, 2, 7, pad=3)
    reg.zero_()
    rng = np.random.default_rng(5)
    cur = Tensor(rng.random((1, 32, 16, 16)))
    deeper = [Tensor(rng.random((1, 32, 8, 8))), Tensor(rng.random((1, 32, 4, 4)))]
    gate_half = np.array_equal(dense_attention_gate(cur, deeper, reg["b/gate"]).data, 0.5 * cur.data)
    cam_quarter = np.array_equal(cam(cur, reg, "b").data, 0.25 * cur.data)
    ok = not problems and gate_half and cam_quarter
    record("shape/zero-init contract", ok,
           f"blocks (3,2,1) with pinned shapes: {not problems}{' ' + str(problems) if problems else ''}; "
           f"zero DAG gate == 0.5: {gate_half}; zero CAM == 0.25: {cam_quarter}")


# ---------------------------------------------------------------- overfit

@pytest.fixture(scope="module")
def overfit_run(tmp_path_factory):
    return overfit(tmp_path_factory.mktemp("overfit"), steps=300, lr=1e-4, n_images=8, seed=0)


def test_overfit(overfit_run):
    r = overfit_run
    finite = all(math.isfinite(v) for v in r.losses)
    ma = r.moving_average(50)
    ok = finite and len(r.losses) == 300 and r.mdice >= 0.95 and r.seconds < 300
    record("overfit", ok, f"8 images, lr 1e-4, {len(r.losses)} steps: train mDice {r.mdice:.4f} (>= 0.95), "
                          f"loss {r.losses[0]:.3f} -> {r.losses[-1]:.3f}, 50-step avg "
                          f"{ma[0]:.3f} -> {ma[-1]:.3f}, finite: {finite}, {r.seconds:.0f}s (< 300s)")


def test_overfit_loss_is_finite_and_smoothly_decreasing(overfit_run):
    # invariant of the training loop, not a separate criterion
    losses = np.array(overfit_run.losses)
    assert np.all(np.isfinite(losses))
    ma = overfit_run.moving_average(50)
    assert np.all(np.diff(ma) <= 0), f"largest rise {np.diff(ma).max():.2e}"


# ---------------------------------------------------------------- ablation trend

def test_ablation_trend(tmp_path):
    r = depth_ablation(tmp_path, layers=(1, 2, 3), seeds=(0, 1, 2), n_images=200,
                       epochs=ABLATION_EPOCHS, lr=ABLATION_LR)
    d1, d2, d3 = (r.mean_dice(d) for d in (1, 2, 3))
    ok = d3 >= d1 - 0.005 and r.seconds < 45 * 60
    seeds = "; ".join(f"L{row.depth} " + " ".join(f"{v:.3f}" for v in row.mdice) for row in r.rows)
    record("ablation trend", ok, f"val mDice 1/2/3 layers {d1:.4f} / {d2:.4f} / {d3:.4f} "
                                 f"(3 >= 1 - 0.005), per seed [{seeds}], {r.seconds / 60:.1f} min (< 45)")


# ---------------------------------------------------------------- determinism

def test_determinism(tmp_path):
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data)]) == 0
    outs = []
    for k in (0, 1):
        cfg = tmp_path / f"run{k}.cfg"
        cfg.write_text(f"data_root = {data}\nepochs = 3\nseed = 7\nout_dir = {tmp_path / f'r{k}'}\n"
                       f"checkpoint = {tmp_path / f'r{k}' / 'model.mldd1'}\n")
        assert main(["train", "--config", str(cfg)]) == 0
        outs.append([(tmp_path / f"r{k}" / f).read_bytes() for f in ("runlog.csv", "model.mldd1")])
    same_log, same_ckpt = outs[0][0] == outs[1][0], outs[0][1] == outs[1][1]
    record("determinism", same_log and same_ckpt,
           f"runlog.csv identical: {same_log}; model.mldd1 identical: {same_ckpt} "
           f"({len(outs[0][0])} / {len(outs[0][1])} bytes)")


if __name__ == "__main__":
    import inspect
    import sys
    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as tmp:
        shared = {"overfit_run": None}
        for name, fn in list(globals().items()):
            if not name.startswith("test_") or not callable(fn):
                continue
            args = {}
            for arg in inspect.signature(fn).parameters:
                if arg == "tmp_path":
                    args[arg] = Path(tempfile.mkdtemp(dir=tmp))
                elif arg == "overfit_run":
                    if shared[arg] is None:
                        shared[arg] = overfit(Path(tempfile.mkdtemp(dir=tmp)), steps=300, lr=1e-4)
                    args[arg] = shared[arg]
            try:
                fn(**args)
            except AssertionError:
                pass
    print("\n".join(["", "acceptance summary:", *RESULTS]))
    sys.exit(0 if all(r.startswith("PASS") for r in RESULTS) else 1)
