"""Boundary-weighted BCE + IoU training loss and Dice/IoU evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, _result, _sigmoid_np

BINARY_TOL = 1e-6


def _check_binary(a: np.ndarray, what: str) -> None:
    if not np.all((np.abs(a) <= BINARY_TOL) | (np.abs(a - 1.0) <= BINARY_TOL)):
        raise ValueError(f"{what} must be binary (0/1)")


def _same_shape(*ts: Tensor) -> None:
    if len({t.shape for t in ts}) != 1:
        raise T.ShapeError(f"shape mismatch: {[t.shape for t in ts]}")


def weight_map(gt: Tensor, k: int = 31) -> Tensor:
    """1 + 5 |local_mean(gt) - gt|: emphasises pixels near mask boundaries."""
    _check_binary(gt.data, "ground truth")
    with T.no_grad():
        local = T.avg_pool2d(gt.detach(), k, 1, k // 2)
    return Tensor(1.0 + 5.0 * np.abs(local.data - gt.data))


def _per_image(a: np.ndarray) -> np.ndarray:
    return a.reshape(a.shape[0], -1).sum(axis=1)


def weighted_bce(logits: Tensor, gt: Tensor, w: Tensor) -> Tensor:
    """Per-image weighted mean of the stable BCE-with-logits, averaged over the batch."""
    _same_shape(logits, gt, w)
    z, g, wt = logits.data, gt.data, w.data
    n = z.shape[0]
    elem = np.maximum(z, 0.0) - z * g + np.log1p(np.exp(-np.abs(z)))
    wsum = _per_image(wt)
    loss = np.mean(_per_image(wt * elem) / wsum)

    def grad_fn(gout):
        scale = (gout.reshape(()) / n / wsum).reshape((n,) + (1,) * (z.ndim - 1))
        return (scale * wt * (_sigmoid_np(z) - g), None, None)

    return _result(np.array([loss]), (logits, gt, w), grad_fn, "weighted_bce")


def weighted_iou(logits: Tensor, gt: Tensor, w: Tensor) -> Tensor:
    """1 - (inter + 1) / (union + 1) on sigmoid probabilities, averaged over the batch."""
    _same_shape(logits, gt, w)
    z, g, wt = logits.data, gt.data, w.data
    n = z.shape[0]
    p = _sigmoid_np(z)
    inter = _per_image(wt * p * g) + 1.0
    union = _per_image(wt * (p + g - p * g)) + 1.0
    loss = np.mean(1.0 - inter / union)

    def grad_fn(gout):
        shp = (n,) + (1,) * (z.ndim - 1)
        i_, u_ = inter.reshape(shp), union.reshape(shp)
        # d/dp of -(I/U) with dI/dp = w g and dU/dp = w (1 - g)
        dp = -(wt * g * u_ - i_ * wt * (1.0 - g)) / (u_ * u_)
        return (gout.reshape(()) / n * dp * p * (1.0 - p), None, None)

    return _result(np.array([loss]), (logits, gt, w), grad_fn, "weighted_iou")


@dataclass
class LossReport:
    per_layer: list[tuple[int, Tensor]]
    total: Tensor

    @property
    def values(self) -> dict[int, float]:
        return {j: t.item() for j, t in self.per_layer}

    @property
    def total_value(self) -> float:
        return self.total.item()


def main_loss(logits: Tensor, gt: Tensor, w: Tensor) -> Tensor:
    return T.add(weighted_iou(logits, gt, w), weighted_bce(logits, gt, w))


def total_loss(grid, gt: Tensor) -> LossReport:
    """Deeply supervised loss: one weighted IoU + BCE term per decoding layer, summed."""
    layer_logits = grid.layer_logits if hasattr(grid, "layer_logits") else grid
    if not layer_logits:
        raise ValueError("grid has no layer logits")
    w = weight_map(gt)
    per_layer = [(j, main_loss(lg, gt, w)) for j, lg in layer_logits.items()]
    total = per_layer[0][1]
    for _, l in per_layer[1:]:
        total = T.add(total, l)
    return LossReport(per_layer, total)


# ---------------------------------------------------------------- metrics

def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=float)


def binarize(logits) -> Tensor:
    return Tensor((_as_array(logits) > 0).astype(float))


def _counts(pred, gt) -> tuple[float, float, float]:
    a, b = _as_array(pred), _as_array(gt)
    if a.shape != b.shape:
        raise T.ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    _check_binary(a, "prediction")
    _check_binary(b, "ground truth")
    a, b = a > 0.5, b > 0.5
    return float(np.count_nonzero(a & b)), float(np.count_nonzero(a)), float(np.count_nonzero(b))


def dice(pred_bin, gt) -> float:
    inter, na, nb = _counts(pred_bin, gt)
    if na + nb == 0:
        return 1.0
    return 2.0 * inter / (na + nb)


def iou(pred_bin, gt) -> float:
    inter, na, nb = _counts(pred_bin, gt)
    union = na + nb - inter
    if union == 0:
        return 1.0
    return inter / union
