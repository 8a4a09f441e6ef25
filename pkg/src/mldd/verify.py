"""Finite-difference verification of every differentiable op and one full decode block."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import tensor as T
from .decoder import DecoderConfig, decode_block
from .layers import ParamRegistry
from .losses import weight_map, weighted_bce, weighted_iou
from .tensor import Tensor, grad_check

TOLERANCE = 1e-5
EPS = 1e-5


def _leaf(rng, *shape, margin: float = 0.0) -> Tensor:
    a = rng.standard_normal(shape)
    if margin:
        # keep ReLU inputs clear of the kink
        a = np.where(np.abs(a) < margin, np.copysign(margin, a) + a, a)
    return Tensor(a, requires_grad=True)


def _projected(out_fn: Callable[[], Tensor], rng) -> Callable[[], Tensor]:
    """Scalar sum(out * R) with a fixed random R."""
    cache: dict[str, Tensor] = {}

    def f():
        out = out_fn()
        if "r" not in cache:
            cache["r"] = Tensor(rng.standard_normal(out.shape))
        return T.sum_all(T.mul(out, cache["r"]))

    return f


def _case_conv(rng):
    x, w, b = _leaf(rng, 2, 3, 5, 5), _leaf(rng, 2, 3, 3, 3), _leaf(rng, 2)
    return _projected(lambda: T.conv2d(x, w, b, 2, 1), rng), [x, w, b]


def _case_unary(op):
    def case(rng):
        x = _leaf(rng, 2, 3, 4, 4, margin=1e-2)
        return _projected(lambda: op(x), rng), [x]
    return case


def _case_upsample(rng):
    x = _leaf(rng, 1, 2, 3, 3)
    return _projected(lambda: T.upsample_bilinear(x, 6, 7), rng), [x]


def _case_concat(rng):
    a, b = _leaf(rng, 1, 2, 3, 3), _leaf(rng, 1, 3, 3, 3)
    return _projected(lambda: T.concat_channels([a, b]), rng), [a, b]


def _case_broadcast_mul(rng):
    a, s, c = _leaf(rng, 2, 3, 4, 4), _leaf(rng, 2, 1, 4, 4), _leaf(rng, 2, 3, 1, 1)
    return _projected(lambda: T.mul(T.mul(a, s), c), rng), [a, s, c]


def _case_broadcast_add(rng):
    a, s = _leaf(rng, 2, 3, 4, 4), _leaf(rng, 2, 1, 4, 4)
    return _projected(lambda: T.add(a, s), rng), [a, s]


def _case_avg_pool(rng):
    x = _leaf(rng, 1, 2, 6, 6)
    return _projected(lambda: T.avg_pool2d(x, 3, 1, 1), rng), [x]


def _case_loss(loss):
    def case(rng):
        z = _leaf(rng, 2, 1, 6, 6)
        g = Tensor((rng.random(z.shape) < 0.4).astype(float))
        w = weight_map(g, k=3)
        return (lambda: loss(z, g, w)), [z]
    return case


def _case_decode_block(rng):
    cfg = DecoderConfig(width=4, n_stages=3, n_layers=1, reduction=2)
    reg = ParamRegistry(seed=int(rng.integers(1 << 30)))
    name = "dec/L1/S1"
    reg.conv(f"{name}/gate", 1, cfg.width * 3, 3, pad=1)
    for br in ("max", "avg"):
        reg.conv(f"{name}/ca_{br}1", cfg.bottleneck, cfg.width, 1)
        reg.conv(f"{name}/ca_{br}2", cfg.width, cfg.bottleneck, 1)
    reg.conv(f"{name}/sa", 1, 2, 7, pad=3)
    for _, t in reg.tensors():
        if t.data.ndim == 1:
            t.data[...] = 0.1 * rng.standard_normal(t.shape)
    cur, d1, d2 = _leaf(rng, 1, 4, 4, 4), _leaf(rng, 1, 4, 2, 2), _leaf(rng, 1, 4, 1, 1)
    f = _projected(lambda: decode_block(reg, cfg, 1, 1, cur, [d1, d2]), rng)
    return f, [cur, d1, d2, *(t for _, t in reg.tensors())]


CASES: dict[str, Callable] = {
    "conv2d": _case_conv,
    "upsample_bilinear": _case_upsample,
    "relu": _case_unary(T.relu),
    "sigmoid": _case_unary(T.sigmoid),
    "softmax_channels": _case_unary(T.softmax_channels),
    "global_pool_max": _case_unary(lambda x: T.global_pool("max", x)),
    "global_pool_avg": _case_unary(lambda x: T.global_pool("avg", x)),
    "channel_reduce_max": _case_unary(lambda x: T.channel_reduce("max", x)),
    "channel_reduce_mean": _case_unary(lambda x: T.channel_reduce("mean", x)),
    "avg_pool2d": _case_avg_pool,
    "concat_channels": _case_concat,
    "broadcast_mul": _case_broadcast_mul,
    "broadcast_add": _case_broadcast_add,
    "weighted_bce": _case_loss(weighted_bce),
    "weighted_iou": _case_loss(weighted_iou),
    "decode_block": _case_decode_block,
}


def run_gradcheck(seed: int = 0, report: Callable[[str], None] | None = None) -> dict[str, float]:
    """Max relative error per case; ``report`` receives one line per case."""
    results = {}
    for k, (name, case) in enumerate(CASES.items()):
        rng = np.random.default_rng([seed, k])
        t0 = time.perf_counter()
        f, params = case(rng)
        err = grad_check(f, params, EPS)
        results[name] = err
        if report:
            status = "ok" if err < TOLERANCE else "FAIL"
            report(f"{name:<22} max_rel_err={err:.3e}  {status}  ({time.perf_counter() - t0:.2f}s)")
    return results
