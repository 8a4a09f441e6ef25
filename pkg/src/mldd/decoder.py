"""Multi-layer dense decoder: dense attention gates, camouflage attention and
the triangular grid of decoding blocks with one supervision head per layer.

Block (j, i) sits in decoding layer j at pyramid stage i.  Layer j holds
stages 1..n_stages-j; each block gates its same-stage input from layer j-1 by
a spatial map computed from that input concatenated with every deeper feature
of layer j-1, then refines it with channel and spatial attention.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from . import tensor as T
from .encoder import CHANNELS, FeaturePyramid
from .layers import ParamRegistry
from .tensor import Tensor


@dataclass
class DecoderConfig:
    width: int = 32
    n_stages: int = 4
    n_layers: int = 3
    channel_act: str = "sigmoid"
    reduction: int = 16

    def __post_init__(self):
        if not 1 <= self.n_layers <= self.n_stages - 1:
            raise ValueError(f"n_layers must lie in [1, {self.n_stages - 1}], got {self.n_layers}")
        if self.channel_act not in ("sigmoid", "softmax"):
            raise ValueError(f"channel_act must be sigmoid or softmax, got {self.channel_act!r}")
        if self.width < 1 or self.reduction < 1:
            raise ValueError("width and reduction must be positive")

    @property
    def bottleneck(self) -> int:
        return max(1, self.width // self.reduction)

    def blocks(self, layer: int) -> range:
        """Stages present in a decoding layer (1-based)."""
        return range(1, self.n_stages - layer + 1)


@dataclass
class DecoderGrid:
    # p[j][i]: layer j (0 = projected encoder features), stage i
    p: list[dict[int, Tensor]] = field(default_factory=list)
    layer_logits: dict[int, Tensor] = field(default_factory=dict)
    final_logits: Tensor | None = None

    def block_counts(self) -> list[int]:
        return [len(layer) for layer in self.p[1:]]


def _block(j: int, i: int) -> str:
    return f"dec/L{j}/S{i}"


def init_decoder(reg: ParamRegistry, cfg: DecoderConfig, enc_channels: Sequence[int] = CHANNELS) -> None:
    wd, r = cfg.width, cfg.bottleneck
    for i in range(1, cfg.n_stages + 1):
        reg.conv(f"proj/S{i}", wd, enc_channels[i - 1], 1)
    for j in range(1, cfg.n_layers + 1):
        top = cfg.n_stages - (j - 1)
        for i in cfg.blocks(j):
            name = _block(j, i)
            n_in = top - i + 1
            reg.conv(f"{name}/gate", 1, wd * n_in, 3, pad=1)
            for branch in ("max", "avg"):
                reg.conv(f"{name}/ca_{branch}1", r, wd, 1)
                reg.conv(f"{name}/ca_{branch}2", wd, r, 1)
            reg.conv(f"{name}/sa", 1, 2, 7, pad=3)
        reg.conv(f"head/L{j}", 1, wd, 1)


def decoder_param_count(cfg: DecoderConfig, enc_channels: Sequence[int] = CHANNELS) -> int:
    """Closed-form parameter count of :func:`init_decoder` (projection included)."""
    wd, r = cfg.width, cfg.bottleneck
    total = sum(c * wd + wd for c in enc_channels[: cfg.n_stages])
    for j in range(1, cfg.n_layers + 1):
        top = cfg.n_stages - (j - 1)
        for i in cfg.blocks(j):
            total += 9 * wd * (top - i + 1) + 1
            total += 2 * ((wd * r + r) + (r * wd + wd))
            total += 2 * 49 + 1
        total += wd + 1
    return total


def project_pyramid(pyr: FeaturePyramid, reg: ParamRegistry) -> dict[int, Tensor]:
    return {i: T.relu(reg[f"proj/S{i}"](pyr[i])) for i in range(1, len(pyr) + 1)}


def dense_attention_gate(current: Tensor, deeper: Sequence[Tensor], gate) -> Tensor:
    """Rescale ``current`` by a 1-channel sigmoid map computed from it and all deeper features."""
    if not deeper:
        raise ValueError("dense_attention_gate needs at least one deeper feature")
    h, w = current.shape[2:]
    c = current.shape[1]
    ups = []
    for d in deeper:
        if d.shape[1] != c:
            raise T.ShapeError(f"deeper feature has {d.shape[1]} channels, expected {c}")
        if d.shape[2] > h or d.shape[3] > w:
            raise T.ShapeError(f"deeper feature {d.shape} is larger than current {current.shape}")
        ups.append(T.upsample_bilinear(d, h, w))
    s = T.sigmoid(gate(T.concat_channels([current, *ups])))
    return T.mul(current, s)


def _act(kind: str, x: Tensor) -> Tensor:
    return T.sigmoid(x) if kind == "sigmoid" else T.softmax_channels(x)


def channel_attention(d: Tensor, reg: ParamRegistry, name: str, act: str = "sigmoid") -> Tensor:
    mx = reg[f"{name}/ca_max2"](T.relu(reg[f"{name}/ca_max1"](T.global_pool("max", d))))
    av = reg[f"{name}/ca_avg2"](T.relu(reg[f"{name}/ca_avg1"](T.global_pool("avg", d))))
    return T.mul(_act(act, T.add(mx, av)), d)


def spatial_attention(d: Tensor, reg: ParamRegistry, name: str) -> Tensor:
    pooled = T.concat_channels([T.channel_reduce("max", d), T.channel_reduce("mean", d)])
    return T.mul(T.sigmoid(reg[f"{name}/sa"](pooled)), d)


def cam(d: Tensor, reg: ParamRegistry, name: str, act: str = "sigmoid") -> Tensor:
    return spatial_attention(channel_attention(d, reg, name, act), reg, name)


def decode_block(reg: ParamRegistry, cfg: DecoderConfig, j: int, i: int,
                 current: Tensor, deeper: Sequence[Tensor]) -> Tensor:
    name = _block(j, i)
    return cam(dense_attention_gate(current, deeper, reg[f"{name}/gate"]), reg, name, cfg.channel_act)


def decoder_forward(pyr: FeaturePyramid, cfg: DecoderConfig, reg: ParamRegistry,
                    out_h: int, out_w: int) -> DecoderGrid:
    if len(pyr) != cfg.n_stages:
        raise ValueError(f"pyramid has {len(pyr)} stages, config expects {cfg.n_stages}")
    grid = DecoderGrid(p=[project_pyramid(pyr, reg)])
    for j in range(1, cfg.n_layers + 1):
        prev = grid.p[j - 1]
        top = cfg.n_stages - (j - 1)
        layer = {}
        for i in cfg.blocks(j):
            deeper = [prev[k] for k in range(i + 1, top + 1)]
            layer[i] = decode_block(reg, cfg, j, i, prev[i], deeper)
        grid.p.append(layer)
        head = reg[f"head/L{j}"](layer[1])
        grid.layer_logits[j] = T.upsample_bilinear(head, out_h, out_w)
    logits = list(grid.layer_logits.values())
    if len(logits) == 1:
        grid.final_logits = logits[0]
    else:
        acc = logits[0]
        for lg in logits[1:]:
            acc = T.add(acc, lg)
        grid.final_logits = T.scale(acc, 1.0 / len(logits))
    return grid
