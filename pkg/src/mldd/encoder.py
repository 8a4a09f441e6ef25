"""Small convolutional pyramid encoder (stand-in for a transformer backbone).

Produces four feature maps at strides 4/8/16/32 with 16/32/64/128 channels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from . import tensor as T
from .layers import ParamRegistry
from .tensor import Tensor

CHANNELS = (16, 32, 64, 128)
STRIDE = 32


@dataclass
class FeaturePyramid:
    features: tuple[Tensor, ...]

    def __len__(self) -> int:
        return len(self.features)

    def __getitem__(self, i: int) -> Tensor:
        """1-based stage access: ``pyr[1]`` is the stride-4 map."""
        return self.features[i - 1]

    @property
    def e1(self) -> Tensor:
        return self.features[0]

    @property
    def e2(self) -> Tensor:
        return self.features[1]

    @property
    def e3(self) -> Tensor:
        return self.features[2]

    @property
    def e4(self) -> Tensor:
        return self.features[3]


def init_encoder(reg: ParamRegistry, channels: Sequence[int] = CHANNELS, in_ch: int = 3) -> None:
    prev = in_ch
    for i, c in enumerate(channels, start=1):
        reg.conv(f"enc/S{i}/c1", c, prev, 3, stride=2, pad=1)
        reg.conv(f"enc/S{i}/c2", c, c, 3, stride=2 if i == 1 else 1, pad=1)
        prev = c


def encoder_forward(image: Tensor, reg: ParamRegistry, n_stages: int = len(CHANNELS)) -> FeaturePyramid:
    n, c, h, w = image.shape
    if c != 3:
        raise T.ShapeError(f"encoder expects 3-channel images, got {c}")
    if h % STRIDE or w % STRIDE:
        raise ValueError(f"image extents {h}x{w} must be multiples of {STRIDE}; resize the input first")
    feats = []
    x = image
    for i in range(1, n_stages + 1):
        x = T.relu(reg[f"enc/S{i}/c1"](x))
        x = T.relu(reg[f"enc/S{i}/c2"](x))
        feats.append(x)
    return FeaturePyramid(tuple(feats))
