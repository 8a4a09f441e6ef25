"""Encoder + dense decoder bundled with their parameter registry."""

from __future__ import annotations

from .decoder import DecoderConfig, DecoderGrid, decoder_forward, init_decoder
from .encoder import CHANNELS, encoder_forward, init_encoder
from .layers import ParamRegistry
from .tensor import Tensor


class SegModel:
    def __init__(self, cfg: DecoderConfig | None = None, seed: int = 0):
        self.cfg = cfg or DecoderConfig()
        self.reg = ParamRegistry(seed)
        init_encoder(self.reg, CHANNELS[: self.cfg.n_stages])
        init_decoder(self.reg, self.cfg)
        self.reg.zero_grad()

    def __call__(self, images: Tensor) -> DecoderGrid:
        h, w = images.shape[2:]
        pyr = encoder_forward(images, self.reg, self.cfg.n_stages)
        return decoder_forward(pyr, self.cfg, self.reg, h, w)
