"""Multi-layer dense attention decoder for binary segmentation, on a small numpy autodiff core."""

__version__ = "0.1.0"
