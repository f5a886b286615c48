"""Uncertainty-gated two-stream fusion network for multi-parametric MR segmentation."""

__version__ = "0.1.0"
