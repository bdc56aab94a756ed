"""Fence removal from photographs with conditional GANs."""

__version__ = "0.1.0"
