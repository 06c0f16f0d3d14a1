"""Federated attention U-Net segmentation workbench."""

__version__ = "0.1.0"
