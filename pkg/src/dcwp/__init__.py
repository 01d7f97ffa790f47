"""Debiased contrastive weight pruning on numpy, with a small theory lab."""

__version__ = "0.1.0"
