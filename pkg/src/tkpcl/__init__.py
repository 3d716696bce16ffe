"""Weakly supervised patch classification with top-k pooling and a patch contrastive loss."""

__version__ = "0.1.0"
