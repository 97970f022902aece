"""Toy-scale hierarchical contrastive alignment with text-conditioned pooling."""

__version__ = "0.1.0"
