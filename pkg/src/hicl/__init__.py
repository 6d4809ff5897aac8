"""Hierarchical contrastive learning of sentence embeddings on a toy encoder."""

__version__ = "0.1.0"
