"""Disentangle speaker identity from emotional style in fixed-size speaker embeddings,
then cluster the cleaned embeddings."""

__version__ = "0.1.0"
