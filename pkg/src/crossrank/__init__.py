"""Zero-shot cross-domain retrieval: ranking, iterative re-ranking,
evaluation metrics and reference training losses."""

__version__ = "0.1.0"
