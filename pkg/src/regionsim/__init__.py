"""Region-level similarity self-training for place retrieval."""

__version__ = "0.1.0"
