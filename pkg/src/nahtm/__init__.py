"""Attention-aware hierarchical neural topic model.

A VAE-style topic model over documents and their sentences, with external
word / sentence embeddings folded in through learned combination weights
and a choice of hierarchical KL regularizers tying sentence posteriors to
their document's posterior.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, NahtmError, NumericError, ShapeError

__all__ = [
    "ConfigError",
    "DataError",
    "NahtmError",
    "NumericError",
    "ShapeError",
    "__version__",
]
