"""Unified autoregressive toy models over a shared text+visual vocabulary,
with a progressive visual-token activation schedule."""

__version__ = "0.1.0"

from .vocab import ActivationState, VocabLayout

__all__ = ["ActivationState", "VocabLayout", "__version__"]
