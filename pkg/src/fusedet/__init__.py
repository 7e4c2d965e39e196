"""Encoder-free set-prediction detector with a cross-scale fused backbone."""

__version__ = "0.1.0"

from .tensor import Tensor, Tape, Parameter  # noqa: F401
