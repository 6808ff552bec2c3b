"""Desk-scale knowledge amalgamation toolkit.

A small reverse-mode autodiff engine, residual multi-task block nets, feature
alignment bridges, entropy-based teacher selection, the dual-stage
amalgamation engine, a synthetic labeled-image generator, and a versioned
checkpoint zoo, all on float64 numpy.
"""

from .tensor import Tensor, Tape, SGD, backward, finite_diff_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "Tape", "SGD", "backward", "finite_diff_grad", "__version__"]
