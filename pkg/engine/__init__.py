"""
Tensor engine: float64 arrays with reverse-mode differentiation.
"""

__version__ = "1.0.0"

from engine.tensor import Graph, Tensor, as_tensor, no_grad, parameter  # noqa: F401
