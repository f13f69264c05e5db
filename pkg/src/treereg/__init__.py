"""Tree regularization for differentiable models."""

__version__ = "0.1.0"
