"""Dynamic target relation graph regularization on a small numpy autodiff engine."""

__version__ = "0.1.0"
