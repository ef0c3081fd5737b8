"""Sequence span rewriting: data pipeline, tiny seq2seq model and evaluation at desk scale."""

__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: E402

__all__ = ["BACKEND", "__version__"]
