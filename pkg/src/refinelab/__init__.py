"""Desk-scale laboratory for re-randomizing pre-trained backbone layers before few-shot fine-tuning."""

__version__ = "0.1.0"

from refinelab.kernels import BACKEND  # noqa: E402

__all__ = ["BACKEND", "__version__"]
