"""Conjugate mask-reconstruction and classification networks trained on
synthetic renders, with a small numpy autodiff core."""

__version__ = "0.1.0"
