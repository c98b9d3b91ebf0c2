"""Hotspot-gated fusion, mixture-of-aligners and a relational graph pathway
for multimodal emotion recognition in conversations, on a numpy tape engine."""

from .tensor import Tensor, grad_check

__version__ = "0.1.0"
__all__ = ["Tensor", "grad_check", "__version__"]
