"""Manifold-regularized dynamic channel pruning for small CNNs."""

from manidp.autograd import Tensor, backward, default_dtype, no_grad

__all__ = ["Tensor", "backward", "default_dtype", "no_grad"]
__version__ = "0.1.0"
