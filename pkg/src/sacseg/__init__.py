"""Spatially-adaptive convolution and range-image LiDAR segmentation on a small numpy autodiff engine."""

from .tensor import Tensor, no_grad, set_default_dtype

__all__ = ["Tensor", "no_grad", "set_default_dtype"]
__version__ = "0.1.0"
