"""From-scratch differentiable programming with spatial-transformer-based
speaker/session adaptation for image-to-spectrum regression."""

from .autodiff import (  # noqa: F401
    NumericsError,
    ShapeError,
    Tensor,
    finite_difference_gradient,
)

__version__ = "0.1.0"
