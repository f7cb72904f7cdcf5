"""Multi-illumination QPM cell segmentation: numpy autodiff engine + model family."""

from .tensor import Tensor, Tape, backward, ShapeError, TapeError
from .gradcheck import grad_check, GradCheckReport

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "ShapeError",
    "TapeError",
    "grad_check",
    "GradCheckReport",
    "__version__",
]
