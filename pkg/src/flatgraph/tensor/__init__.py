"""Dense float64 tensors with reverse-mode autodiff, plus CSR kernels."""
from .autodiff import NumericError, Tape, Tensor
from .gradcheck import grad_check
from .kernels import BACKEND
from .sparse import CsrMatrix, ShapeError

__all__ = ["BACKEND", "CsrMatrix", "NumericError", "ShapeError", "Tape", "Tensor", "grad_check"]
