from .container import ContainerError, companion, load_tensors, save_tensors
from .kernels import HAVE_NUMBA, backend
from .tape import Evaluation, Override, ShapeError, Tape, Tensor, Var

__all__ = [
    "ContainerError",
    "companion",
    "Evaluation",
    "HAVE_NUMBA",
    "Override",
    "ShapeError",
    "Tape",
    "Tensor",
    "Var",
    "backend",
    "load_tensors",
    "save_tensors",
]
