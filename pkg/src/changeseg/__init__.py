"""Multi-class change detection on bi-temporal imagery, in numpy with numba kernels."""

__version__ = "0.1.0"

from .config import Config
from .model import ChangeNet
from .tensor import Rng, Tensor

__all__ = ["ChangeNet", "Config", "Rng", "Tensor", "__version__"]
