"""Framework-free GridFormer image restoration."""

from .grid import GridConfig, GridFormer
from .tensor import Parameter, Tape, Tensor, backward, finite_diff

__all__ = ["GridConfig", "GridFormer", "Parameter", "Tape", "Tensor", "backward", "finite_diff"]
__version__ = "0.1.0"
