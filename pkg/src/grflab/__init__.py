"""grflab: a numerical laboratory for generalized Ricci flow on flat tori."""

from .grid import Grid
from .tensor import MetricField, TensorField

__all__ = ["Grid", "MetricField", "TensorField"]
__version__ = "0.1.0"
