"""Path-integrated gradient attribution toolkit with a reference tiny CNN."""

from .errors import NumericError, PathattrError, ShapeError
from .model import (
    CnnOracle,
    ConstantOracle,
    GradientOracle,
    LayerSpec,
    LinearOracle,
    TinyCnnParams,
    embed,
    forward,
    init_params,
    input_gradient,
    parameter_gradient,
)

__version__ = "0.1.0"

__all__ = [
    "CnnOracle",
    "ConstantOracle",
    "GradientOracle",
    "LayerSpec",
    "LinearOracle",
    "NumericError",
    "PathattrError",
    "ShapeError",
    "TinyCnnParams",
    "embed",
    "forward",
    "init_params",
    "input_gradient",
    "parameter_gradient",
]
