"""Mobius-transformation attention: complex arithmetic, geometry, autodiff and a toy encoder."""

from .complex_core import ComplexTensor, ExtendedComplex, INF
from .config import AttentionConfig, ModelConfig, TrainConfig
from .errors import MobiusAttnError
from .mobius import GeometryClass, MobiusParams, apply_mobius, classify, fixed_points
from .model import Model, count_parameters, forward, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig", "ComplexTensor", "ExtendedComplex", "GeometryClass", "INF", "MobiusAttnError",
    "MobiusParams", "Model", "ModelConfig", "TrainConfig", "apply_mobius", "classify",
    "count_parameters", "fixed_points", "forward", "load_checkpoint", "save_checkpoint",
]
