"""Random-fern (decision tree) layers as a drop-in replacement for convolutions."""

from .convref import ConvLayer
from .fern import FernLayer, IndexPattern, OpCounter, PatternSet, builtin_pattern
from .nn import Model, build_lenet5, load_checkpoint, save_checkpoint

__all__ = [
    "ConvLayer", "FernLayer", "IndexPattern", "Model", "OpCounter", "PatternSet",
    "build_lenet5", "builtin_pattern", "load_checkpoint", "save_checkpoint",
]
