"""Filter-basis compression of convolutional layers.

A convolution weight ``W`` of shape (n, c, h, w) is cut into ``s`` channel
splits, each split filter is written as a linear combination of ``m`` shared
basis filters, and the layer is then run as ``s`` weight-shared basis
convolutions followed by a 1x1 combining convolution.
"""
from .decomposed_conv import DecomposedLayer, forward, forward_via_reconstruction
from .decomposer import (
    BasisSet,
    CoefficientSet,
    SplitMatrix,
    fit,
    fit_shared,
    reconstruct,
    split_and_flatten,
    unflatten,
)
from .graph import ModelGraph
from .model_io import load_model, save_model
from .planner import Budget, LayerShape, count_flops, count_params, optimal_split, rate_split
from .tensor_core import conv2d, matmul, truncated_svd

__version__ = "0.1.0"

__all__ = [
    "BasisSet",
    "Budget",
    "CoefficientSet",
    "DecomposedLayer",
    "LayerShape",
    "ModelGraph",
    "SplitMatrix",
    "conv2d",
    "count_flops",
    "count_params",
    "fit",
    "fit_shared",
    "forward",
    "forward_via_reconstruction",
    "load_model",
    "matmul",
    "optimal_split",
    "rate_split",
    "reconstruct",
    "save_model",
    "split_and_flatten",
    "truncated_svd",
    "unflatten",
]
