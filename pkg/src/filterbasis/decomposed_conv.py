"""Forward pass of a basis-decomposed convolution.

The input's channels are cut into ``s`` splits of depth ``p``; every split is
convolved with the same ``m`` basis filters (one weight-shared 2-D convolution,
run once over the batch of splits), the ``s * m`` responses are concatenated
split-major and a 1x1 convolution with the coefficients produces the output.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .decomposer import BasisSet, CoefficientSet, reconstruct
from .planner import LayerShape, count_flops
from .tensor_core import ShapeError, as_tensor4, conv2d, conv_output_size, matmul

__all__ = [
    "DecomposedLayer",
    "NonFiniteError",
    "forward",
    "forward_via_reconstruction",
    "basis_stage",
    "combine",
    "macs",
]


class NonFiniteError(FloatingPointError):
    def __init__(self, message: str, layer: Optional[str] = None):
        super().__init__(f"{layer}: {message}" if layer else message)
        self.layer = layer


@dataclass
class DecomposedLayer:
    basis: BasisSet
    coeffs: CoefficientSet
    s: int
    stride: int = 1
    pad: int = 0
    bias: Optional[np.ndarray] = None
    name: Optional[str] = None

    def __post_init__(self):
        if self.coeffs.s != self.s or self.coeffs.m != self.basis.m:
            raise ShapeError(
                f"{self.name or 'layer'}: coefficients (m={self.coeffs.m}, s={self.coeffs.s}) "
                f"do not match basis m={self.basis.m}, s={self.s}"
            )

    @property
    def p(self) -> int:
        return self.basis.tensor.shape[1]

    @property
    def in_channels(self) -> int:
        return self.s * self.p

    @property
    def out_channels(self) -> int:
        return self.coeffs.n

    @property
    def shape(self) -> LayerShape:
        _, _, h, w = self.basis.tensor.shape
        return LayerShape(n=self.out_channels, c=self.in_channels, w=w, h=h)

    def reconstructed_weight(self) -> np.ndarray:
        return reconstruct(self.basis, self.coeffs, self.shape, self.s)


def basis_stage(x: np.ndarray, layer: DecomposedLayer) -> np.ndarray:
    """(N, s*p, H, W) -> (N, s*m, Ho, Wo), channel g*m + j = split g convolved with basis j."""
    n_batch, _, h, w = x.shape
    splits = x.reshape(n_batch * layer.s, layer.p, h, w)
    y = conv2d(splits, layer.basis.tensor, layer.stride, layer.pad)
    return y.reshape(n_batch, layer.s * layer.basis.m, y.shape[2], y.shape[3])


def combine(z: np.ndarray, layer: DecomposedLayer) -> np.ndarray:
    """The 1x1 convolution holding the coefficients."""
    n_batch, k, h, w = z.shape
    cw = layer.coeffs.combine_weight()
    flat = z.transpose(1, 0, 2, 3).reshape(k, n_batch * h * w)
    out = matmul(cw, flat).reshape(cw.shape[0], n_batch, h, w).transpose(1, 0, 2, 3)
    if layer.bias is not None:
        out = out + layer.bias[None, :, None, None]
    return np.ascontiguousarray(out)


def _check_input(x, layer: DecomposedLayer) -> np.ndarray:
    x = as_tensor4(x, "x")
    if x.shape[1] != layer.in_channels:
        raise ShapeError(
            f"{layer.name or 'layer'}: input has {x.shape[1]} channels, expected "
            f"s*p = {layer.s}*{layer.p} = {layer.in_channels}"
        )
    return x


def forward(x, layer: DecomposedLayer) -> np.ndarray:
    x = _check_input(x, layer)
    out = combine(basis_stage(x, layer), layer)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("non-finite values in decomposed convolution output", layer.name)
    return out


def forward_via_reconstruction(x, layer: DecomposedLayer) -> np.ndarray:
    """Reference path: rebuild the full weight and run a plain convolution."""
    x = _check_input(x, layer)
    out = conv2d(x, layer.reconstructed_weight(), layer.stride, layer.pad)
    if layer.bias is not None:
        out = out + layer.bias[None, :, None, None]
    return out


def macs(layer: DecomposedLayer, out_h: int, out_w: int) -> int:
    return count_flops(layer.shape, layer.basis.m, layer.s, out_h, out_w).flops_compressed


def output_hw(layer: DecomposedLayer, h: int, w: int) -> tuple[int, int]:
    kh, kw = layer.basis.tensor.shape[2:]
    return (conv_output_size(h, kh, layer.stride, layer.pad),
            conv_output_size(w, kw, layer.stride, layer.pad))
