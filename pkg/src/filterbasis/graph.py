"""Sequential layer graph with a small reverse-mode engine.

Each layer refers to named parameter arrays held by the graph, so several
decomposed layers can point at one shared basis. ``forward`` records a tape of
per-layer caches; ``backward`` walks it in reverse and accumulates gradients
per parameter name.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .decomposed_conv import DecomposedLayer, NonFiniteError, basis_stage, combine
from .decomposer import BasisSet, CoefficientSet, slice_basis_channels
from .planner import LayerShape
from .tensor_core import ShapeError, conv2d, conv2d_backward, conv_output_size

LAYER_KINDS = ("conv", "decomposed_conv", "relu", "global_average_pool", "dense", "upsample_nearest")

# roles whose arrays are trainable {B, A}; everything else is the frozen set
TRAINABLE_ROLES = ("basis", "coeffs")


@dataclass
class Layer:
    name: str
    kind: str
    params: dict[str, str] = field(default_factory=dict)  # role -> parameter name
    attrs: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"{self.name}: unknown layer kind {self.kind!r}")

    @property
    def stride(self) -> int:
        return int(self.attrs.get("stride", 1))

    @property
    def pad(self) -> int:
        return int(self.attrs.get("pad", 0))


@dataclass
class ModelGraph:
    input_shape: tuple  # (c, h, w)
    layers: list[Layer] = field(default_factory=list)
    params: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)  # plan, loss/optimizer config, residuals

    # ------------------------------------------------------------------ access
    def layer(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def param(self, layer: Layer, role: str) -> Optional[np.ndarray]:
        key = layer.params.get(role)
        return None if key is None else self.params[key]

    def trainable_names(self) -> list[str]:
        names = []
        for layer in self.layers:
            for role in TRAINABLE_ROLES:
                key = layer.params.get(role)
                if key is not None and key not in names:
                    names.append(key)
        return names

    def decomposed_layers(self) -> list[Layer]:
        return [l for l in self.layers if l.kind == "decomposed_conv"]

    def conv_layers(self) -> list[Layer]:
        return [l for l in self.layers if l.kind == "conv"]

    def conv_shape(self, layer: Layer) -> LayerShape:
        if layer.kind == "conv":
            n, c, h, w = self.params[layer.params["weight"]].shape
        elif layer.kind == "decomposed_conv":
            dl = self.decomposed(layer)
            n, c, (h, w) = dl.out_channels, dl.in_channels, dl.basis.tensor.shape[2:]
        else:
            raise ValueError(f"{layer.name} is not a convolution")
        return LayerShape(n=n, c=c, w=w, h=h)

    def decomposed(self, layer: Layer) -> DecomposedLayer:
        basis = BasisSet(self.params[layer.params["basis"]], id=layer.params["basis"])
        channels = layer.attrs.get("basis_channels")
        if channels is not None:
            basis = slice_basis_channels(basis, int(channels))
        s = int(layer.attrs.get("s", 1))
        coeffs_mat = self.params[layer.params["coeffs"]]
        n = coeffs_mat.shape[1] // s
        return DecomposedLayer(
            basis=basis,
            coeffs=CoefficientSet(coeffs_mat, n=n, s=s),
            s=s,
            stride=layer.stride,
            pad=layer.pad,
            bias=self.param(layer, "bias"),
            name=layer.name,
        )

    def copy(self) -> "ModelGraph":
        return ModelGraph(
            input_shape=tuple(self.input_shape),
            layers=copy.deepcopy(self.layers),
            params={k: v.copy() for k, v in self.params.items()},
            meta=copy.deepcopy(self.meta),
        )

    def referenced_params(self) -> list[str]:
        seen = []
        for layer in self.layers:
            for key in layer.params.values():
                if key not in seen:
                    seen.append(key)
        return seen

    def param_count(self, roles: Optional[tuple] = None) -> int:
        """Unique parameter entries, optionally restricted to some roles."""
        seen: set[str] = set()
        total = 0
        for layer in self.layers:
            for role, key in layer.params.items():
                if role == "reference" or (roles is not None and role not in roles):
                    continue
                if key not in seen:
                    seen.add(key)
                    total += self.params[key].size
        return total

    # ------------------------------------------------------------------ shapes
    def infer_shapes(self) -> list[tuple]:
        """Output shape of every layer (without batch); raises ShapeError on a broken chain."""
        shape = tuple(self.input_shape)
        out = []
        for layer in self.layers:
            shape = _layer_out_shape(self, layer, shape)
            out.append(shape)
        return out

    # ------------------------------------------------------------------ execution
    def forward(self, x: np.ndarray, tape: Optional[list] = None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            x_in = x
            x, cache = _FORWARD[layer.kind](self, layer, x)
            if not np.all(np.isfinite(x)):
                raise NonFiniteError("non-finite activations", layer.name)
            if tape is not None:
                tape.append((layer, x_in, cache))
        return x

    def backward(self, dout: np.ndarray, tape: list, wrt: Optional[set] = None) -> dict[str, np.ndarray]:
        """Gradients for parameters named in ``wrt`` (default: all referenced parameters)."""
        grads: dict[str, np.ndarray] = {}

        def acc(key: str, g: np.ndarray, index=None):
            if wrt is not None and key not in wrt:
                return
            if key not in grads:
                grads[key] = np.zeros_like(self.params[key])
            if index is None:
                grads[key] += g
            else:
                grads[key][index] += g

        for layer, x_in, cache in reversed(tape):
            dout = _BACKWARD[layer.kind](self, layer, x_in, cache, dout, acc)
        return grads


# ---------------------------------------------------------------------- per-kind rules

def _layer_out_shape(graph: ModelGraph, layer: Layer, shape: tuple) -> tuple:
    kind = layer.kind
    if kind in ("conv", "decomposed_conv"):
        if len(shape) != 3:
            raise ShapeError(f"{layer.name}: convolution needs a (c, h, w) input, got {shape}")
        ls = graph.conv_shape(layer)
        if ls.c != shape[0]:
            raise ShapeError(f"{layer.name}: expects {ls.c} input channels, got {shape[0]}")
        oh = conv_output_size(shape[1], ls.h, layer.stride, layer.pad)
        ow = conv_output_size(shape[2], ls.w, layer.stride, layer.pad)
        if oh < 1 or ow < 1:
            raise ShapeError(f"{layer.name}: kernel does not fit input {shape}")
        return (ls.n, oh, ow)
    if kind == "relu":
        return shape
    if kind == "global_average_pool":
        if len(shape) != 3:
            raise ShapeError(f"{layer.name}: pooling needs a (c, h, w) input, got {shape}")
        return (shape[0],)
    if kind == "dense":
        w = graph.params[layer.params["weight"]]
        features = int(np.prod(shape))
        if w.shape[1] != features:
            raise ShapeError(f"{layer.name}: dense expects {w.shape[1]} features, got {features}")
        return (w.shape[0],)
    if kind == "upsample_nearest":
        f = int(layer.attrs.get("factor", 2))
        return (shape[0], shape[1] * f, shape[2] * f)
    raise ValueError(kind)


def _conv_fwd(g, layer, x):
    w = g.params[layer.params["weight"]]
    y = conv2d(x, w, layer.stride, layer.pad)
    b = g.param(layer, "bias")
    if b is not None:
        y = y + b[None, :, None, None]
    return y, None


def _conv_bwd(g, layer, x, cache, dout, acc):
    w = g.params[layer.params["weight"]]
    dx, dw = conv2d_backward(x, w, dout, layer.stride, layer.pad)
    acc(layer.params["weight"], dw)
    if "bias" in layer.params:
        acc(layer.params["bias"], dout.sum(axis=(0, 2, 3)))
    return dx


def _dconv_fwd(g, layer, x):
    dl = g.decomposed(layer)
    if x.shape[1] != dl.in_channels:
        raise ShapeError(f"{layer.name}: input has {x.shape[1]} channels, expected {dl.in_channels}")
    z = basis_stage(x, dl)
    return combine(z, dl), (dl, z)


def _dconv_bwd(g, layer, x, cache, dout, acc):
    dl, z = cache
    n_batch = x.shape[0]
    cw = dl.coeffs.combine_weight()
    dcw = np.einsum("nihw,nkhw->ik", dout, z)
    acc(layer.params["coeffs"], CoefficientSet.from_combine_weight(dcw, dl.basis.m, dl.s).mat)
    if "bias" in layer.params:
        acc(layer.params["bias"], dout.sum(axis=(0, 2, 3)))
    dz = np.einsum("ik,nihw->nkhw", cw, dout)
    _, _, h, w = x.shape
    splits = x.reshape(n_batch * dl.s, dl.p, h, w)
    dz = dz.reshape(n_batch * dl.s, dl.basis.m, dz.shape[2], dz.shape[3])
    dsplits, dbasis = conv2d_backward(splits, dl.basis.tensor, dz, dl.stride, dl.pad)
    channels = layer.attrs.get("basis_channels")
    index = None if channels is None else (slice(None), slice(0, int(channels)))
    acc(layer.params["basis"], dbasis, index)
    return dsplits.reshape(x.shape)


def _relu_fwd(g, layer, x):
    return np.maximum(x, 0.0), None


def _relu_bwd(g, layer, x, cache, dout, acc):
    return dout * (x > 0)


def _gap_fwd(g, layer, x):
    return x.mean(axis=(2, 3)), None


def _gap_bwd(g, layer, x, cache, dout, acc):
    h, w = x.shape[2:]
    return np.broadcast_to(dout[:, :, None, None] / (h * w), x.shape).copy()


def _dense_fwd(g, layer, x):
    flat = x.reshape(x.shape[0], -1)
    y = flat @ g.params[layer.params["weight"]].T
    b = g.param(layer, "bias")
    if b is not None:
        y = y + b
    return y, None


def _dense_bwd(g, layer, x, cache, dout, acc):
    w = g.params[layer.params["weight"]]
    flat = x.reshape(x.shape[0], -1)
    acc(layer.params["weight"], dout.T @ flat)
    if "bias" in layer.params:
        acc(layer.params["bias"], dout.sum(axis=0))
    return (dout @ w).reshape(x.shape)


def _up_fwd(g, layer, x):
    f = int(layer.attrs.get("factor", 2))
    return x.repeat(f, axis=2).repeat(f, axis=3), None


def _up_bwd(g, layer, x, cache, dout, acc):
    f = int(layer.attrs.get("factor", 2))
    n, c, h, w = x.shape
    return dout.reshape(n, c, h, f, w, f).sum(axis=(3, 5))


_FORWARD = {
    "conv": _conv_fwd,
    "decomposed_conv": _dconv_fwd,
    "relu": _relu_fwd,
    "global_average_pool": _gap_fwd,
    "dense": _dense_fwd,
    "upsample_nearest": _up_fwd,
}
_BACKWARD = {
    "conv": _conv_bwd,
    "decomposed_conv": _dconv_bwd,
    "relu": _relu_bwd,
    "global_average_pool": _gap_bwd,
    "dense": _dense_bwd,
    "upsample_nearest": _up_bwd,
}


# ---------------------------------------------------------------------- builders

def conv_layer(graph: ModelGraph, name: str, weight: np.ndarray, bias: Optional[np.ndarray] = None,
               stride: int = 1, pad: int = 0, **attrs) -> Layer:
    graph.params[f"{name}.weight"] = np.asarray(weight, dtype=np.float64)
    params = {"weight": f"{name}.weight"}
    if bias is not None:
        graph.params[f"{name}.bias"] = np.asarray(bias, dtype=np.float64)
        params["bias"] = f"{name}.bias"
    layer = Layer(name, "conv", params, {"stride": stride, "pad": pad, **attrs})
    graph.layers.append(layer)
    return layer


def dense_layer(graph: ModelGraph, name: str, weight: np.ndarray, bias: Optional[np.ndarray] = None) -> Layer:
    graph.params[f"{name}.weight"] = np.asarray(weight, dtype=np.float64)
    params = {"weight": f"{name}.weight"}
    if bias is not None:
        graph.params[f"{name}.bias"] = np.asarray(bias, dtype=np.float64)
        params["bias"] = f"{name}.bias"
    layer = Layer(name, "dense", params)
    graph.layers.append(layer)
    return layer


def simple_layer(graph: ModelGraph, name: str, kind: str, **attrs) -> Layer:
    layer = Layer(name, kind, {}, attrs)
    graph.layers.append(layer)
    return layer
