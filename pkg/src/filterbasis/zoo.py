"""Small seeded model graphs shaped like the networks the method is applied to.

The graphs are sequential (no skip connections or concatenation); they only
reproduce the layer shapes and the block/stage annotations that planning and
sharing depend on.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from .graph import ModelGraph, conv_layer, dense_layer, simple_layer


def _he(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def low_rank_weight(rng: np.random.Generator, n: int, c: int, k: int, rank: int, s: int = 1) -> np.ndarray:
    """A (n, c, k, k) weight whose split matrix has the given rank."""
    from .decomposer import SplitMatrix, unflatten
    from .planner import LayerShape

    p = c // s
    b = rng.standard_normal((p * k * k, rank)) / np.sqrt(p * k * k)
    a = rng.standard_normal((rank, n * s))
    return unflatten(SplitMatrix(b @ a, LayerShape(n=n, c=c, w=k, h=k), s))


def residual_blocks(channels: int, blocks: int = 1, size: int = 8, seed: int = 0,
                    rank: Optional[int] = None) -> ModelGraph:
    """EDSR/SRResNet-style body: ``blocks`` x (conv3x3, relu, conv3x3), block-annotated."""
    rng = np.random.default_rng(seed)
    g = ModelGraph((channels, size, size))
    for b in range(blocks):
        for i in range(2):
            if rank is None:
                w = _he(rng, (channels, channels, 3, 3))
            else:
                w = low_rank_weight(rng, channels, channels, 3, rank)
            conv_layer(g, f"block{b}.conv{i}", w, pad=1, block=b)
            if i == 0:
                simple_layer(g, f"block{b}.relu", "relu")
    return g


def resnet_toy(stages: tuple = (16, 32, 64), blocks_per_stage: int = 1, size: int = 8,
               classes: int = 10, seed: int = 0) -> ModelGraph:
    """ResNet-56-shaped classifier with stage (``group``) annotations."""
    rng = np.random.default_rng(seed)
    g = ModelGraph((3, size, size))
    conv_layer(g, "stem", _he(rng, (stages[0], 3, 3, 3)), pad=1, compress=False)
    simple_layer(g, "stem.relu", "relu")
    c_in = stages[0]
    for si, c in enumerate(stages):
        for b in range(blocks_per_stage):
            for i in range(2):
                stride = 2 if (si > 0 and b == 0 and i == 0) else 1
                name = f"stage{si}.block{b}.conv{i}"
                conv_layer(g, name, _he(rng, (c, c_in, 3, 3)), stride=stride, pad=1, group=si, block=f"{si}.{b}")
                simple_layer(g, f"{name}.relu", "relu")
                c_in = c
    simple_layer(g, "pool", "global_average_pool")
    dense_layer(g, "fc", _he(rng, (classes, c_in)), np.zeros(classes))
    return g


def growing_toy(layers: int = 12, growth: int = 4, c0: int = 4, size: int = 6,
                seed: int = 0, chained: bool = True) -> ModelGraph:
    """Convs whose input depth grows by ``growth`` per layer, like DenseNet layers.

    With ``chained`` each conv outputs ``c + growth`` channels so the sequential
    graph runs; otherwise every conv outputs ``growth`` channels as in DenseNet,
    and the graph is only good for planning (its shape chain is broken).
    """
    rng = np.random.default_rng(seed)
    g = ModelGraph((c0, size, size))
    c = c0
    for l in range(layers):
        n = c + growth if chained else growth
        conv_layer(g, f"dense{l}", _he(rng, (n, c, 3, 3)), pad=1)
        c += growth
    return g


def teacher_student(n: int = 4, c: int = 4, k: int = 3, rank: int = 3, s: int = 1,
                    samples: int = 32, size: int = 6, seed: int = 0):
    """A single rank-limited teacher conv and a synthetic regression set it labels."""
    from .tensor_core import conv2d

    rng = np.random.default_rng(seed)
    w = low_rank_weight(rng, n, c, k, rank, s)
    g = ModelGraph((c, size, size))
    conv_layer(g, "conv", w, pad=k // 2)
    x = rng.standard_normal((samples, c, size, size))
    y = conv2d(x, w, 1, k // 2)
    return g, x, y


PRESETS = {
    "edsr": lambda seed: residual_blocks(256, 1, 8, seed),
    "edsr-8-128": lambda seed: residual_blocks(128, 1, 8, seed),
    "srresnet": lambda seed: residual_blocks(64, 1, 8, seed),
    "resnet56": lambda seed: resnet_toy(seed=seed),
    "densenet": lambda seed: growing_toy(seed=seed),
    "tiny": lambda seed: residual_blocks(8, 2, 6, seed),
}


def perturb_trainables(graph: ModelGraph, scale: float, seed: int = 0) -> ModelGraph:
    """Add seeded Gaussian noise (relative to each tensor's RMS) to every basis and coefficient tensor."""
    rng = np.random.default_rng(seed)
    for key in graph.trainable_names():
        p = graph.params[key]
        rms = float(np.sqrt(np.mean(p * p))) or 1.0
        graph.params[key] = p + scale * rms * rng.standard_normal(p.shape)
    return graph
