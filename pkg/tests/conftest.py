"""Independent oracles shared by the test modules.

These deliberately avoid the package's own kernels: plain Python loops for
convolution and matrix products, LAPACK (``numpy.linalg.svd``) for spectra,
and index arithmetic for layouts.
"""
from __future__ import annotations

import itertools

import numpy as np
import pytest


def loop_conv2d(x, w, stride=1, pad=0):
    """Direct 6-nested-loop cross-correlation with zero padding."""
    N, C, H, W = x.shape
    n, c, kh, kw = w.shape
    assert c == C
    xp = np.zeros((N, C, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad : pad + H, pad : pad + W] = x
    oh = (H + 2 * pad - kh) // stride + 1
    ow = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((N, n, oh, ow))
    for b in range(N):
        for o in range(n):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ch in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, ch, i * stride + u, j * stride + v] * w[o, ch, u, v]
                    out[b, o, i, j] = acc
    return out


def loop_matmul(a, b):
    rows, inner = a.shape
    inner2, cols = b.shape
    assert inner == inner2
    out = np.zeros((rows, cols))
    for i, j in itertools.product(range(rows), range(cols)):
        out[i, j] = sum(a[i, k] * b[k, j] for k in range(inner))
    return out


def svd_tail(mat, k):
    """Frobenius error of the best rank-k approximation, from LAPACK's spectrum."""
    sigma = np.linalg.svd(mat, compute_uv=False)
    return float(np.sqrt(np.sum(sigma[k:] ** 2)))


def split_matrix_oracle(w, s):
    """Split matrix built entry by entry: column g*n+i, row (ch, u, v) channel-major."""
    n, c, kh, kw = w.shape
    p = c // s
    out = np.zeros((p * kh * kw, n * s))
    for g in range(s):
        for i in range(n):
            for ch in range(p):
                for u in range(kh):
                    for v in range(kw):
                        out[(ch * kh + u) * kw + v, g * n + i] = w[i, g * p + ch, u, v]
    return out


def rel_err(a, b):
    d = np.linalg.norm(np.asarray(a) - np.asarray(b))
    scale = np.linalg.norm(b)
    return float(d / scale) if scale > 0 else float(d)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def all_kinds_graph(seed=0, batch=2):
    """Graph exercising every layer kind, a basis shared by two layers and a
    channel-sliced basis, plus a random batch for it."""
    from filterbasis.graph import Layer, ModelGraph, conv_layer, dense_layer, simple_layer

    rng = np.random.default_rng(seed)
    g = ModelGraph((4, 6, 6))
    conv_layer(g, "c1", rng.standard_normal((4, 4, 3, 3)) * 0.4, rng.standard_normal(4) * 0.1, pad=1)
    simple_layer(g, "r1", "relu")
    g.params["shared.basis"] = rng.standard_normal((3, 2, 3, 3)) * 0.4
    for name, stride in (("d1", 1), ("d2", 2)):
        g.params[f"{name}.coeffs"] = rng.standard_normal((3, 8)) * 0.5
        g.params[f"{name}.reference"] = rng.standard_normal((4, 4, 3, 3)) * 0.3
        g.layers.append(Layer(name, "decomposed_conv",
                              {"basis": "shared.basis", "coeffs": f"{name}.coeffs", "reference": f"{name}.reference"},
                              {"s": 2, "stride": stride, "pad": 1}))
        if name == "d1":
            simple_layer(g, "r2", "relu")
    simple_layer(g, "up", "upsample_nearest", factor=2)
    g.params["wide.basis"] = rng.standard_normal((3, 6, 3, 3)) * 0.4
    g.params["d3.coeffs"] = rng.standard_normal((3, 5)) * 0.5
    g.params["d3.reference"] = rng.standard_normal((5, 4, 3, 3)) * 0.3
    g.params["d3.bias"] = rng.standard_normal(5) * 0.1
    g.layers.append(Layer("d3", "decomposed_conv",
                          {"basis": "wide.basis", "coeffs": "d3.coeffs", "reference": "d3.reference", "bias": "d3.bias"},
                          {"s": 1, "pad": 1, "basis_channels": 4}))
    simple_layer(g, "gap", "global_average_pool")
    dense_layer(g, "fc", rng.standard_normal((3, 5)) * 0.2, rng.standard_normal(3) * 0.1)  # keeps softmax unsaturated
    g.infer_shapes()
    x = rng.standard_normal((batch, 4, 6, 6))
    y = rng.standard_normal((batch, 3))
    return g, (x, y)


def finite_difference_errors(graph, batch, spec, keys, samples=50, step=1e-5, seed=0):
    """Max relative error between analytic and central-difference gradients per key."""
    from filterbasis.trainer import backward, joint_loss

    grads = backward(graph, batch, spec, wrt=keys)
    rng = np.random.default_rng(seed)
    worst = {}
    for key in keys:
        p = graph.params[key]
        flat = p.reshape(-1)
        idx = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
        errs = []
        for i in idx:
            old = flat[i]
            flat[i] = old + step
            up = joint_loss(graph, batch, spec)
            flat[i] = old - step
            down = joint_loss(graph, batch, spec)
            flat[i] = old
            num = (up - down) / (2 * step)
            ana = grads[key].reshape(-1)[i]
            errs.append(abs(ana - num) / max(abs(ana), abs(num), 1e-6))
        worst[key] = max(errs)
    return worst
