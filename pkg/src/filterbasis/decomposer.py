"""Split-wise rearrangement of conv weights and basis/coefficient fitting.

A weight ``W`` of shape (n, c, h, w) with ``s`` splits of depth ``p = c / s``
becomes the split matrix ``M`` of shape (p*h*w, n*s). Column ``g*n + i`` is
split ``g`` of filter ``i`` vectorized channel-major, then h, then w. A basis
is stored as a (m, p, h, w) tensor whose matrix view ``B`` is (p*h*w, m);
coefficients ``A`` are an (m, n*s) matrix with the same split-major column
layout, so that ``M ~= B @ A``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .planner import LayerShape, PlanError
from .tensor_core import ShapeError, as_tensor4, truncated_svd

__all__ = [
    "SplitMatrix",
    "BasisSet",
    "CoefficientSet",
    "FitResult",
    "DegenerateLayerWarning",
    "layer_shape",
    "split_and_flatten",
    "unflatten",
    "fit",
    "fit_shared",
    "fit_sliced",
    "slice_basis",
    "slice_basis_channels",
    "reconstruct",
    "reconstruction_residual",
]


class DegenerateLayerWarning(UserWarning):
    """The weight being fitted is identically zero."""


def layer_shape(weight: np.ndarray) -> LayerShape:
    n, c, h, w = weight.shape
    return LayerShape(n=n, c=c, w=w, h=h)


@dataclass
class SplitMatrix:
    mat: np.ndarray
    shape: LayerShape
    s: int

    @property
    def p(self) -> int:
        return self.shape.c // self.s


@dataclass
class BasisSet:
    tensor: np.ndarray  # (m, p, h, w)
    id: Optional[str] = None
    degenerate: bool = False

    @property
    def m(self) -> int:
        return self.tensor.shape[0]

    @property
    def matrix(self) -> np.ndarray:
        return self.tensor.reshape(self.m, -1).T

    @classmethod
    def from_matrix(cls, mat: np.ndarray, p: int, h: int, w: int, **kw) -> "BasisSet":
        m = mat.shape[1]
        return cls(np.ascontiguousarray(mat.T).reshape(m, p, h, w), **kw)


@dataclass
class CoefficientSet:
    mat: np.ndarray  # (m, n*s), column g*n + i
    n: int
    s: int

    def __post_init__(self):
        if self.mat.ndim != 2 or self.mat.shape[1] != self.n * self.s:
            raise ShapeError(
                f"coefficients of shape {self.mat.shape} do not match n={self.n}, s={self.s}"
            )

    @property
    def m(self) -> int:
        return self.mat.shape[0]

    def combine_weight(self) -> np.ndarray:
        """1x1-conv weight (n, s*m) with entry [i, g*m + j] = alpha[j, g*n + i]."""
        m, n, s = self.m, self.n, self.s
        return self.mat.reshape(m, s, n).transpose(2, 1, 0).reshape(n, s * m)

    @classmethod
    def from_combine_weight(cls, cw: np.ndarray, m: int, s: int) -> "CoefficientSet":
        n = cw.shape[0]
        return cls(cw.reshape(n, s, m).transpose(2, 1, 0).reshape(m, s * n), n=n, s=s)


class FitResult(NamedTuple):
    basis: BasisSet
    coeffs: CoefficientSet
    residual: float


def split_and_flatten(weight, s: int) -> SplitMatrix:
    weight = as_tensor4(weight, "weight")
    n, c, h, w = weight.shape
    if s < 1 or c % s:
        raise PlanError(f"split count s={s} does not divide c={c}")
    p = c // s
    mat = weight.reshape(n, s, p * h * w).transpose(1, 0, 2).reshape(s * n, p * h * w).T
    return SplitMatrix(np.ascontiguousarray(mat), layer_shape(weight), s)


def unflatten(sm: SplitMatrix) -> np.ndarray:
    sh, s = sm.shape, sm.s
    p = sh.c // s
    if sm.mat.shape != (p * sh.h * sh.w, sh.n * s):
        raise ShapeError(
            f"split matrix {sm.mat.shape} inconsistent with {sh} and s={s}"
        )
    w = sm.mat.T.reshape(s, sh.n, p * sh.h * sh.w).transpose(1, 0, 2)
    return np.ascontiguousarray(w).reshape(sh.n, sh.c, sh.h, sh.w)


def _svd_factors(mat: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    res = truncated_svd(mat, m)
    return res.u * res.sigma, res.vt


def fit(sm: SplitMatrix, m: int) -> FitResult:
    """Best rank-``m`` basis/coefficients for one layer (B = U S, A = V^T)."""
    rows, cols = sm.mat.shape
    if not 1 <= m <= min(rows, cols):
        raise PlanError(f"m={m} outside [1, {min(rows, cols)}] for split matrix {sm.mat.shape}")
    sh = sm.shape
    if not np.any(sm.mat):
        warnings.warn(f"zero weight {sh}: returning zero basis", DegenerateLayerWarning, stacklevel=2)
        basis = BasisSet(np.zeros((m, sm.p, sh.h, sh.w)), degenerate=True)
        return FitResult(basis, CoefficientSet(np.zeros((m, cols)), sh.n, sm.s), 0.0)
    b, a = _svd_factors(sm.mat, m)
    residual = float(np.linalg.norm(sm.mat - b @ a))
    return FitResult(
        BasisSet.from_matrix(b, sm.p, sh.h, sh.w),
        CoefficientSet(a, sh.n, sm.s),
        residual,
    )


def fit_shared(group: Sequence[SplitMatrix], m: int,
               group_id: Optional[str] = None) -> tuple[BasisSet, list[CoefficientSet], float]:
    """One rank-``m`` basis for several layers, fitted on their column concatenation."""
    if not group:
        raise ValueError("fit_shared needs at least one layer")
    rows = {sm.mat.shape[0] for sm in group}
    kernels = {(sm.p, sm.shape.h, sm.shape.w) for sm in group}
    if len(rows) != 1 or len(kernels) != 1:
        raise ShapeError(
            f"shared basis needs identical split size p*h*w; got {sorted(kernels)}"
        )
    big = SplitMatrix(np.concatenate([sm.mat for sm in group], axis=1), group[0].shape, group[0].s)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateLayerWarning)
        if not 1 <= m <= min(big.mat.shape):
            raise PlanError(f"m={m} outside [1, {min(big.mat.shape)}] for shared group")
        if not np.any(big.mat):
            b = np.zeros((big.mat.shape[0], m))
            a = np.zeros((m, big.mat.shape[1]))
            degenerate = True
        else:
            b, a = _svd_factors(big.mat, m)
            degenerate = False
    p, h, w = kernels.pop()
    basis = BasisSet.from_matrix(b, p, h, w, id=group_id, degenerate=degenerate)
    coeffs, start = [], 0
    for sm in group:
        cols = sm.mat.shape[1]
        coeffs.append(CoefficientSet(np.ascontiguousarray(a[:, start : start + cols]), sm.shape.n, sm.s))
        start += cols
    residual = float(np.sqrt(sum(
        np.linalg.norm(sm.mat - b @ c.mat) ** 2 for sm, c in zip(group, coeffs)
    )))
    return basis, coeffs, residual


def slice_basis(shared: BasisSet, k: int) -> BasisSet:
    """The first ``k`` basis filters, in order."""
    if not 1 <= k <= shared.m:
        raise ValueError(f"slice width k={k} outside [1, {shared.m}]")
    return BasisSet(shared.tensor[:k], id=shared.id, degenerate=shared.degenerate)


def slice_basis_channels(shared: BasisSet, channels: int) -> BasisSet:
    """Every basis filter restricted to its first ``channels`` input channels."""
    depth = shared.tensor.shape[1]
    if not 1 <= channels <= depth:
        raise ValueError(f"channel slice {channels} outside [1, {depth}]")
    return BasisSet(shared.tensor[:, :channels], id=shared.id, degenerate=shared.degenerate)


def fit_sliced(weights: Sequence[np.ndarray], m: int, depth: Optional[int] = None,
               iters: int = 100, group_id: Optional[str] = None
               ) -> tuple[BasisSet, list[CoefficientSet], float]:
    """Shared basis of depth ``depth`` where layer ``l`` uses its first ``c_l`` channels.

    No closed form exists, so this runs alternating least squares from an SVD
    start on the zero-padded concatenation. Each half step is an exact least
    squares solve, so the residual never increases.
    """
    weights = [as_tensor4(wt, "weight") for wt in weights]
    kernels = {wt.shape[2:] for wt in weights}
    if len(kernels) != 1:
        raise ShapeError(f"sliced sharing needs one kernel size, got {sorted(kernels)}")
    h, w = kernels.pop()
    depth = depth or max(wt.shape[1] for wt in weights)
    hw = h * w
    rows = depth * hw
    mats = [split_and_flatten(wt, 1).mat for wt in weights]
    prefix = [mat.shape[0] for mat in mats]
    if max(prefix) > rows:
        raise ShapeError(f"layer depth exceeds shared basis depth {depth}")
    padded = np.zeros((rows, sum(mat.shape[1] for mat in mats)))
    col = 0
    for mat in mats:
        padded[: mat.shape[0], col : col + mat.shape[1]] = mat
        col += mat.shape[1]
    if not 1 <= m <= min(padded.shape):
        raise PlanError(f"m={m} outside [1, {min(padded.shape)}] for sliced group")
    b, _ = _svd_factors(padded, m)
    coeffs = [np.linalg.lstsq(b[:r], mat, rcond=None)[0] for r, mat in zip(prefix, mats)]
    bands = sorted(set(prefix) | {0})
    for _ in range(iters):
        for lo, hi in zip(bands[:-1], bands[1:]):
            active = [l for l, r in enumerate(prefix) if r >= hi]
            lhs = sum(coeffs[l] @ coeffs[l].T for l in active)
            rhs = sum(mats[l][lo:hi] @ coeffs[l].T for l in active)
            b[lo:hi] = rhs @ np.linalg.pinv(lhs)
        coeffs = [np.linalg.lstsq(b[:r], mat, rcond=None)[0] for r, mat in zip(prefix, mats)]
    residual = float(np.sqrt(sum(
        np.linalg.norm(mat - b[:r] @ a) ** 2 for r, mat, a in zip(prefix, mats, coeffs)
    )))
    basis = BasisSet.from_matrix(b, depth, h, w, id=group_id)
    return basis, [CoefficientSet(a, wt.shape[0], 1) for a, wt in zip(coeffs, weights)], residual


def reconstruct(b: BasisSet, a: CoefficientSet, shape: LayerShape, s: int) -> np.ndarray:
    if a.n != shape.n or a.s != s or a.m != b.m:
        raise ShapeError(f"coefficients (m={a.m}, n={a.n}, s={a.s}) vs basis m={b.m}, {shape}, s={s}")
    if s < 1 or shape.c % s or b.tensor.shape[1:] != (shape.c // s, shape.h, shape.w):
        raise ShapeError(f"basis filters {b.tensor.shape[1:]} do not fit {shape} with s={s}")
    return unflatten(SplitMatrix(b.matrix @ a.mat, shape, s))


def reconstruction_residual(weight, b: BasisSet, a: CoefficientSet, s: int) -> float:
    weight = as_tensor4(weight, "weight")
    return float(np.linalg.norm(weight - reconstruct(b, a, layer_shape(weight), s)))
