"""Compression rates, optimal split selection and exact parameter/MAC budgets.

All counts exclude biases. A layer has ``n`` output channels, ``c`` input
channels and a ``w x h`` kernel. Splitting the input depth into ``s`` chunks of
depth ``p = c / s`` turns the ``n`` filters into ``n * s`` filters of size
``p x w x h`` which are expressed in a basis of ``m`` such filters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

__all__ = [
    "LayerShape",
    "PlanEntry",
    "DecompositionPlan",
    "Budget",
    "PlanError",
    "divisors",
    "rate_filter",
    "rate_channel",
    "rate_split",
    "optimal_split",
    "count_params",
    "count_params_sliced",
    "count_flops",
]


class PlanError(ValueError):
    """Invalid decomposition configuration."""


@dataclass(frozen=True)
class LayerShape:
    n: int
    c: int
    w: int
    h: int

    def __post_init__(self):
        for name in ("n", "c", "w", "h"):
            if int(getattr(self, name)) < 1:
                raise PlanError(f"LayerShape.{name} must be >= 1, got {getattr(self, name)}")

    @property
    def params(self) -> int:
        return self.n * self.c * self.w * self.h


@dataclass
class PlanEntry:
    layer: str
    m: int
    s: int
    p: int
    share_group: Optional[str] = None

    def __post_init__(self):
        if self.m < 1:
            raise PlanError(f"{self.layer}: m must be >= 1, got {self.m}")
        if self.s < 1 or self.p < 1:
            raise PlanError(f"{self.layer}: s and p must be >= 1, got s={self.s}, p={self.p}")


@dataclass
class DecompositionPlan:
    entries: list[PlanEntry] = field(default_factory=list)
    flags: dict = field(default_factory=dict)

    def entry(self, layer: str) -> PlanEntry:
        for e in self.entries:
            if e.layer == layer:
                return e
        raise KeyError(layer)

    def check(self, shapes: dict[str, LayerShape]) -> None:
        for e in self.entries:
            c = shapes[e.layer].c
            if e.s * e.p != c:
                raise PlanError(f"{e.layer}: s*p = {e.s}*{e.p} != c = {c}")
            if e.s > c:
                raise PlanError(f"{e.layer}: s={e.s} exceeds c={c}")


@dataclass(frozen=True)
class Budget:
    params_original: int = 0
    params_compressed: int = 0
    flops_original: int = 0
    flops_compressed: int = 0

    @property
    def ratio(self) -> float:
        return self.params_compressed / self.params_original if self.params_original else 0.0

    @property
    def flop_ratio(self) -> float:
        return self.flops_compressed / self.flops_original if self.flops_original else 0.0

    def __add__(self, other: "Budget") -> "Budget":
        return Budget(
            self.params_original + other.params_original,
            self.params_compressed + other.params_compressed,
            self.flops_original + other.flops_original,
            self.flops_compressed + other.flops_compressed,
        )


def divisors(c: int) -> list[int]:
    small = [d for d in range(1, math.isqrt(c) + 1) if c % d == 0]
    return sorted(set(small + [c // d for d in small]))


def _split_depth(shape: LayerShape, s: int) -> int:
    if s < 1 or shape.c % s:
        raise PlanError(f"split count s={s} does not divide c={shape.c}")
    return shape.c // s


def rate_filter(shape: LayerShape, m: int) -> float:
    """Compression rate with ``m`` full-depth 3-D basis filters."""
    return m / shape.n + m / (shape.c * shape.w * shape.h)


def rate_channel(shape: LayerShape, m: int) -> float:
    """Compression rate with ``m`` 2-D (single-channel) basis kernels."""
    return m / (shape.n * shape.c) + m / (shape.w * shape.h)


def rate_split(shape: LayerShape, m: int, s: int) -> float:
    p = _split_depth(shape, s)
    return m / (shape.n * s) + m / (p * shape.w * shape.h)


def optimal_split(shape: LayerShape, m: int = 1) -> tuple[float, float, int, int]:
    """Continuous optimum (s*, p*) and its quantization to a divisor pair of ``c``.

    The rate ``a p + b / p`` is symmetric in ``log(p / p*)``, so the divisor of
    ``c`` nearest to ``p*`` in log distance is exactly the divisor that minimises
    the rate. Ties go to the smaller ``p``. The rate is linear in ``m``, so ``m``
    does not affect the result.
    """
    n, c, wh = shape.n, shape.c, shape.w * shape.h
    s_star = math.sqrt(c * wh / n)
    p_star = math.sqrt(n * c / wh)
    # squared log-distance ratio max(d, p*)^2 / min(d, p*)^2 kept as an integer fraction
    best, best_num, best_den = None, 0, 1
    for d in divisors(c):
        a, b = d * d * wh, n * c
        num, den = (a, b) if a >= b else (b, a)
        if best is None or num * best_den < best_num * den:
            best, best_num, best_den = d, num, den
    p_q = best
    return s_star, p_star, c // p_q, p_q


def count_params(shape: LayerShape, m: int, s: int = 1, shared_across: int = 1) -> Budget:
    """Parameters of ``shared_across`` same-shape layers using one shared basis."""
    if shared_across < 1:
        raise PlanError(f"shared_across must be >= 1, got {shared_across}")
    p = _split_depth(shape, s)
    basis = m * p * shape.w * shape.h
    coeffs = m * shape.n * s
    return Budget(
        params_original=shared_across * shape.params,
        params_compressed=basis + shared_across * coeffs,
    )


def count_params_sliced(shapes: list[LayerShape], m: int, basis_channels: int) -> Budget:
    """Network-wise sharing where every layer uses a channel prefix of one basis."""
    if not shapes:
        return Budget()
    kw = {(sh.w, sh.h) for sh in shapes}
    if len(kw) != 1:
        raise PlanError(f"sliced sharing needs one kernel size, got {sorted(kw)}")
    w, h = kw.pop()
    for sh in shapes:
        if sh.c > basis_channels:
            raise PlanError(f"layer with c={sh.c} exceeds shared basis depth {basis_channels}")
    return Budget(
        params_original=sum(sh.params for sh in shapes),
        params_compressed=m * basis_channels * w * h + sum(m * sh.n for sh in shapes),
    )


def count_flops(shape: LayerShape, m: int, s: int, out_h: int, out_w: int) -> Budget:
    """Multiply-accumulates per sample: basis stage plus the 1x1 combining convolution."""
    p = _split_depth(shape, s)
    hw = out_h * out_w
    params = count_params(shape, m, s)
    return Budget(
        params_original=params.params_original,
        params_compressed=params.params_compressed,
        flops_original=shape.params * hw,
        flops_compressed=(m * s) * p * shape.w * shape.h * hw + shape.n * (m * s) * hw,
    )
