"""Dense tensor backbone: 4-D tensors, reference convolution, matmul and truncated SVD.

Tensors are plain float64 numpy arrays. A 4-D tensor is laid out (n, c, h, w)
in row-major order; a matrix is 2-D row-major. ``conv2d`` uses the
cross-correlation convention of deep-learning frameworks: the kernel is *not*
flipped.
"""
from __future__ import annotations

import contextlib
import contextvars
from typing import Iterator, NamedTuple

import numpy as np

__all__ = [
    "ShapeError",
    "ConvergenceError",
    "SvdResult",
    "MacCounter",
    "as_tensor4",
    "as_matrix",
    "conv2d",
    "conv2d_backward",
    "conv_output_size",
    "matmul",
    "truncated_svd",
    "jacobi_svd",
    "randomized_svd",
    "count_macs",
]

JACOBI_MAX_COLS = 512
JACOBI_MAX_SWEEPS = 60
RSVD_OVERSAMPLE = 8
RSVD_POWER_ITERS = 2
RSVD_SEED = 0


class ShapeError(ValueError):
    """Raised when array dimensions are inconsistent."""


class ConvergenceError(RuntimeError):
    """An iterative decomposition hit its iteration cap."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


class SvdResult(NamedTuple):
    u: np.ndarray  # rows x k, orthonormal columns
    sigma: np.ndarray  # k, non-increasing, >= 0
    vt: np.ndarray  # k x cols, orthonormal rows

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.vt


# --------------------------------------------------------------------------
# MAC instrumentation

class MacCounter:
    def __init__(self) -> None:
        self.total = 0

    def add(self, n: int) -> None:
        self.total += int(n)


_counter: contextvars.ContextVar[MacCounter | None] = contextvars.ContextVar(
    "filterbasis_mac_counter", default=None
)


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Count multiply-accumulates performed by ``matmul``/``conv2d`` inside the block."""
    counter = MacCounter()
    token = _counter.set(counter)
    try:
        yield counter
    finally:
        _counter.reset(token)


def _tally(n: int) -> None:
    counter = _counter.get()
    if counter is not None:
        counter.add(n)


# --------------------------------------------------------------------------
# shapes

def as_tensor4(a, name: str = "tensor") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (n, c, h, w), got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {arr.shape}")
    return arr


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: a is {a.shape}, b is {b.shape}; inner dimensions differ")
    _tally(a.shape[0] * a.shape[1] * b.shape[1])
    return a @ b


# --------------------------------------------------------------------------
# convolution (im2col + matmul)

def _check_conv(x: np.ndarray, weight: np.ndarray, stride: int, pad: int) -> tuple[int, int]:
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(
            f"conv2d: input has {x.shape[1]} channels but weight expects {weight.shape[1]} "
            f"(x {x.shape}, weight {weight.shape})"
        )
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if pad < 0:
        raise ShapeError(f"conv2d: pad must be >= 0, got {pad}")
    out_h = conv_output_size(x.shape[2], weight.shape[2], stride, pad)
    out_w = conv_output_size(x.shape[3], weight.shape[3], stride, pad)
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            f"conv2d: kernel {weight.shape[2:]} does not fit input {x.shape[2:]} with pad {pad}"
        )
    return out_h, out_w


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int,
            out_h: int, out_w: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C*kh*kw, out_h*out_w), rows ordered (c, i, j)."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : (out_h - 1) * stride + 1 : stride, : (out_w - 1) * stride + 1 : stride]
    # win: (N, C, out_h, out_w, kh, kw)
    n, c = x.shape[:2]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, out_h * out_w)


def _col2im(cols: np.ndarray, x_shape: tuple, kh: int, kw: int, stride: int, pad: int,
            out_h: int, out_w: int) -> np.ndarray:
    n, c, h, w = x_shape
    cols = cols.reshape(n, c, kh, kw, out_h, out_w)
    dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += cols[:, :, i, j]
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return dx


def conv2d(x, weight, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Zero-padded 2-D cross-correlation.

    ``x`` is (N, C, H, W), ``weight`` is (n, C, kh, kw); the result is
    (N, n, (H + 2 pad - kh) // stride + 1, (W + 2 pad - kw) // stride + 1).
    """
    x = as_tensor4(x, "x")
    weight = as_tensor4(weight, "weight")
    out_h, out_w = _check_conv(x, weight, stride, pad)
    n_out, c, kh, kw = weight.shape
    cols = _im2col(x, kh, kw, stride, pad, out_h, out_w)
    _tally(x.shape[0] * n_out * c * kh * kw * out_h * out_w)
    out = np.matmul(weight.reshape(n_out, -1), cols)
    return out.reshape(x.shape[0], n_out, out_h, out_w)


def conv2d_backward(x, weight, dout, stride: int = 1, pad: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``conv2d`` w.r.t. its input and weight given the output gradient."""
    x = as_tensor4(x, "x")
    weight = as_tensor4(weight, "weight")
    out_h, out_w = _check_conv(x, weight, stride, pad)
    n_out, c, kh, kw = weight.shape
    dout = np.asarray(dout, dtype=np.float64).reshape(x.shape[0], n_out, out_h * out_w)
    cols = _im2col(x, kh, kw, stride, pad, out_h, out_w)
    dw = np.einsum("nop,nkp->ok", dout, cols).reshape(weight.shape)
    dcols = np.matmul(weight.reshape(n_out, -1).T, dout)
    dx = _col2im(dcols, x.shape, kh, kw, stride, pad, out_h, out_w)
    return dx, dw


# --------------------------------------------------------------------------
# SVD

def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings covering every (i, j), i < j, once per sweep; n must be even."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        left = players[: n // 2]
        right = players[n // 2 :][::-1]
        p = np.array([min(a, b) for a, b in zip(left, right)])
        q = np.array([max(a, b) for a, b in zip(left, right)])
        rounds.append((p, q))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _orthonormal_fill(u: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace the columns of ``u`` not flagged ``good`` by an orthonormal completion."""
    if good.all():
        return u
    rows = u.shape[0]
    keep = u[:, good]
    candidates = np.concatenate([keep, np.eye(rows)], axis=1)
    q, _ = np.linalg.qr(candidates)
    extra = q[:, keep.shape[1] :]
    # project out kept columns once more for safety
    extra = extra - keep @ (keep.T @ extra)
    out = u.copy()
    bad_idx = np.flatnonzero(~good)
    fill = []
    for col in extra.T:
        nrm = np.linalg.norm(col)
        if nrm > 1e-8:
            col = col / nrm
            if fill:
                basis = np.stack(fill, axis=1)
                col = col - basis @ (basis.T @ col)
                nrm = np.linalg.norm(col)
                if nrm < 1e-8:
                    continue
                col = col / nrm
            fill.append(col)
        if len(fill) == len(bad_idx):
            break
    out[:, bad_idx] = np.stack(fill, axis=1)
    return out


def _fix_signs(u: np.ndarray, vt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, vt * signs[:, None]


def _jacobi_tall(a: np.ndarray, max_sweeps: int) -> SvdResult:
    """One-sided (Hestenes) Jacobi on a matrix with rows >= cols."""
    rows, cols = a.shape
    n = cols + (cols % 2)
    # row k of `state` holds column k of the working matrix followed by column k of V
    state = np.zeros((n, rows + n))
    state[:cols, :rows] = a.T
    state[:, rows:] = np.eye(n)
    tol = np.finfo(np.float64).eps * max(rows, 1)
    schedule = _round_robin(n) if n > 1 else []
    off = 0.0
    for _ in range(max_sweeps):
        off = 0.0
        for p, q in schedule:
            sp, sq = state[p], state[q]
            ap, aq = sp[:, :rows], sq[:, :rows]
            alpha = np.einsum("ij,ij->i", ap, ap)
            beta = np.einsum("ij,ij->i", aq, aq)
            gamma = np.einsum("ij,ij->i", ap, aq)
            scale = np.sqrt(alpha * beta)
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(scale > 0, np.abs(gamma) / scale, 0.0)
            off = max(off, float(ratio.max(initial=0.0)))
            rot = ratio > tol
            if not rot.any():
                continue
            zeta = np.where(rot, (beta - alpha) / np.where(rot, 2.0 * gamma, 1.0), 0.0)
            t = np.where(rot, np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta)), 0.0)
            t = np.where(rot & (zeta == 0), 1.0, t)
            c = (1.0 / np.sqrt(1.0 + t * t))[:, None]
            s = c * t[:, None]
            state[p], state[q] = c * sp - s * sq, s * sp + c * sq
        if off <= tol:
            break
    else:
        raise ConvergenceError(f"Jacobi SVD did not converge in {max_sweeps} sweeps", off)
    work, v = state[:cols, :rows].T, state[:cols, rows : rows + cols].T
    sigma = np.linalg.norm(work, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work, v = work[:, order], v[:, order]
    good = sigma > sigma[0] * 1e-14 if cols and sigma[0] > 0 else np.zeros(cols, dtype=bool)
    u = np.zeros_like(work)
    u[:, good] = work[:, good] / sigma[good]
    sigma = np.where(good, sigma, 0.0)
    u = _orthonormal_fill(u, good)
    return SvdResult(u, sigma, v.T)


def jacobi_svd(m, max_sweeps: int = JACOBI_MAX_SWEEPS) -> SvdResult:
    """Thin SVD by one-sided Jacobi rotations; exact up to rounding."""
    m = as_matrix(m)
    if m.shape[0] >= m.shape[1]:
        return _signed(_jacobi_tall_qr(m, max_sweeps))
    res = _jacobi_tall_qr(m.T, max_sweeps)
    return _signed(SvdResult(res.vt.T, res.sigma, res.u.T))


def _jacobi_tall_qr(a: np.ndarray, max_sweeps: int) -> SvdResult:
    # QR first so rotations act on a square cols x cols factor
    if a.shape[0] <= a.shape[1]:
        return _jacobi_tall(a, max_sweeps)
    q, r = np.linalg.qr(a)
    res = _jacobi_tall(r, max_sweeps)
    return SvdResult(q @ res.u, res.sigma, res.vt)


def _signed(res: SvdResult) -> SvdResult:
    u, vt = _fix_signs(res.u, res.vt)
    return SvdResult(u, res.sigma, vt)


def randomized_svd(m, k: int, oversample: int = RSVD_OVERSAMPLE,
                   power_iters: int = RSVD_POWER_ITERS, seed: int = RSVD_SEED) -> SvdResult:
    """Randomized range finder with subspace (power) iteration, then Jacobi on the sketch."""
    m = as_matrix(m)
    rows, cols = m.shape
    width = min(k + oversample, rows, cols)
    rng = np.random.default_rng(seed)
    omega = rng.standard_normal((cols, width))
    q, _ = np.linalg.qr(m @ omega)
    for _ in range(power_iters):
        z, _ = np.linalg.qr(m.T @ q)
        q, _ = np.linalg.qr(m @ z)
    small = jacobi_svd(q.T @ m)
    u = q @ small.u
    return _signed(SvdResult(u[:, :k], small.sigma[:k], small.vt[:k]))


def truncated_svd(m, k: int) -> SvdResult:
    """Rank-``k`` SVD: the Frobenius-optimal rank-k approximation of ``m``.

    Uses one-sided Jacobi when the smaller dimension is at most 512 and a
    fixed-seed randomized subspace iteration otherwise. Signs are fixed so
    the largest-magnitude entry of every left singular vector is positive.
    """
    m = as_matrix(m)
    if not 1 <= k <= min(m.shape):
        raise ValueError(f"truncated_svd: k={k} outside [1, {min(m.shape)}] for shape {m.shape}")
    if min(m.shape) <= JACOBI_MAX_COLS:
        full = jacobi_svd(m)
        return SvdResult(full.u[:, :k], full.sigma[:k], full.vt[:k])
    return randomized_svd(m, k)
