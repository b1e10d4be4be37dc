"""Dense-array kernels used by the rest of the pipeline.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Every public
function checks shapes up front and raises :class:`DimensionError` on a
mismatch instead of relying on numpy broadcasting.
"""

from __future__ import annotations

import numpy as np

Tensor = np.ndarray


class DimensionError(ValueError):
    """Raised when tensor shapes do not fit an operation."""


def as_tensor(values, rank: int | None = None, name: str = "tensor") -> Tensor:
    """Convert ``values`` to a float64 array and check its rank (1 to 4)."""
    t = np.asarray(values, dtype=np.float64)
    if rank is not None and t.ndim != rank:
        raise DimensionError(f"{name} must have rank {rank}, got shape {t.shape}")
    if not 1 <= t.ndim <= 4:
        raise DimensionError(f"{name} rank must be 1..4, got shape {t.shape}")
    if any(extent < 1 for extent in t.shape):
        raise DimensionError(f"{name} has a zero extent: {t.shape}")
    return t


def matmul(a, b) -> Tensor:
    a = as_tensor(a, 2, "a")
    b = as_tensor(b, 2, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def softmax(v) -> Tensor:
    """Numerically stable softmax of a vector."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError(f"softmax expects a non-empty vector, got shape {v.shape}")
    e = np.exp(v - v.max())
    return e / e.sum()


def spatial_mean(f) -> Tensor:
    """Global average pooling: C x H x W -> C."""
    f = as_tensor(f, 3, "f")
    return f.mean(axis=(1, 2))


def _sample_grid(src: int, dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # align-corners: output index 0 -> source 0, output dst-1 -> source src-1
    if dst == 1 or src == 1:
        pos = np.zeros(dst)
    else:
        pos = np.arange(dst) * ((src - 1) / (dst - 1))
    lo = np.minimum(np.floor(pos).astype(np.int64), src - 1)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, pos - lo


def bilinear_resize(m, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear resize of a 2-D map."""
    m = as_tensor(m, 2, "map")
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"target size must be positive, got {out_h}x{out_w}")
    h, w = m.shape
    if (h, w) == (out_h, out_w):
        return m.copy()
    y0, y1, wy = _sample_grid(h, out_h)
    x0, x1, wx = _sample_grid(w, out_w)
    wy = wy[:, None]
    wx = wx[None, :]
    top = m[y0][:, x0] * (1 - wx) + m[y0][:, x1] * wx
    bottom = m[y1][:, x0] * (1 - wx) + m[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy
