"""Bounding boxes from localization maps by thresholding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .tensor_core import as_tensor, bilinear_resize

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True, order=True)
class Box:
    """Pixel rectangle; x0, y0 inclusive and x1, y1 exclusive."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (0 <= self.x0 < self.x1 and 0 <= self.y0 < self.y1):
            raise ValueError(f"invalid box {self.as_tuple()}")

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)

    def fits(self, height: int, width: int) -> bool:
        return self.x1 <= width and self.y1 <= height


def normalize_map(m) -> np.ndarray:
    """Min-max rescale to [0, 1]; a constant map becomes all zeros.

    A spread at roundoff level (as left by resizing a constant map) also
    counts as constant.
    """
    m = as_tensor(m, 2, "map")
    lo, hi = m.min(), m.max()
    if hi - lo <= 1e-12 * max(abs(hi), abs(lo)):
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def threshold_mask(m, tau: float, out_h: int, out_w: int) -> np.ndarray:
    if not 0.0 < tau < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {tau}")
    return normalize_map(bilinear_resize(m, out_h, out_w)) >= tau


def largest_component(mask: np.ndarray) -> np.ndarray | None:
    """Boolean mask of the largest 8-connected component, or None if the mask is empty.

    Equal-area components resolve to the one whose first cell comes first in
    row-major order (scipy numbers components in that order).
    """
    labels, count = ndimage.label(mask, structure=EIGHT_CONNECTED)
    if count == 0:
        return None
    areas = np.bincount(labels.ravel())[1:]
    return labels == int(np.argmax(areas)) + 1


def tight_box(mask: np.ndarray) -> Box:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return Box(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def bbox_from_map(m, tau: float = 0.2, out_h: int | None = None, out_w: int | None = None) -> Box:
    """Resize, normalize, threshold at ``tau``, box the largest component.

    An empty mask (only possible for a constant map) yields the full image.
    """
    m = as_tensor(m, 2, "map")
    out_h = m.shape[0] if out_h is None else out_h
    out_w = m.shape[1] if out_w is None else out_w
    component = largest_component(threshold_mask(m, tau, out_h, out_w))
    if component is None:
        return Box(0, 0, out_w, out_h)
    return tight_box(component)
