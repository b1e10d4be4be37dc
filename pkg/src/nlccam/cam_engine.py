"""Class ranking and (combinational) class activation maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .combiner import CombinationFn, weights_vector
from .tensor_core import DimensionError, as_tensor, softmax


@dataclass(frozen=True)
class ClassRanking:
    order: tuple[int, ...]  # order[k-1] is the class at rank k
    probs: np.ndarray  # softmax probabilities aligned with order
    scores: np.ndarray  # raw class scores, indexed by class id

    def __len__(self) -> int:
        return len(self.order)

    def rank_of(self, cls: int) -> int:
        return self.order.index(cls) + 1


def _check_fc(f_channels: int, w_fc: np.ndarray) -> None:
    if w_fc.ndim != 2 or w_fc.shape[0] != f_channels:
        raise DimensionError(
            f"FC weights {w_fc.shape} do not match {f_channels} feature channels"
        )


def rank_classes(F, w_fc) -> ClassRanking:
    F = as_tensor(F, 1, "F")
    w_fc = as_tensor(w_fc, 2, "W_fc")
    _check_fc(F.shape[0], w_fc)
    scores = F @ w_fc
    # stable sort on -score keeps ascending class index among ties
    order = np.argsort(-scores, kind="stable")
    return ClassRanking(tuple(int(c) for c in order), softmax(scores)[order], scores)


def class_map(f, w_fc, c: int) -> np.ndarray:
    """Activation map of class ``c``: sum_n w[n, c] * f[n]."""
    f = as_tensor(f, 3, "f")
    w_fc = as_tensor(w_fc, 2, "W_fc")
    _check_fc(f.shape[0], w_fc)
    if not 0 <= c < w_fc.shape[1]:
        raise ValueError(f"class {c} outside [0, {w_fc.shape[1]})")
    return np.tensordot(w_fc[:, c], f, axes=1)


def ccam(f, w_fc, ranking: ClassRanking, g: CombinationFn) -> np.ndarray:
    """Combined map sum_k g(k) * M^{c_k}, computed via one merged weight vector."""
    f = as_tensor(f, 3, "f")
    w_fc = as_tensor(w_fc, 2, "W_fc")
    _check_fc(f.shape[0], w_fc)
    num_classes = w_fc.shape[1]
    if len(ranking) != num_classes:
        raise DimensionError(f"ranking covers {len(ranking)} classes, FC has {num_classes}")
    merged = w_fc[:, list(ranking.order)] @ weights_vector(g, num_classes)
    return np.tensordot(merged, f, axes=1)


def ccam_naive(f, w_fc, ranking: ClassRanking, g: CombinationFn) -> np.ndarray:
    """Reference path: sum of individually weighted class maps."""
    coeffs = weights_vector(g, len(ranking))
    out = np.zeros(np.shape(f)[1:])
    for k, cls in enumerate(ranking.order):
        out = out + coeffs[k] * class_map(f, w_fc, cls)
    return out


def force_top(ranking: ClassRanking, cls: int) -> ClassRanking:
    """Move ``cls`` to rank 1; the other classes keep their relative order."""
    if cls not in ranking.order:
        raise ValueError(f"class {cls} outside [0, {len(ranking)})")
    pos = ranking.order.index(cls)
    perm = [pos] + [i for i in range(len(ranking)) if i != pos]
    return ClassRanking(
        tuple(ranking.order[i] for i in perm), ranking.probs[perm], ranking.scores
    )


def gt_known_ccam(f, w_fc, gt: int, ranking: ClassRanking, g: CombinationFn) -> np.ndarray:
    return ccam(f, w_fc, force_top(ranking, gt), g)
