"""Per-image localization pipeline shared by the CLI and the experiments.

forward -> rank classes -> combined map -> box -> judgment
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cam_engine import ClassRanking, ccam, class_map, gt_known_ccam, rank_classes
from .combiner import CombinationFn
from .localization import Box, bbox_from_map, normalize_map
from .metrics import TOP_K, EvalRecord, ErrorReport, aggregate
from .model import Checkpoint, predict
from .synth_data import Dataset, background_suppression_score
from .tensor_core import bilinear_resize


@dataclass
class Prediction:
    """Model outputs for one image."""

    image_id: str
    label: int
    gt_boxes: tuple[Box, ...]
    features: np.ndarray  # N x H x W
    ranking: ClassRanking

    @property
    def correct(self) -> bool:
        return self.ranking.order[0] == self.label


def predict_dataset(ds: Dataset, ckpt: Checkpoint) -> list[Prediction]:
    _, feats = predict(ds.images, ckpt)
    out = []
    for image_id, label, boxes, f in zip(ds.ids, ds.labels, ds.boxes, feats):
        ranking = rank_classes(f.mean(axis=(1, 2)), ckpt.fc)
        out.append(Prediction(image_id, int(label), tuple(boxes), f, ranking))
    return sorted(out, key=lambda p: p.image_id)


def localization_map(pred: Prediction, ckpt: Checkpoint, g: CombinationFn,
                     gt_known: bool = False) -> np.ndarray:
    if gt_known:
        return gt_known_ccam(pred.features, ckpt.fc, pred.label, pred.ranking, g)
    return ccam(pred.features, ckpt.fc, pred.ranking, g)


def rank_maps(pred: Prediction, ckpt: Checkpoint, ranks: Sequence[int]) -> list[np.ndarray]:
    """Activation maps for the given 1-based ranks."""
    return [class_map(pred.features, ckpt.fc, pred.ranking.order[k - 1]) for k in ranks]


def make_record(pred: Prediction, ckpt: Checkpoint, g: CombinationFn, tau: float,
                image_size: tuple[int, int], gt_known: bool = False) -> EvalRecord:
    h, w = image_size
    box = bbox_from_map(localization_map(pred, ckpt, g), tau, h, w)
    known = None
    if gt_known:
        known = bbox_from_map(localization_map(pred, ckpt, g, gt_known=True), tau, h, w)
    top = pred.ranking.order[:TOP_K]
    return EvalRecord(
        pred.image_id,
        pred.label,
        pred.gt_boxes,
        top,
        box,
        tuple(float(p) for p in pred.ranking.probs[:TOP_K]),
        known,
    )


def evaluate(preds: Sequence[Prediction], ckpt: Checkpoint, g: CombinationFn, tau: float,
             gt_known: bool = False) -> tuple[list[EvalRecord], ErrorReport]:
    size = ckpt.config.image_size
    records = [make_record(p, ckpt, g, tau, size, gt_known) for p in preds]
    metrics = ("top1_cls", "top5_cls", "top1_loc", "top5_loc")
    if gt_known:
        metrics += ("gt_known_loc",)
    return records, aggregate(records, metrics)


def suppression_scores(preds: Sequence[Prediction], ckpt: Checkpoint, g: CombinationFn,
                       gt_known: bool = True) -> np.ndarray:
    """Background suppression score of each image's normalized, upsampled map."""
    h, w = ckpt.config.image_size
    scores = []
    for p in preds:
        m = normalize_map(bilinear_resize(localization_map(p, ckpt, g, gt_known), h, w))
        scores.append(background_suppression_score(m, p.gt_boxes[0]))
    return np.array(scores)
