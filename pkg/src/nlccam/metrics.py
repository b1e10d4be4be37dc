"""Classification, localization and GT-known localization metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .localization import Box

IOU_THRESHOLD = 0.5
TOP_K = 5

METRICS = ("top1_cls", "top5_cls", "top1_loc", "top5_loc", "gt_known_loc")


def iou(a: Box, b: Box) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class EvalRecord:
    image_id: str
    label: int
    gt_boxes: Sequence[Box]
    top_classes: Sequence[int]  # up to 5, best first
    pred_box: Box
    top_probs: Sequence[float] = ()
    gt_known_box: Box | None = None  # judged for GT-known; falls back to pred_box

    def __post_init__(self):
        if not self.gt_boxes:
            raise ValueError(f"record {self.image_id} has no ground-truth box")
        if not self.top_classes or len(set(self.top_classes)) != len(self.top_classes):
            raise ValueError(f"record {self.image_id} needs distinct top classes")


@dataclass(frozen=True)
class Judgment:
    cls1_ok: bool
    cls5_ok: bool
    loc1_ok: bool
    loc5_ok: bool
    gtknown_ok: bool


def box_correct(pred: Box, gt_boxes: Iterable[Box]) -> bool:
    """IoU strictly above 0.5 with any ground-truth box."""
    return max(iou(pred, gt) for gt in gt_boxes) > IOU_THRESHOLD


def judge(record: EvalRecord) -> Judgment:
    cls1 = record.top_classes[0] == record.label
    cls5 = record.label in list(record.top_classes)[:TOP_K]
    box_ok = box_correct(record.pred_box, record.gt_boxes)
    known_box = record.gt_known_box if record.gt_known_box is not None else record.pred_box
    return Judgment(cls1, cls5, cls1 and box_ok, cls5 and box_ok, box_correct(known_box, record.gt_boxes))


@dataclass(frozen=True)
class MetricRow:
    name: str
    correct: int
    total: int

    @property
    def accuracy(self) -> float:
        return 100.0 * self.correct / self.total

    @property
    def error(self) -> float:
        return 100.0 - self.accuracy


@dataclass(frozen=True)
class ErrorReport:
    rows: tuple[MetricRow, ...]

    def __getitem__(self, name: str) -> MetricRow:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)

    def errors(self) -> dict[str, float]:
        return {row.name: row.error for row in self.rows}


def aggregate(records: Sequence[EvalRecord], metrics: Sequence[str] = METRICS) -> ErrorReport:
    """Error percentages (100 - accuracy) for each judgment over ``records``."""
    if not records:
        raise ValueError("cannot aggregate an empty record list")
    judgments = [judge(r) for r in records]
    attrs = {
        "top1_cls": "cls1_ok",
        "top5_cls": "cls5_ok",
        "top1_loc": "loc1_ok",
        "top5_loc": "loc5_ok",
        "gt_known_loc": "gtknown_ok",
    }
    rows = []
    for name in metrics:
        correct = sum(1 for j in judgments if getattr(j, attrs[name]))
        rows.append(MetricRow(name, correct, len(judgments)))
    return ErrorReport(tuple(rows))
