"""Occupancy IoU, per-class IoU and mIoU over non-unknown voxels."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .grid import DenseLabelVolume


def confusion_matrix(pred: np.ndarray, target: np.ndarray, valid: np.ndarray,
                     num_classes: int) -> np.ndarray:
    """Counts indexed ``[target, pred]`` over ``valid`` voxels."""
    p = np.asarray(pred).ravel()[np.asarray(valid).ravel()]
    t = np.asarray(target).ravel()[np.asarray(valid).ravel()]
    if p.size and max(p.max(), t.max()) >= num_classes:
        raise ValueError(f"label >= num_classes ({num_classes})")
    return np.bincount(t * num_classes + p, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def _check(pred: DenseLabelVolume, target: DenseLabelVolume):
    if tuple(pred.dims) != tuple(target.dims):
        raise ValueError(f"prediction dims {pred.dims} != target dims {target.dims}")


def occupancy_iou_from_cm(cm: np.ndarray) -> float:
    tp = cm[1:, 1:].sum()
    fp = cm[0, 1:].sum()
    fn = cm[1:, 0].sum()
    denom = tp + fp + fn
    return float(tp / denom) if denom else 0.0


def class_iou_from_cm(cm: np.ndarray) -> np.ndarray:
    """IoU for classes ``1..C``; NaN where the class is absent from pred and target."""
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)
    return iou[1:]


def compute_iou(pred: DenseLabelVolume, target: DenseLabelVolume) -> float:
    _check(pred, target)
    occ_p = pred.labels != 0
    occ_t = target.labels != 0
    valid = ~target.unknown_mask
    cm = confusion_matrix(occ_p.astype(np.int64), occ_t.astype(np.int64), valid, 2)
    return occupancy_iou_from_cm(cm)


def compute_miou(pred: DenseLabelVolume, target: DenseLabelVolume, num_classes: int):
    """``(per-class IoU for 1..C, mIoU)``; absent classes are NaN and left out of the mean."""
    _check(pred, target)
    cm = confusion_matrix(pred.labels, target.labels, ~target.unknown_mask, num_classes)
    per = class_iou_from_cm(cm)
    present = ~np.isnan(per)
    return per, float(per[present].mean()) if present.any() else 0.0


@dataclass
class EvalReport:
    iou: float
    class_iou: np.ndarray
    miou: float
    confusion: np.ndarray

    @classmethod
    def from_confusion(cls, cm: np.ndarray) -> "EvalReport":
        per = class_iou_from_cm(cm)
        present = ~np.isnan(per)
        return cls(occupancy_iou_from_cm(cm), per,
                   float(per[present].mean()) if present.any() else 0.0, cm)

    def to_json(self) -> str:
        return json.dumps({
            "iou": self.iou,
            "miou": self.miou,
            "class_iou": [None if np.isnan(v) else float(v) for v in self.class_iou],
            "valid_voxels": int(self.confusion.sum()),
        }, sort_keys=True)

    def table(self, class_names=None) -> str:
        names = class_names or [f"class{i}" for i in range(1, len(self.class_iou) + 1)]
        lines = [f"{'occupancy IoU':<16}{self.iou:8.4f}"]
        for n, v in zip(names, self.class_iou):
            lines.append(f"{n:<16}{'   n/a' if np.isnan(v) else f'{v:8.4f}'}")
        lines.append(f"{'mIoU':<16}{self.miou:8.4f}")
        return "\n".join(lines)


class ConfusionAccumulator:
    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.cm = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred_labels: np.ndarray, target: DenseLabelVolume) -> None:
        self.cm += confusion_matrix(pred_labels, target.labels, ~target.unknown_mask, self.num_classes)

    def report(self) -> EvalReport:
        return EvalReport.from_confusion(self.cm)
