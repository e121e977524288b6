"""Segmentation and regression evaluation: confusion-matrix statistics
(per-class IoU, mIoU, mAcc, overall accuracy) and elementwise regression
errors, plus the CSV/table reporting used by the CLI.
"""

from __future__ import annotations

import numpy as np


class MetricError(ValueError):
    """Raised for empty matrices, bad labels, or shape mismatches."""


class ConfusionMatrix:
    """Pixel-count confusion matrix; rows are ground truth, columns are
    predictions. Supports parallel accumulation by merging partial matrices
    with ``+`` (accumulation is associative)."""

    def __init__(self, num_classes: int, ignore_label: int | None = None):
        if num_classes < 1:
            raise MetricError(f"num_classes must be >= 1, got {num_classes}")
        self.num_classes = num_classes
        self.ignore_label = ignore_label
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred, true) -> "ConfusionMatrix":
        """Add one batch of label maps. ``pred`` and ``true`` must be shape-
        equal integer arrays; ignore-labeled pixels are skipped."""
        pred = np.asarray(pred)
        true = np.asarray(true)
        if pred.shape != true.shape:
            raise MetricError(f"pred shape {pred.shape} != true shape {true.shape}")
        pred = pred.reshape(-1).astype(np.int64)
        true = true.reshape(-1).astype(np.int64)
        if self.ignore_label is not None:
            keep = true != self.ignore_label
            pred, true = pred[keep], true[keep]
        bad = (true < 0) | (true >= self.num_classes)
        if bad.any():
            raise MetricError(f"ground-truth label {true[bad][0]} out of range "
                              f"[0, {self.num_classes})")
        bad = (pred < 0) | (pred >= self.num_classes)
        if bad.any():
            raise MetricError(f"predicted label {pred[bad][0]} out of range "
                              f"[0, {self.num_classes})")
        flat = true * self.num_classes + pred
        self.counts += np.bincount(flat, minlength=self.num_classes ** 2).reshape(
            self.num_classes, self.num_classes)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise MetricError("cannot merge confusion matrices of different sizes")
        out = ConfusionMatrix(self.num_classes, self.ignore_label)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def _require_nonempty(self):
        if self.total == 0:
            raise MetricError("confusion matrix is empty (no scored pixels)")

    def class_support(self, c: int) -> int:
        return int(self.counts[c].sum())

    def iou(self, c: int) -> float:
        """TP / (TP + FP + FN) for class ``c``."""
        self._require_nonempty()
        tp = self.counts[c, c]
        union = self.counts[c].sum() + self.counts[:, c].sum() - tp
        if union == 0:
            raise MetricError(f"class {c} has no ground-truth or predicted pixels")
        return float(tp / union)

    def per_class_iou(self) -> list[float]:
        """IoU per class; NaN for classes absent from both truth and
        prediction."""
        self._require_nonempty()
        out = []
        for c in range(self.num_classes):
            tp = self.counts[c, c]
            union = self.counts[c].sum() + self.counts[:, c].sum() - tp
            out.append(float(tp / union) if union > 0 else float("nan"))
        return out

    def miou(self) -> float:
        """Mean IoU over classes with nonzero ground-truth support."""
        self._require_nonempty()
        vals = [self.iou(c) for c in range(self.num_classes) if self.class_support(c) > 0]
        if not vals:
            raise MetricError("no class has ground-truth support")
        return float(np.mean(vals))

    def macc(self) -> float:
        """Mean per-class recall over classes with nonzero support."""
        self._require_nonempty()
        vals = [
            float(self.counts[c, c] / self.counts[c].sum())
            for c in range(self.num_classes) if self.class_support(c) > 0
        ]
        if not vals:
            raise MetricError("no class has ground-truth support")
        return float(np.mean(vals))

    def overall_acc(self) -> float:
        """trace / total scored pixels."""
        self._require_nonempty()
        return float(np.trace(self.counts) / self.total)


def regression_metrics(pred, true, valid=None) -> dict[str, float]:
    """Elementwise MSE and mean absolute error over valid pixels."""
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape:
        raise MetricError(f"pred shape {pred.shape} != true shape {true.shape}")
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != pred.shape:
            raise MetricError(f"valid mask shape {valid.shape} != pred shape {pred.shape}")
        pred, true = pred[valid], true[valid]
    if pred.size == 0:
        raise MetricError("no valid pixels to score")
    diff = pred - true
    return {"mse": float(np.mean(diff ** 2)), "mae": float(np.mean(np.abs(diff)))}


def metrics_row(name: str, cm: ConfusionMatrix) -> dict:
    """One report row in the column layout used by the CLI tables."""
    row: dict = {"method": name}
    for c, v in enumerate(cm.per_class_iou()):
        row[f"iou_{c}"] = v
    row["miou"] = cm.miou()
    row["macc"] = cm.macc()
    row["overall_acc"] = cm.overall_acc()
    return row


def format_table(rows: list[dict]) -> str:
    """Aligned text table: one method per row, IoU per class then the means."""
    if not rows:
        return "(no rows)"
    cols = list(rows[0].keys())
    rendered = [
        [("" if isinstance(r.get(c), float) and np.isnan(r[c])
          else f"{r[c]:.4f}" if isinstance(r[c], float) else str(r.get(c, "")))
         for c in cols]
        for r in rows
    ]
    widths = [max(len(c), *(len(row[i]) for row in rendered)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rendered:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    return "\n".join(lines)
