"""Confusion matrices, classification metrics, and worst-loss ranking.

Per-class counts follow the usual one-vs-rest reading of a K x K count
grid: true positives sit on the diagonal, false positives down the
column, false negatives along the row, true negatives everywhere else.
Micro averages pool those counts first; for single-label multi-class
data this makes micro precision, recall, and F1 all collapse onto
accuracy. Macro averages are reported alongside since they stay
informative under class imbalance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .report_io import write_csv, write_json
from .tensor import log_softmax


@dataclass
class ConfusionMatrix:
    """K x K counts; rows are ground truth, columns are predictions."""

    counts: np.ndarray
    class_names: list

    @property
    def total(self):
        return int(self.counts.sum())

    def save_json(self, path):
        write_json(path, {"class_names": list(self.class_names),
                          "counts": self.counts.tolist()})

    def save_csv(self, path):
        header = ["true\\pred"] + list(self.class_names)
        rows = [[name] + row for name, row in zip(self.class_names, self.counts.tolist())]
        write_csv(path, header, rows)


def confusion(true_labels, predicted_labels, num_classes, class_names=None):
    true_labels = np.asarray(true_labels, dtype=np.int64)
    predicted_labels = np.asarray(predicted_labels, dtype=np.int64)
    if true_labels.shape != predicted_labels.shape:
        raise DataError(
            f"label vectors differ in length: {true_labels.shape} vs {predicted_labels.shape}")
    for name, vec in (("true", true_labels), ("predicted", predicted_labels)):
        if vec.size and (vec.min() < 0 or vec.max() >= num_classes):
            raise DataError(f"{name} labels outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (true_labels, predicted_labels), 1)
    if class_names is None:
        class_names = [str(i) for i in range(num_classes)]
    return ConfusionMatrix(counts, list(class_names))


@dataclass
class MetricsReport:
    accuracy: float
    error_rate: float
    precision_micro: float
    recall_micro: float
    f1_micro: float
    precision_macro: float
    recall_macro: float
    f1_macro: float
    per_class_precision: list
    per_class_recall: list
    per_class_f1: list
    degenerate_classes: list  # classes whose precision or recall had a zero denominator

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "error_rate": self.error_rate,
            "precision": self.precision_micro,
            "recall": self.recall_micro,
            "f1": self.f1_micro,
            "precision_macro": self.precision_macro,
            "recall_macro": self.recall_macro,
            "f1_macro": self.f1_macro,
            "per_class_precision": self.per_class_precision,
            "per_class_recall": self.per_class_recall,
            "per_class_f1": self.per_class_f1,
            "degenerate_classes": self.degenerate_classes,
        }

    def save_json(self, path):
        write_json(path, self.to_dict())


def _safe_ratio(num, den):
    return num / den if den > 0 else 0.0


def _prf(tp, fp, fn):
    precision = _safe_ratio(tp, tp + fp)
    recall = _safe_ratio(tp, tp + fn)
    f1 = _safe_ratio(2.0 * precision * recall, precision + recall)
    return precision, recall, f1


def metrics(matrix: ConfusionMatrix) -> MetricsReport:
    """Precision/recall/F1 (micro and macro), accuracy, and error rate.

    Zero-denominator classes score 0 and are flagged rather than dropped,
    keeping macro averages defined on degenerate folds.
    """
    counts = matrix.counts
    total = counts.sum()
    if total < 1:
        raise DataError("confusion matrix is empty")
    k = counts.shape[0]
    diag = np.diag(counts)
    col = counts.sum(axis=0)
    row = counts.sum(axis=1)
    per_p, per_r, per_f, degenerate = [], [], [], []
    for c in range(k):
        tp = diag[c]
        fp = col[c] - tp
        fn = row[c] - tp
        p, r, f = _prf(float(tp), float(fp), float(fn))
        if tp + fp == 0 or tp + fn == 0:
            degenerate.append(matrix.class_names[c])
        per_p.append(p)
        per_r.append(r)
        per_f.append(f)
    pooled_tp = float(diag.sum())
    pooled_fp = float(total - diag.sum())
    micro_p, micro_r, micro_f = _prf(pooled_tp, pooled_fp, pooled_fp)
    accuracy = pooled_tp / total
    return MetricsReport(
        accuracy=accuracy,
        error_rate=1.0 - accuracy,
        precision_micro=micro_p,
        recall_micro=micro_r,
        f1_micro=micro_f,
        precision_macro=float(np.mean(per_p)),
        recall_macro=float(np.mean(per_r)),
        f1_macro=float(np.mean(per_f)),
        per_class_precision=per_p,
        per_class_recall=per_r,
        per_class_f1=per_f,
        degenerate_classes=degenerate,
    )


@dataclass
class TopLossEntry:
    sample_id: str
    predicted: int
    true: int
    loss: float


def per_sample_losses(model, batch_list):
    """Cross-entropy per validation sample, plus predictions and truths.

    Returns (ids, losses, predicted, true) in stream order; the mean of
    ``losses`` is exactly the reported validation loss.
    """
    ids, losses, preds, trues = [], [], [], []
    for batch in batch_list:
        scores = model.forward(batch.x, training=False).data
        logp = log_softmax(scores)
        idx = np.arange(len(batch.y))
        losses.extend((-logp[idx, batch.y]).tolist())
        preds.extend(scores.argmax(axis=1).tolist())
        trues.extend(batch.y.tolist())
        ids.extend(batch.ids)
    return ids, np.array(losses), np.array(preds, dtype=np.int64), np.array(trues, dtype=np.int64)


def top_losses(model, batch_list, n):
    """The n validation samples the model gets most confidently wrong."""
    ids, losses, preds, trues = per_sample_losses(model, batch_list)
    order = sorted(range(len(ids)), key=lambda i: (-losses[i], i))
    return [TopLossEntry(ids[i], int(preds[i]), int(trues[i]), float(losses[i]))
            for i in order[:max(n, 0)]]
