"""Confusion matrices and per-artist accuracy, precision, recall and F1."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

N_ARTISTS = 4


def confusion(pairs, n_classes: int = N_ARTISTS) -> np.ndarray:
    """Count ``(true, predicted)`` label pairs (labels 1..n) into an n x n matrix.

    Rows index the true artist, columns the predicted one.
    """
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    pairs = list(pairs)
    if not pairs:
        return cm
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if arr.min() < 1 or arr.max() > n_classes:
        raise ValueError(f"labels must lie in 1..{n_classes}")
    np.add.at(cm, (arr[:, 0] - 1, arr[:, 1] - 1), 1)
    return cm


def _ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


@dataclass
class ScoreReport:
    accuracy: float
    f1: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    total: int
    trials: int = 1
    acc_std: float = 0.0
    accuracies: list = field(default_factory=list)

    CSV_HEADER = (["config_id", "patch_px", "accuracy"]
                  + [f"f1_{i}" for i in range(1, 5)]
                  + [f"prec_{i}" for i in range(1, 5)]
                  + [f"rec_{i}" for i in range(1, 5)]
                  + ["trials", "acc_std"])

    def csv_row(self, config_id: str, patch_px: int) -> list:
        vals = [self.accuracy, *self.f1, *self.precision, *self.recall]
        return ([config_id, str(patch_px)] + [f"{v:.6f}" for v in vals]
                + [str(self.trials), f"{self.acc_std:.6f}"])


def scores(cm: np.ndarray) -> ScoreReport:
    """Accuracy plus per-artist F1 = TP / (TP + (FP + FN) / 2), precision and recall.

    Scores with a zero denominator are reported as 0.
    """
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total == 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    return ScoreReport(accuracy=float(tp.sum() / total),
                       f1=_ratio(tp, tp + 0.5 * (fp + fn)),
                       precision=_ratio(tp, tp + fp),
                       recall=_ratio(tp, tp + fn),
                       total=total)


def aggregate(reports) -> ScoreReport:
    """Mean of repeated trials; ``acc_std`` is the spread of trial accuracies."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to aggregate")
    accs = [r.accuracy for r in reports]
    return ScoreReport(accuracy=float(np.mean(accs)),
                       f1=np.mean([r.f1 for r in reports], axis=0),
                       precision=np.mean([r.precision for r in reports], axis=0),
                       recall=np.mean([r.recall for r in reports], axis=0),
                       total=int(sum(r.total for r in reports)),
                       trials=len(reports),
                       acc_std=float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0,
                       accuracies=accs)
