"""Evaluation metrics: confusion matrix, positive-vs-rest binarization,
sensitivity, specificity, their harmonic mean, ROC AUC, and accuracy.

The screening protocol treats one class (COVID by default) as positive and
every other class as negative. Metrics with an empty denominator come back
as NaN and are listed in the report's `undefined` field, never silently
zero.
"""

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

CLASS_ORDER = ("COVID", "LungOpacity", "Normal", "ViralPneumonia")
POSITIVE_CLASS = "COVID"


@dataclass(frozen=True)
class ConfusionMatrix:
    """counts[i][j] = number of samples with true class i predicted as j."""

    counts: np.ndarray
    classes: tuple = CLASS_ORDER

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        n = len(self.classes)
        if counts.shape != (n, n):
            raise ValueError(
                f"counts must be {n}x{n} for classes {self.classes}, "
                f"got {counts.shape}")
        if (counts < 0).any():
            raise ValueError("confusion counts must be nonnegative")
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["true\\pred", *self.classes])
        for i, name in enumerate(self.classes):
            writer.writerow([name, *self.counts[i].tolist()])
        return buf.getvalue()


@dataclass(frozen=True)
class BinaryCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class EvalReport:
    """Confusion matrix plus the derived screening metrics for one
    evaluation pass."""

    confusion: ConfusionMatrix
    sen: float
    spe: float
    hm: float
    auc: float
    acc: float
    positive_class: str = POSITIVE_CLASS
    undefined: tuple = field(default_factory=tuple)

    def scalars(self) -> dict:
        return {"sen": self.sen, "spe": self.spe, "hm": self.hm,
                "auc": self.auc, "acc": self.acc}

    def to_text(self) -> str:
        lines = [f"positive_class = {self.positive_class}"]
        lines += [f"{k} = {v:.6f}" for k, v in self.scalars().items()]
        if self.undefined:
            lines.append("undefined = " + ",".join(self.undefined))
        return "\n".join(lines) + "\n"


def confusion(true_labels: Sequence[int], predicted_labels: Sequence[int],
              classes: tuple = CLASS_ORDER) -> ConfusionMatrix:
    """Count (true, predicted) pairs over class indices."""
    true_arr = np.asarray(true_labels, dtype=np.int64)
    pred_arr = np.asarray(predicted_labels, dtype=np.int64)
    if true_arr.shape != pred_arr.shape or true_arr.ndim != 1:
        raise ValueError("label sequences must be 1-D and the same length")
    n = len(classes)
    if true_arr.size and (true_arr.min() < 0 or true_arr.max() >= n
                          or pred_arr.min() < 0 or pred_arr.max() >= n):
        raise ValueError(f"labels must be in [0, {n})")
    counts = np.zeros((n, n), dtype=np.int64)
    np.add.at(counts, (true_arr, pred_arr), 1)
    return ConfusionMatrix(counts=counts, classes=classes)


def binarize_covid(cm: ConfusionMatrix,
                   positive_class: Optional[str] = None) -> BinaryCounts:
    """Collapse the multi-class matrix to positive-vs-rest counts."""
    if positive_class is None:
        positive_class = (POSITIVE_CLASS if POSITIVE_CLASS in cm.classes
                          else cm.classes[0])
    if positive_class not in cm.classes:
        raise ValueError(f"{positive_class!r} is not one of {cm.classes}")
    p = cm.classes.index(positive_class)
    counts = cm.counts
    tp = int(counts[p, p])
    fn = int(counts[p].sum() - counts[p, p])
    fp = int(counts[:, p].sum() - counts[p, p])
    tn = int(counts.sum() - tp - fn - fp)
    return BinaryCounts(tp=tp, tn=tn, fp=fp, fn=fn)


def sensitivity(bc: BinaryCounts) -> float:
    """True-positive rate: TP / (TP + FN). NaN when no positives exist."""
    denom = bc.tp + bc.fn
    return bc.tp / denom if denom > 0 else math.nan


def specificity(bc: BinaryCounts) -> float:
    """True-negative rate: TN / (TN + FP). NaN when no negatives exist."""
    denom = bc.tn + bc.fp
    return bc.tn / denom if denom > 0 else math.nan


def harmonic_mean(sen: float, spe: float) -> float:
    """2*sen*spe / (sen + spe), extended continuously to 0 when either
    rate is 0."""
    if math.isnan(sen) or math.isnan(spe):
        return math.nan
    if not (0.0 <= sen <= 1.0 and 0.0 <= spe <= 1.0):
        raise ValueError(f"rates must be in [0, 1], got {sen}, {spe}")
    if sen == 0.0 or spe == 0.0:
        return 0.0
    return 2.0 * sen * spe / (sen + spe)


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability that a positive outscores a negative, ties worth half.

    Computed from average ranks, which is exactly the pairwise statistic;
    invariant under any strictly increasing transform of the scores. NaN
    when only one class is present.
    """
    scores_arr = np.asarray(scores, dtype=np.float64)
    labels_arr = np.asarray(labels)
    if scores_arr.shape != labels_arr.shape or scores_arr.ndim != 1:
        raise ValueError("scores and labels must be 1-D and the same length")
    pos_mask = labels_arr == 1
    n_pos = int(pos_mask.sum())
    n_neg = int(labels_arr.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = rankdata(scores_arr, method="average")
    u = float(ranks[pos_mask].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def accuracy(cm: ConfusionMatrix) -> float:
    """Fraction of samples on the confusion-matrix diagonal."""
    total = cm.total
    return float(np.trace(cm.counts)) / total if total > 0 else math.nan


def evaluate_predictions(true_labels, predicted_labels, positive_scores,
                         classes: tuple = CLASS_ORDER,
                         positive_class: Optional[str] = None) -> EvalReport:
    """Full report from per-sample predictions.

    `positive_scores` is the model's probability for the positive class;
    labels are class indices into `classes`.
    """
    cm = confusion(true_labels, predicted_labels, classes=classes)
    if positive_class is None:
        positive_class = (POSITIVE_CLASS if POSITIVE_CLASS in classes
                          else classes[0])
    bc = binarize_covid(cm, positive_class=positive_class)
    sen = sensitivity(bc)
    spe = specificity(bc)
    hm = harmonic_mean(sen, spe)
    p = classes.index(positive_class)
    binary_true = (np.asarray(true_labels, dtype=np.int64) == p).astype(np.int64)
    auc_value = auc(positive_scores, binary_true)
    acc = accuracy(cm)
    undefined = tuple(name for name, value in
                      (("sen", sen), ("spe", spe), ("hm", hm),
                       ("auc", auc_value), ("acc", acc))
                      if math.isnan(value))
    return EvalReport(confusion=cm, sen=sen, spe=spe, hm=hm, auc=auc_value,
                      acc=acc, positive_class=positive_class,
                      undefined=undefined)
