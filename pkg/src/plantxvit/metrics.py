"""Confusion matrix, precision/recall/F1, ROC/AUC and Cohen's kappa."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

AVERAGING = ("macro", "micro", "weighted")


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [C, C], rows = true class, columns = predicted
    class_names: list[str]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def normalized(self) -> np.ndarray:
        if self.total == 0:
            raise ValueError("cannot normalise an empty confusion matrix")
        rows = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["true/pred", *self.class_names])
            for name, row in zip(self.class_names, self.counts):
                w.writerow([name, *row.tolist()])


def confusion_matrix(y_true, y_pred, num_classes: int, class_names=None) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred differ in length")
    for arr in (y_true, y_pred):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"label outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    names = list(class_names) if class_names is not None else [str(c) for c in range(num_classes)]
    return ConfusionMatrix(counts, names)


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float  # harmonic mean of the averaged precision and recall
    f1_per_class_mean: float  # the same average taken over per-class F1 scores
    auc: float | None = None
    kappa: float | None = None
    loss: float | None = None
    averaging: str = "macro"
    per_class: dict = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"loss": self.loss, "accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "f1": self.f1, "auc": self.auc, "kappa": self.kappa,
                "f1_per_class_mean": self.f1_per_class_mean, "averaging": self.averaging,
                "per_class": self.per_class, "flags": self.flags}

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


def _ratio(num: float, den: float) -> tuple[float, bool]:
    return (num / den, False) if den > 0 else (0.0, True)


def _harmonic(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def classification_metrics(cm: ConfusionMatrix, average: str = "macro") -> MetricsReport:
    """Accuracy plus one-vs-rest precision, recall and F1 averaged over classes.

    Accuracy is ``trace / total``. A class whose precision or recall has a
    zero denominator contributes 0 and adds a flag.
    """
    if average not in AVERAGING:
        raise ValueError(f"average must be one of {AVERAGING}")
    c = cm.counts.astype(np.int64)
    total = int(c.sum())
    if total == 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(c)
    predicted = c.sum(axis=0)
    actual = c.sum(axis=1)
    flags, per_class = [], {}
    prec, rec, f1s = [], [], []
    for i, name in enumerate(cm.class_names):
        p, p_bad = _ratio(tp[i], predicted[i])
        r, r_bad = _ratio(tp[i], actual[i])
        if p_bad:
            flags.append(f"precision_undefined:{name}")
        if r_bad:
            flags.append(f"recall_undefined:{name}")
        f = _harmonic(p, r)
        prec.append(p), rec.append(r), f1s.append(f)
        per_class[name] = {"tp": int(tp[i]), "fp": int(predicted[i] - tp[i]),
                           "fn": int(actual[i] - tp[i]),
                           "tn": int(total - predicted[i] - actual[i] + tp[i]),
                           "precision": p, "recall": r, "f1": f}
    if average == "micro":
        precision = tp.sum() / predicted.sum()
        recall = tp.sum() / actual.sum()
        f1_mean = _harmonic(precision, recall)
    else:
        weights = actual / total if average == "weighted" else np.full(len(prec), 1 / len(prec))
        precision = float(np.dot(weights, prec))
        recall = float(np.dot(weights, rec))
        f1_mean = float(np.dot(weights, f1s))
    return MetricsReport(accuracy=float(tp.sum() / total), precision=float(precision),
                         recall=float(recall), f1=_harmonic(float(precision), float(recall)),
                         f1_per_class_mean=float(f1_mean), averaging=average,
                         per_class=per_class, flags=flags)


def kappa_expected_agreement(cm: ConfusionMatrix) -> float:
    c = cm.counts.astype(np.float64)
    total = c.sum()
    return float((c.sum(axis=1) * c.sum(axis=0)).sum() / (total * total))


def cohen_kappa(cm: ConfusionMatrix) -> float:
    """``(p_o - p_e) / (1 - p_e)``. Returns 0 when ``p_e == 1`` (undefined)."""
    total = cm.total
    if total == 0:
        raise ValueError("confusion matrix is empty")
    p_o = float(np.trace(cm.counts)) / total
    p_e = kappa_expected_agreement(cm)
    if p_e >= 1.0:
        return 0.0
    return (p_o - p_e) / (1 - p_e)


# --------------------------------------------------------------------------
# ROC

@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # first entry is +inf (nothing predicted positive)

    @property
    def auc(self) -> float:
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2))


def roc_curve(scores, positive) -> RocCurve:
    """One sweep over every distinct score, highest first; ties enter together."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    pos = np.asarray(positive, dtype=bool).reshape(-1)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both positive and negative samples")
    order = np.argsort(-s, kind="stable")
    s, pos = s[order], pos[order]
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tps = np.cumsum(pos)[ends]
    fps = (ends + 1) - tps
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    return RocCurve(fpr, tpr, np.r_[np.inf, s[ends]])


@dataclass
class RocResult:
    curves: list  # RocCurve or None per class
    aucs: list  # float or None per class
    macro_auc: float | None
    flags: list[str]

    def write_csv(self, path, class_names) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "threshold", "fpr", "tpr"])
            for name, curve in zip(class_names, self.curves):
                if curve is None:
                    continue
                for t, x, y in zip(curve.thresholds, curve.fpr, curve.tpr):
                    w.writerow([name, repr(float(t)), repr(float(x)), repr(float(y))])


def roc_auc(scores, y_true, average: str = "macro") -> RocResult:
    """One-vs-rest ROC per class and the averaged AUC.

    Classes without positives (or without negatives) have no defined AUC;
    they are skipped in the average and flagged.
    """
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(y_true, dtype=np.int64).reshape(-1)
    if scores.ndim != 2 or scores.shape[0] != y.size:
        raise ValueError("scores must be [N, C] with one row per label")
    curves, aucs, flags, support = [], [], [], []
    for c in range(scores.shape[1]):
        positive = y == c
        if positive.all() or not positive.any():
            curves.append(None)
            aucs.append(None)
            flags.append(f"auc_undefined:{c}")
            continue
        curve = roc_curve(scores[:, c], positive)
        curves.append(curve)
        aucs.append(curve.auc)
        support.append(int(positive.sum()))
    defined = [a for a in aucs if a is not None]
    if not defined:
        macro = None
    elif average == "weighted":
        macro = float(np.dot(support, defined) / sum(support))
    else:
        macro = float(np.mean(defined))
    return RocResult(curves, aucs, macro, flags)


def metrics_report(y_true, probs, class_names, loss: float | None = None,
                   average: str = "macro") -> tuple[MetricsReport, ConfusionMatrix, RocResult]:
    """Everything the evaluation tables report, from labels and class probabilities."""
    probs = np.asarray(probs)
    cm = confusion_matrix(y_true, probs.argmax(axis=1), len(class_names), class_names)
    report = classification_metrics(cm, average)
    roc = roc_auc(probs, y_true, "weighted" if average == "weighted" else "macro")
    report.auc = roc.macro_auc
    report.kappa = cohen_kappa(cm)
    report.loss = loss
    report.flags += roc.flags
    if kappa_expected_agreement(cm) >= 1.0:
        report.flags.append("kappa_undefined")
    return report, cm, roc
