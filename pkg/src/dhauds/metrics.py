"""Evaluation metrics: one-vs-rest ROC-AUC, pooled F1/accuracy, top-1, silhouette.

Pooled F1 and accuracy sum the per-class counts before precision, recall
and accuracy are formed. For single-label predictions pooled F1 therefore
equals top-1 accuracy. ``macro_f1_per_class`` gives the conventional
per-class average for comparison.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CANONICAL_METRIC = {"RS": "roc_auc", "US8": "f1", "SC2": "accuracy_top1", "VS": "accuracy_top1"}


class MetricError(ValueError):
    """A metric is undefined for the given input."""


@dataclass(frozen=True, eq=False)
class PredictionSet:
    probs: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=int)
        if p.ndim != 2 or p.shape[0] < 1 or p.shape[1] < 2:
            raise MetricError(f"probs must be N x C with N >= 1, C >= 2; got {p.shape}")
        if y.shape != (p.shape[0],):
            raise MetricError(f"labels shape {y.shape} does not match N={p.shape[0]}")
        if np.any(y < 0) or np.any(y >= p.shape[1]):
            raise MetricError("label outside [0, C)")
        if np.any(p < 0) or np.any(p > 1) or not np.allclose(p.sum(axis=1), 1.0, atol=1e-5):
            raise MetricError("probability rows must lie in [0, 1] and sum to 1")
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "labels", y)

    @property
    def n_classes(self) -> int:
        return self.probs.shape[1]

    def predicted(self) -> np.ndarray:
        # np.argmax returns the first maximum: ties go to the lowest class index
        return np.argmax(self.probs, axis=1)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @property
    def n(self) -> int:
        return int(self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0])


def confusion_counts(pred_labels, labels, n_classes: int) -> ConfusionCounts:
    """One-vs-rest TP/FP/FN/TN per class."""
    pred = np.asarray(pred_labels, dtype=int)
    y = np.asarray(labels, dtype=int)
    if pred.shape != y.shape:
        raise MetricError("prediction and label vectors differ in length")
    for arr, name in ((pred, "prediction"), (y, "label")):
        if np.any(arr < 0) or np.any(arr >= n_classes):
            raise MetricError(f"{name} outside [0, {n_classes})")
    n = len(y)
    tp = np.bincount(y[pred == y], minlength=n_classes)
    pred_count = np.bincount(pred, minlength=n_classes)
    true_count = np.bincount(y, minlength=n_classes)
    fp = pred_count - tp
    fn = true_count - tp
    tn = n - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


def roc_curve(scores, binary_labels) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, TPR) arrays from (0, 0) to (1, 1), one point per distinct score."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(binary_labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC-AUC is undefined when only one class is present")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each run of equal scores: thresholds sit between groups
    ends = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tps = np.cumsum(y)[ends]
    fps = (ends + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    return fpr, tpr


def roc_auc_class(scores, binary_labels) -> float:
    """Trapezoidal area under the tie-grouped ROC curve."""
    fpr, tpr = roc_curve(scores, binary_labels)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def macro_roc_auc(p: PredictionSet) -> float:
    present = set(np.unique(p.labels).tolist())
    missing = [c for c in range(p.n_classes) if c not in present]
    if missing:
        raise MetricError(f"classes absent from labels, ROC-AUC undefined: {missing}")
    return float(np.mean([roc_auc_class(p.probs[:, c], p.labels == c) for c in range(p.n_classes)]))


def f1_aggregated(c: ConfusionCounts) -> float:
    """F1 from counts pooled over classes (named "Macro F1" in the benchmark)."""
    tp, fp, fn = int(c.tp.sum()), int(c.fp.sum()), int(c.fn.sum())
    if tp + fp == 0 or tp + fn == 0:
        raise MetricError("F1 undefined: zero precision or recall denominator")
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def macro_f1_per_class(c: ConfusionCounts) -> float:
    """Conventional macro F1: unweighted mean of per-class F1 (0 where undefined)."""
    denom = 2 * c.tp + c.fp + c.fn
    f1 = np.where(denom > 0, 2 * c.tp / np.maximum(denom, 1), 0.0)
    return float(f1.mean())


def accuracy_ovr(c: ConfusionCounts) -> float:
    """(TP + TN) / (TP + TN + FP + FN) with every count summed over classes."""
    tp, tn, fp, fn = (int(a.sum()) for a in (c.tp, c.tn, c.fp, c.fn))
    total = tp + tn + fp + fn
    if total == 0:
        raise MetricError("accuracy of an empty prediction set")
    return (tp + tn) / total


def accuracy_top1(p: PredictionSet) -> float:
    return float(np.mean(p.predicted() == p.labels))


def silhouette(embeddings, labels) -> float:
    """Mean silhouette coefficient with Euclidean distances.

    Points that are alone in their class score 0.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or len(x) != len(y):
        raise MetricError("embeddings must be N x D with one label per row")
    if len(x) < 2:
        raise MetricError("silhouette needs at least 2 points")
    classes, inv = np.unique(y, return_inverse=True)
    if len(classes) < 2:
        raise MetricError("silhouette needs at least 2 classes")
    sq = np.sum(x * x, axis=1)
    d = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0))
    np.fill_diagonal(d, 0.0)
    onehot = np.eye(len(classes))[inv]
    sums = d @ onehot                     # N x K distance sums to each class
    counts = onehot.sum(axis=0)
    own = counts[inv]
    a = np.where(own > 1, sums[np.arange(len(x)), inv] / np.maximum(own - 1, 1), 0.0)
    mean_other = sums / counts
    mean_other[np.arange(len(x)), inv] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


METRICS = {
    "roc_auc": lambda p: macro_roc_auc(p),
    "f1": lambda p: f1_aggregated(confusion_counts(p.predicted(), p.labels, p.n_classes)),
    "macro_f1_per_class": lambda p: macro_f1_per_class(confusion_counts(p.predicted(), p.labels, p.n_classes)),
    "accuracy_top1": accuracy_top1,
    "accuracy_ovr": lambda p: accuracy_ovr(confusion_counts(p.predicted(), p.labels, p.n_classes)),
}


def compute_metric(name: str, p: PredictionSet) -> float:
    try:
        fn = METRICS[name]
    except KeyError:
        raise MetricError(f"unknown metric {name!r}; choose from {sorted(METRICS)}") from None
    return fn(p)


def metric_report(p: PredictionSet, dataset_id: str | None = None, metric: str | None = None) -> dict:
    """All applicable metrics plus the canonical one for the dataset.

    ROC-AUC is reported as None when some class is absent from the labels.
    """
    values = {}
    for name in METRICS:
        try:
            values[name] = compute_metric(name, p)
        except MetricError:
            values[name] = None
    canonical = metric or CANONICAL_METRIC.get(dataset_id or "", "accuracy_top1")
    if canonical not in METRICS:
        raise MetricError(f"unknown metric {canonical!r}")
    return {"dataset_id": dataset_id, "n": int(len(p.labels)), "c": p.n_classes,
            "canonical_metric": canonical, "canonical_value": values[canonical], "metrics": values}


def format_report(rep: dict) -> str:
    lines = [f"dataset_id={rep['dataset_id']}", f"n={rep['n']}", f"c={rep['c']}",
             f"canonical_metric={rep['canonical_metric']}",
             f"canonical_value={_fmt(rep['canonical_value'])}"]
    for k, v in rep["metrics"].items():
        mark = " *" if k == rep["canonical_metric"] else ""
        lines.append(f"{k}={_fmt(v)}{mark}")
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return "NA" if v is None else f"{v:.6f}"


def write_predictions(p: PredictionSet, path) -> None:
    """Header ``#predictions N=.. C=.. classes=a,b`` then ``p_0,...,p_{C-1},label`` rows."""
    names = p.class_names or tuple(str(i) for i in range(p.n_classes))
    lines = [f"#predictions N={len(p.labels)} C={p.n_classes} classes={','.join(names)}"]
    for row, y in zip(p.probs, p.labels):
        lines.append(",".join(repr(float(v)) for v in row) + f",{int(y)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_predictions(path) -> PredictionSet:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("#predictions"):
        raise MetricError(f"{path}: missing '#predictions' header")
    head = dict(tok.split("=", 1) for tok in lines[0].split()[1:])
    n, c = int(head["N"]), int(head["C"])
    names = tuple(head["classes"].split(",")) if head.get("classes") else None
    rows = [ln.split(",") for ln in lines[1:]]
    if len(rows) != n:
        raise MetricError(f"{path}: header says N={n} but found {len(rows)} rows")
    if any(len(r) != c + 1 for r in rows):
        raise MetricError(f"{path}: every row needs {c} probabilities and a label")
    probs = np.array([[float(v) for v in r[:c]] for r in rows])
    labels = np.array([int(r[c]) for r in rows])
    return PredictionSet(probs, labels, names)


def write_report_json(rep: dict, path) -> None:
    Path(path).write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n", encoding="utf-8")
