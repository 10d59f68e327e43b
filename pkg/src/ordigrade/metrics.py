"""Agreement and classification metrics for graded predictions.

Quadratic weighted kappa is the headline number; macro F1, accuracy and
one-vs-rest sensitivity/specificity complete the report. ``binary_screening``
mode collapses grades to No-DR (0) vs DR (1..4) before scoring.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

FIVE_CLASS = "five_class"
BINARY_SCREENING = "binary_screening"
MODES = (FIVE_CLASS, BINARY_SCREENING)


def _check_ratings(y_true, y_pred, k):
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.ndim != 1 or y_pred.ndim != 1:
        raise ValueError("ratings must be one-dimensional")
    if len(y_true) != len(y_pred):
        raise ValueError(f"length mismatch: {len(y_true)} true vs {len(y_pred)} predicted")
    if len(y_true) == 0:
        raise ValueError("at least one rating pair is required")
    for name, arr in (("true", y_true), ("predicted", y_pred)):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ValueError(f"{name} ratings must be integers")
        if arr.min() < 0 or arr.max() >= k:
            raise ValueError(f"{name} rating out of range [0, {k})")
    return y_true.astype(np.int64), y_pred.astype(np.int64)


def confusion(y_true, y_pred, k: int = 5) -> np.ndarray:
    """Count matrix with rows indexed by the true grade and columns by the prediction."""
    y_true, y_pred = _check_ratings(y_true, y_pred, k)
    return np.bincount(y_true * k + y_pred, minlength=k * k).reshape(k, k)


def quadratic_weights(k: int) -> np.ndarray:
    i, j = np.indices((k, k))
    return (i - j) ** 2 / (k - 1) ** 2


def qwk_from_confusion(observed: np.ndarray) -> float:
    observed = np.asarray(observed, dtype=np.float64)
    k = observed.shape[0]
    n = observed.sum()
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0)) / n
    w = quadratic_weights(k)
    denom = float((w * expected).sum())
    if denom == 0.0:
        # both raters constant and equal
        return 1.0
    return 1.0 - float((w * observed).sum()) / denom


def qwk(y_true, y_pred, k: int = 5) -> float:
    """Quadratic weighted Cohen's kappa between two integer raters.

    Parameters
    ----------
    y_true, y_pred : array_like of int, shape (n,)
        Ratings in ``[0, k)``.
    k : int
        Number of categories.

    Returns
    -------
    float
        Kappa in ``[-1, 1]``. The expected matrix is the outer product of the
        marginals normalised to the same total as the observed matrix.
    """
    return qwk_from_confusion(confusion(y_true, y_pred, k))


def _per_class_counts(cm: np.ndarray):
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = cm.sum() - tp - fp - fn
    return tp, fp, fn, tn


def _safe_ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


def _f1_per_class(cm):
    tp, fp, fn, _ = _per_class_counts(cm)
    # zero-denominator classes contribute 0
    return _safe_ratio(2 * tp, 2 * tp + fp + fn)


def macro_f1(y_true, y_pred, k: int = 5) -> float:
    """Unweighted mean of per-class F1; a class never seen nor predicted scores 0."""
    return float(_f1_per_class(confusion(y_true, y_pred, k)).mean())


def accuracy(y_true, y_pred, k: int = 5) -> float:
    cm = confusion(y_true, y_pred, k)
    return float(np.trace(cm) / cm.sum())


def to_screening(grades) -> np.ndarray:
    """Collapse grades to 0 = No DR, 1 = any DR."""
    return (np.asarray(grades) > 0).astype(np.int64)


def _sens_spec_from_confusion(cm, mode):
    if mode == BINARY_SCREENING:
        tp, fn = cm[1, 1], cm[1, 0]
        tn, fp = cm[0, 0], cm[0, 1]
        sens = tp / (tp + fn) if tp + fn else 0.0
        spec = tn / (tn + fp) if tn + fp else 0.0
        return float(sens), float(spec)
    tp, fp, fn, tn = _per_class_counts(cm)
    present = cm.sum(axis=1) > 0
    if not present.all():
        logger.info("classes %s absent from truth; excluded from macro sensitivity/specificity",
                    np.flatnonzero(~present).tolist())
    recall = _safe_ratio(tp, tp + fn)[present]
    tnr = _safe_ratio(tn, tn + fp)[present]
    return float(recall.mean()), float(tnr.mean())


def sensitivity_specificity(y_true, y_pred, k: int = 5, mode: str = FIVE_CLASS):
    """Return ``(sensitivity, specificity)``.

    In ``five_class`` mode both are macro averages of one-vs-rest recall and
    true-negative rate over the classes present in ``y_true``. In
    ``binary_screening`` mode the grades are first collapsed to {0} vs {1..4}
    and DR is the positive class.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    _check_ratings(y_true, y_pred, k)
    if mode == BINARY_SCREENING:
        y_true, y_pred, k = to_screening(y_true), to_screening(y_pred), 2
    return _sens_spec_from_confusion(confusion(y_true, y_pred, k), mode)


@dataclass
class MetricsReport:
    qwk: float
    macro_f1: float
    accuracy: float
    sensitivity: float
    specificity: float
    mode: str = FIVE_CLASS
    n: int = 0
    precision_per_class: list = field(default_factory=list)
    recall_per_class: list = field(default_factory=list)

    FIELDS = ("qwk", "macro_f1", "accuracy", "sensitivity", "specificity")

    def to_text(self) -> str:
        lines = [f"mode={self.mode}", f"n={self.n}"]
        lines += [f"{name}={getattr(self, name):.10f}" for name in self.FIELDS]
        for c, (p, r) in enumerate(zip(self.precision_per_class, self.recall_per_class)):
            lines.append(f"class_{c}_precision={p:.10f}")
            lines.append(f"class_{c}_recall={r:.10f}")
        return "\n".join(lines) + "\n"

    @classmethod
    def csv_header(cls) -> str:
        return "name,mode,n," + ",".join(cls.FIELDS)

    def to_csv_row(self, name: str = "") -> str:
        values = ",".join(f"{getattr(self, f):.10f}" for f in self.FIELDS)
        return f"{name},{self.mode},{self.n},{values}"


def report(y_true, y_pred, mode: str = FIVE_CLASS, k: int = 5) -> MetricsReport:
    """All metrics from a single confusion pass."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    y_true, y_pred = _check_ratings(y_true, y_pred, k)
    if mode == BINARY_SCREENING:
        y_true, y_pred, k = to_screening(y_true), to_screening(y_pred), 2
    cm = confusion(y_true, y_pred, k)
    tp, fp, fn, _ = _per_class_counts(cm)
    sens, spec = _sens_spec_from_confusion(cm, mode)
    return MetricsReport(
        qwk=qwk_from_confusion(cm),
        macro_f1=float(_f1_per_class(cm).mean()),
        accuracy=float(np.trace(cm) / cm.sum()),
        sensitivity=sens,
        specificity=spec,
        mode=mode,
        n=int(cm.sum()),
        precision_per_class=_safe_ratio(tp, tp + fp).tolist(),
        recall_per_class=_safe_ratio(tp, tp + fn).tolist(),
    )
