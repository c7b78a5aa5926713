"""Confusion matrix and the per-class scores derived from it (Jaccard, F1, pixel accuracy)."""
from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)


def confusion_matrix(num_labels: int) -> np.ndarray:
    return np.zeros((num_labels, num_labels), dtype=np.int64)


def accumulate(cm: np.ndarray, pred, truth) -> np.ndarray:
    """Return ``cm`` plus the counts of (true, predicted) pairs; A[i, j] = true i predicted j."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    p = cm.shape[0]
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    for name, arr in (("prediction", pred), ("truth", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= p):
            raise ValueError(f"{name} has classes outside 0..{p - 1}")
    counts = np.bincount(truth.ravel().astype(np.int64) * p + pred.ravel().astype(np.int64), minlength=p * p)
    return cm + counts.reshape(p, p)


def _overlap_terms(cm: np.ndarray):
    a = np.asarray(cm, dtype=np.float64)
    diag = np.diag(a)
    return diag, a.sum(axis=1), a.sum(axis=0)


def jaccard(cm: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-class intersection over union and their mean.

    Classes absent from both prediction and truth have no defined score; they
    come back as NaN and are left out of the mean.
    """
    diag, rows, cols = _overlap_terms(cm)
    union = rows + cols - diag
    per_class = np.full(len(diag), np.nan)
    defined = union > 0
    per_class[defined] = diag[defined] / union[defined]
    if not defined.all():
        logger.info("classes %s have no pixels in prediction or truth; excluded from mean", np.flatnonzero(~defined).tolist())
    mean = float(per_class[defined].mean()) if defined.any() else float("nan")
    return per_class, mean


def f1(cm: np.ndarray) -> np.ndarray:
    diag, rows, cols = _overlap_terms(cm)
    denom = rows + cols
    out = np.full(len(diag), np.nan)
    ok = denom > 0
    out[ok] = 2 * diag[ok] / denom[ok]
    return out


def pixel_accuracy(cm: np.ndarray) -> float:
    a = np.asarray(cm, dtype=np.float64)
    total = a.sum()
    if total <= 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(a) / total)


def format_report(cm: np.ndarray, class_names: Sequence[str] | None = None) -> str:
    """Confusion table in percent of each true class, a Jaccard row, an F1 line and key=value pairs."""
    p = cm.shape[0]
    names = list(class_names) if class_names is not None else [f"c{i}" for i in range(p)]
    per_j, mean_j = jaccard(cm)
    per_f = f1(cm)
    acc = pixel_accuracy(cm)
    rows = cm.sum(axis=1, keepdims=True).astype(np.float64)
    pct = np.divide(100.0 * cm, rows, out=np.zeros(cm.shape), where=rows > 0)

    def fmt(v):
        return "  nan" if np.isnan(v) else f"{v:.4f}"

    width = max(10, max(len(n) for n in names) + 1)
    lines = ["true\\pred".ljust(width) + "".join(n.rjust(width) for n in names) + "overall".rjust(width)]
    for i, n in enumerate(names):
        lines.append(n.ljust(width) + "".join(f"{v:.2f}".rjust(width) for v in pct[i]) + "-----".rjust(width))
    lines.append("jaccard".ljust(width) + "".join(fmt(v).rjust(width) for v in per_j) + fmt(mean_j).rjust(width))
    lines.append("f1".ljust(width) + "".join(fmt(v).rjust(width) for v in per_f) + f"{acc:.4f}".rjust(width))
    lines.append("")
    lines.append(f"pixel_accuracy={acc:.6f}")
    lines.append(f"mean_jaccard={mean_j:.6f}")
    for i, n in enumerate(names):
        lines.append(f"jaccard.{n}={per_j[i]:.6f}")
    for i, n in enumerate(names):
        lines.append(f"f1.{n}={per_f[i]:.6f}")
    lines.append("confusion=" + ";".join(",".join(str(int(v)) for v in row) for row in cm))
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict[str, str]:
    """Pull the key=value lines out of a report."""
    out = {}
    for line in text.splitlines():
        if "=" in line and " " not in line.strip():
            k, v = line.strip().split("=", 1)
            out[k] = v
    return out
