"""Confusion matrices, macro-F1, entropy sweeps and embedding export."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .ensemble import row_entropies
from .errors import ContractError


@dataclass
class MetricReport:
    macro_f1: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    mean_entropy: float | None = None

    def rows(self) -> list[list]:
        out = [["class", "precision", "recall", "f1", "support"]]
        for k in range(len(self.f1)):
            out.append([k, f"{self.precision[k]:.6f}", f"{self.recall[k]:.6f}", f"{self.f1[k]:.6f}", int(self.support[k])])
        return out


def confusion(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ContractError(f"confusion: {len(y_true)} truths vs {len(y_pred)} predictions")
    if y_true.size and (max(y_true.max(), y_pred.max()) >= num_classes or min(y_true.min(), y_pred.min()) < 0):
        raise ContractError(f"confusion: class ids must lie in [0, {num_classes})")
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (y_true, y_pred), 1)
    return m


def per_class_scores(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    m = np.asarray(matrix, dtype=np.float64)
    tp = np.diag(m)
    predicted = m.sum(axis=0)
    support = m.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return precision, recall, f1, support.astype(np.int64)


def macro_f1(matrix: np.ndarray) -> float:
    """Unweighted mean F1 over classes with non-zero support."""
    _, _, f1, support = per_class_scores(matrix)
    present = support > 0
    if not present.any():
        raise ContractError("macro_f1: every class has zero support")
    return float(f1[present].mean())


def score(y_true, y_pred, num_classes: int, probabilities: np.ndarray | None = None) -> MetricReport:
    m = confusion(y_true, y_pred, num_classes)
    precision, recall, f1, support = per_class_scores(m)
    ent = float(row_entropies(probabilities).mean()) if probabilities is not None and len(probabilities) else None
    return MetricReport(macro_f1(m), precision, recall, f1, support, ent)


def entropy_plateau_epoch(curve: Sequence[float], tolerance: float = 0.05) -> int:
    """First epoch (1-based) from which the curve stays within ``tolerance`` of
    its total movement around the final value."""
    curve = np.asarray(curve, dtype=np.float64)
    if curve.size == 0:
        return 0
    span = max(float(curve.max() - curve.min()), 1e-12)
    inside = np.abs(curve - curve[-1]) <= tolerance * span
    last_outside = np.flatnonzero(~inside)
    return int(last_outside[-1] + 2) if last_outside.size else 1


@dataclass
class SweepRow:
    alpha: float
    mean_final_entropy: float
    epochs_to_plateau: int


def alpha_uncertainty_sweep(run_factory: Callable[[float], Sequence[float]], alphas: Sequence[float]) -> list[SweepRow]:
    """Train one run per momentum value and summarise its ensemble entropy.

    ``run_factory(alpha)`` trains a run (same seed and data for every alpha)
    and returns the per-epoch mean entropy of the corrected ensemble.
    """
    if len(alphas) == 0:
        raise ContractError("alpha sweep needs a non-empty grid")
    for a in alphas:
        if not 0.0 < a < 1.0:
            raise ContractError(f"alpha {a} outside (0, 1)")
    rows = []
    for a in alphas:
        curve = list(run_factory(a))
        final = curve[-1] if curve else float("nan")
        rows.append(SweepRow(float(a), float(final), entropy_plateau_epoch(curve)))
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["alpha", "mean_final_entropy", "epochs_to_plateau"])
    for r in rows:
        w.writerow([f"{r.alpha:.6g}", f"{r.mean_final_entropy:.12g}", r.epochs_to_plateau])
    return buf.getvalue()


def embeddings_csv(embeddings: np.ndarray, true_labels=None, pseudo_labels=None) -> str:
    """``window_id,true_label,pseudo_label,e_0..e_{d-1}``; unknown labels are blank."""
    n, d = embeddings.shape
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["window_id", "true_label", "pseudo_label"] + [f"e_{k}" for k in range(d)])
    for i in range(n):
        t = "" if true_labels is None or true_labels[i] < 0 else int(true_labels[i])
        p = "" if pseudo_labels is None else int(pseudo_labels[i])
        w.writerow([i, t, p] + [repr(float(v)) for v in embeddings[i]])
    return buf.getvalue()


def confusion_csv(matrix: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true\\pred"] + [str(k) for k in range(matrix.shape[1])])
    for k, row in enumerate(matrix):
        w.writerow([k] + [int(v) for v in row])
    return buf.getvalue()
