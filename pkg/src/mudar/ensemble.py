"""Temporal ensembling of per-epoch target predictions."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError


@dataclass
class EnsembleConfig:
    momentum: float = 0.60
    confidence_threshold: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ContractError(f"ensemble momentum must lie in (0, 1), got {self.momentum}")
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ContractError(f"confidence threshold must lie in [0, 1], got {self.confidence_threshold}")


@dataclass
class EnsembleState:
    """Accumulator Z (m, c); row i always belongs to target window i."""

    z: np.ndarray
    t: int = 0

    @classmethod
    def empty(cls, num_samples: int, num_classes: int) -> "EnsembleState":
        return cls(np.zeros((num_samples, num_classes)))

    def corrected(self, momentum: float) -> np.ndarray:
        """Bias-corrected ensemble Z / (1 - momentum^t)."""
        if self.t == 0:
            raise ContractError("ensemble has no predictions yet (t = 0)")
        return self.z / (1.0 - momentum**self.t)


def update(state: EnsembleState, predictions: np.ndarray, momentum: float) -> EnsembleState:
    """Z <- momentum * Z + (1 - momentum) * p, t <- t + 1."""
    predictions = np.asarray(predictions, dtype=np.float64)
    if predictions.shape != state.z.shape:
        raise ContractError(f"predictions shape {predictions.shape} != ensemble shape {state.z.shape}")
    if not 0.0 < momentum < 1.0:
        raise ContractError(f"ensemble momentum must lie in (0, 1), got {momentum}")
    z = momentum * state.z + (1.0 - momentum) * predictions
    return EnsembleState(z, state.t + 1)


def pseudo_labels(state: EnsembleState, momentum: float, threshold: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Argmax labels of the corrected ensemble and the confidence mask."""
    z_hat = state.corrected(momentum)
    labels = np.argmax(z_hat, axis=1)  # first maximum -> lowest class id on ties
    mask = z_hat.max(axis=1) >= threshold
    return labels.astype(np.int64), mask


def entropy(p) -> float:
    """Shannon entropy in nats, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    if (p < 0).any():
        raise ContractError("entropy: negative probability")
    if abs(p.sum() - 1.0) > 1e-6:
        raise ContractError(f"entropy: probabilities sum to {p.sum()}, not 1")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def row_entropies(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=1)


def dump_epoch(path: str | Path, epoch: int, z_hat: np.ndarray, append: bool = True) -> None:
    """Append ``epoch,window_id,entropy,p_0..p_{c-1}`` rows for one epoch."""
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "w" if new else "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(["epoch", "window_id", "entropy"] + [f"p_{k}" for k in range(z_hat.shape[1])])
        for i, (h, row) in enumerate(zip(row_entropies(z_hat), z_hat)):
            w.writerow([epoch, i, f"{h:.12g}"] + [f"{v:.12g}" for v in row])
