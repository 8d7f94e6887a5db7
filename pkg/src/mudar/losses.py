"""Supervised, class-conditional kernel MMD and consistency loss terms."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import diffcore as dc
from .errors import ContractError


@dataclass
class KernelConfig:
    gamma: float | None = None  # None -> median heuristic per batch
    lam: float = 0.30
    min_class_count: int = 2

    def __post_init__(self):
        if self.gamma is not None and self.gamma <= 0:
            raise ContractError(f"fixed gamma must be > 0, got {self.gamma}")
        if self.lam < 0:
            raise ContractError(f"lambda must be >= 0, got {self.lam}")
        if self.min_class_count < 1:
            raise ContractError("min_class_count must be >= 1")


@dataclass
class LossWeights:
    beta0: float = 1.0
    beta1: float = 1.0
    ramp_epochs: int = 0
    # linear warm-up of the consistency weight; 0 keeps it constant
    consistency_ramp_epochs: int = 0

    def __post_init__(self):
        if self.beta0 < 0 or self.beta1 < 0:
            raise ContractError("loss weights must be non-negative")
        if self.ramp_epochs < 0 or self.consistency_ramp_epochs < 0:
            raise ContractError("ramp lengths must be non-negative")

    def effective_beta0(self, epoch: int) -> float:
        if self.ramp_epochs > 0:
            return self.beta0 * min(1.0, epoch / self.ramp_epochs)
        return self.beta0

    def effective_beta1(self, epoch: int) -> float:
        if self.consistency_ramp_epochs > 0:
            return self.beta1 * min(1.0, epoch / self.consistency_ramp_epochs)
        return self.beta1


@dataclass
class KcmmdDiagnostics:
    gamma: float
    classes_used: list[int] = field(default_factory=list)
    classes_skipped: list[int] = field(default_factory=list)
    per_class: dict[int, float] = field(default_factory=dict)

    @property
    def no_classes(self) -> bool:
        return not self.classes_used


def ce_loss(probabilities: torch.Tensor, labels) -> torch.Tensor:
    """Mean negative log-likelihood of the true class; probabilities floored at 1e-12."""
    if probabilities.shape[0] == 0:
        raise ContractError("ce_loss: empty batch")
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if labels.shape != probabilities.shape[:1]:
        raise ContractError(f"ce_loss: {labels.shape[0]} labels for {probabilities.shape[0]} rows")
    picked = probabilities.gather(1, labels[:, None])[:, 0]
    return -dc.log(picked).mean()


def rbf_kernel(a: torch.Tensor, b: torch.Tensor, gamma: float) -> torch.Tensor:
    """exp(-gamma * ||a_i - b_j||^2)."""
    if gamma <= 0:
        raise ContractError(f"rbf_kernel: gamma must be > 0, got {gamma}")
    return torch.exp(-gamma * dc.pairwise_sq_dists(a, b))


def median_heuristic_gamma(embeddings) -> float:
    """1 / (2 * median of the non-zero pairwise squared distances); 1.0 if all coincide."""
    x = dc.as_array(embeddings).detach()
    if x.ndim != 2 or x.shape[0] < 2:
        raise ContractError("median heuristic needs at least 2 points")
    d = dc.pairwise_sq_dists(x, x)
    iu = torch.triu_indices(x.shape[0], x.shape[0], offset=1)
    vals = d[iu[0], iu[1]]
    vals = vals[vals > 0]
    if vals.numel() == 0:
        return 1.0
    return float(1.0 / (2.0 * np.median(vals.numpy())))


def class_discrepancy(xs: torch.Tensor, xt: torch.Tensor, gamma: float, lam: float) -> torch.Tensor:
    """mean(K_ss + lam I) + mean(K_tt + lam I) - 2 mean(K_st) for one class."""
    n, m = xs.shape[0], xt.shape[0]
    k_ss = rbf_kernel(xs, xs, gamma).mean() + lam / n
    k_tt = rbf_kernel(xt, xt, gamma).mean() + lam / m
    return k_ss + k_tt - 2.0 * rbf_kernel(xs, xt, gamma).mean()


def kcmmd_loss(
    source: torch.Tensor,
    source_labels,
    target: torch.Tensor,
    target_labels,
    target_mask=None,
    config: KernelConfig | None = None,
    gamma: float | None = None,
) -> tuple[torch.Tensor, KcmmdDiagnostics]:
    """Regularised class-wise kernel MMD averaged over the classes present.

    A class enters only with at least ``min_class_count`` source samples and
    as many masked-in target samples. ``gamma`` overrides the config; if both
    are unset the median heuristic is applied to the union of embeddings.
    Returns a zero tensor with ``diagnostics.no_classes`` when nothing qualifies.
    """
    config = config or KernelConfig()
    source, target = dc.as_array(source), dc.as_array(target)
    if source.ndim != 2 or target.ndim != 2 or source.shape[1] != target.shape[1]:
        raise ContractError(
            f"kcmmd_loss: embedding dims differ: {tuple(source.shape)} vs {tuple(target.shape)}"
        )
    ys = np.asarray(source_labels, dtype=np.int64)
    yt = np.asarray(target_labels, dtype=np.int64)
    mask = np.ones(len(yt), dtype=bool) if target_mask is None else np.asarray(target_mask, dtype=bool)
    if gamma is None:
        gamma = config.gamma
    if gamma is None:
        union = torch.cat([source, target]).detach()
        gamma = median_heuristic_gamma(union) if union.shape[0] >= 2 else 1.0
    diag = KcmmdDiagnostics(gamma=gamma)
    terms = []
    for c in sorted(set(ys.tolist()) | set(yt[mask].tolist())):
        s_idx = np.flatnonzero(ys == c)
        t_idx = np.flatnonzero((yt == c) & mask)
        if len(s_idx) < config.min_class_count or len(t_idx) < config.min_class_count:
            diag.classes_skipped.append(int(c))
            continue
        delta = class_discrepancy(
            source[torch.as_tensor(s_idx)], target[torch.as_tensor(t_idx)], gamma, config.lam
        )
        diag.classes_used.append(int(c))
        diag.per_class[int(c)] = float(delta.detach())
        terms.append(delta)
    if not terms:
        return source.sum() * 0.0, diag
    return torch.stack(terms).mean(), diag


def kcmmd_unbiased(source, source_labels, target, target_labels, gamma: float, min_class_count: int = 2) -> float:
    """Diagnostic per-class unbiased MMD^2 (off-diagonal within-domain means), summed over classes."""
    source, target = dc.as_array(source).detach(), dc.as_array(target).detach()
    ys = np.asarray(source_labels)
    yt = np.asarray(target_labels)
    total = 0.0
    for c in sorted(set(ys.tolist()) & set(yt.tolist())):
        xs = source[torch.as_tensor(np.flatnonzero(ys == c))]
        xt = target[torch.as_tensor(np.flatnonzero(yt == c))]
        n, m = xs.shape[0], xt.shape[0]
        if n < min_class_count or m < min_class_count or n < 2 or m < 2:
            continue
        k_ss = rbf_kernel(xs, xs, gamma)
        k_tt = rbf_kernel(xt, xt, gamma)
        total += float(
            (k_ss.sum() - k_ss.diagonal().sum()) / (n * (n - 1))
            + (k_tt.sum() - k_tt.diagonal().sum()) / (m * (m - 1))
            - 2.0 * rbf_kernel(xs, xt, gamma).mean()
        )
    return total


def consistency_loss(p_orig: torch.Tensor, p_aug: torch.Tensor, stop_gradient: bool = True) -> torch.Tensor:
    """Batch mean of KL(p_orig || p_aug); p_orig is a fixed target unless stop_gradient=False."""
    if p_orig.shape != p_aug.shape:
        raise ContractError(
            f"consistency_loss: shapes {tuple(p_orig.shape)} and {tuple(p_aug.shape)} differ"
        )
    if stop_gradient:
        p_orig = p_orig.detach()
    kl = (p_orig * (dc.log(p_orig) - dc.log(p_aug))).sum(dim=1)
    return kl.mean()


def overall_loss(l_sl, l_kcmmd, l_c, weights: LossWeights, epoch: int = 0):
    """L_SL + beta0 * L_kCMMD + beta1 * L_C, either weight optionally ramped in linearly."""
    return l_sl + weights.effective_beta0(epoch) * l_kcmmd + weights.effective_beta1(epoch) * l_c
