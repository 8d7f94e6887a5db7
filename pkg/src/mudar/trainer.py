"""Joint source-supervised / target-adaptive training loop.

Randomness is split once from ``OptimizerConfig.seed`` with
``numpy.random.SeedSequence(seed).spawn(4)`` into: weight init, batch
shuffling, dropout masks and augmentation draws. Each stream is consumed only
by its own concern, so switching a loss term off never shifts the others.
"""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from . import diffcore as dc
from . import ensemble as ens
from .augment import AugmentConfig, augment_batch
from .data import WindowedDataset
from .errors import ContractError
from .evaluation import confusion, macro_f1
from .losses import KernelConfig, LossWeights, ce_loss, consistency_loss, kcmmd_loss
from .model import ModelConfig, Parameters, forward, init, predict_proba

log = logging.getLogger(__name__)

ABLATIONS = ("baseline", "te", "te_kcmmd", "full")


@dataclass
class OptimizerConfig:
    lr: float = 0.001
    # cosine decay from lr to lr * final_lr_fraction over max_epochs (0.001 -> 0.0003)
    final_lr_fraction: float = 0.3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ContractError(f"learning rate must be >= 0, got {self.lr}")
        if self.batch_size < 2:
            raise ContractError(f"batch size must be >= 2, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ContractError("max_epochs must be >= 1")

    def lr_at(self, epoch: int) -> float:
        if self.max_epochs == 1:
            return self.lr
        progress = epoch / (self.max_epochs - 1)
        f = self.final_lr_fraction
        return self.lr * (f + (1.0 - f) * 0.5 * (1.0 + math.cos(math.pi * progress)))


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    ensemble: ens.EnsembleConfig = field(default_factory=ens.EnsembleConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    ablation: str = "full"
    patience: int = 20
    ensembling: bool = True
    stop_gradient_consistency: bool = True

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ContractError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")

    @property
    def uses_ensemble(self) -> bool:
        return self.ensembling and self.ablation != "baseline"

    @property
    def beta0(self) -> float:
        return self.weights.beta0 if self.ablation in ("te_kcmmd", "full") else 0.0

    @property
    def beta1(self) -> float:
        return self.weights.beta1 if self.ablation == "full" else 0.0


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    l_sl: float
    l_kcmmd: float
    l_c: float
    total: float
    val_f1: float
    target_f1: float
    pseudo_f1: float
    mean_entropy: float
    kcmmd_classes: int
    steps: int
    aborted: bool = False


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    wall_clock_s: float = 0.0

    COLUMNS = (
        "epoch", "lr", "l_sl", "l_kcmmd", "l_c", "total", "val_f1", "target_f1",
        "pseudo_f1", "mean_entropy", "kcmmd_classes", "steps", "aborted",
    )

    def to_csv(self) -> str:
        """Per-epoch table; no timing fields so identical runs give identical bytes."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.epochs:
            w.writerow([_fmt(getattr(r, c)) for c in self.COLUMNS])
        return buf.getvalue()

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.epochs], dtype=np.float64)

    @property
    def final(self) -> EpochRecord:
        return self.epochs[-1]

    @property
    def best(self) -> EpochRecord:
        return self.epochs[self.best_epoch]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


# -- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0


class NonFiniteGradient(ArithmeticError):
    pass


def adam_step(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, torch.Tensor], AdamState]:
    """One bias-corrected Adam update; refuses to move on non-finite gradients."""
    for k, p in params.items():
        if k not in grads or grads[k].shape != p.shape:
            raise ContractError(f"adam_step: gradient for {k} missing or misshapen")
        if not bool(torch.isfinite(grads[k]).all()):
            raise NonFiniteGradient(f"non-finite gradient for {k}")
    step = state.step + 1
    new_params, m, v = {}, {}, {}
    for k, p in params.items():
        g = grads[k].detach()
        m[k] = beta1 * state.m.get(k, torch.zeros_like(g)) + (1 - beta1) * g
        v[k] = beta2 * state.v.get(k, torch.zeros_like(g)) + (1 - beta2) * g * g
        m_hat = m[k] / (1 - beta1**step)
        v_hat = v[k] / (1 - beta2**step)
        new_params[k] = (p.detach() - lr * m_hat / (torch.sqrt(v_hat) + eps)).clone()
    return new_params, AdamState(m, v, step)


# -- losses for one step --------------------------------------------------------


@dataclass
class StepLosses:
    l_sl: torch.Tensor
    l_kcmmd: torch.Tensor
    l_c: torch.Tensor
    total: torch.Tensor
    running: dict[str, torch.Tensor]
    kcmmd_classes: int = 0


def step_losses(
    params: Parameters,
    config: TrainConfig,
    model_config: ModelConfig,
    xs,
    ys,
    generator: torch.Generator,
    epoch: int = 0,
    xt=None,
    pseudo=None,
    mask=None,
    xs_aug=None,
    xt_aug=None,
    gamma: float | None = None,
    trainable: dict[str, torch.Tensor] | None = None,
) -> StepLosses:
    """The weighted objective for one paired batch.

    Terms whose effective weight is zero are not evaluated at all (no
    forward pass, no random draws). kCMMD runs only when ``pseudo`` is given.
    """
    run = replace(params, running=dict(params.running))

    def fwd(*parts, masks_from=None):
        # one joint pass so batchnorm sees source and target together
        if masks_from is not None:
            generator.set_state(masks_from)
        x = np.concatenate(parts) if len(parts) > 1 else parts[0]
        out = forward(run, x, model_config, mode="train", generator=generator, trainable=trainable)
        run.running = {k: v.detach() for k, v in out.running.items()}
        bounds = np.cumsum([0] + [len(p) for p in parts])
        return [
            (out.embedding[a:b], out.probabilities[a:b]) for a, b in zip(bounds[:-1], bounds[1:])
        ]

    beta0 = config.weights.effective_beta0(epoch) if config.beta0 > 0 else 0.0
    beta1 = config.weights.effective_beta1(epoch) if config.beta1 > 0 else 0.0
    need_kcmmd = beta0 > 0 and pseudo is not None and xt is not None
    need_target = xt is not None and (need_kcmmd or (beta1 > 0 and xt_aug is not None))
    # augmented passes replay the original pass's dropout masks
    dropout_state = generator.get_state()
    if need_target:
        (emb_s, p_s), (emb_t, p_t) = fwd(xs, xt)
    else:
        ((emb_s, p_s),) = fwd(xs)
    zero = p_s.sum() * 0.0
    l_sl = ce_loss(p_s, ys)
    l_k, used = zero, 0
    if need_kcmmd:
        l_k, diag = kcmmd_loss(emb_s, ys, emb_t, pseudo, mask, config.kernel, gamma=gamma)
        used = len(diag.classes_used)
    l_c = zero
    if beta1 > 0 and xs_aug is not None:
        sg = config.stop_gradient_consistency
        if need_target and xt_aug is not None:
            (_, pa_s), (_, pa_t) = fwd(xs_aug, xt_aug, masks_from=dropout_state)
            l_c = consistency_loss(p_s, pa_s, sg) + consistency_loss(p_t, pa_t, sg)
        else:
            ((_, pa_s),) = fwd(xs_aug, masks_from=dropout_state)
            l_c = consistency_loss(p_s, pa_s, sg)
    total = l_sl + beta0 * l_k + beta1 * l_c
    return StepLosses(l_sl, l_k, l_c, total, run.running, used)


# -- training -----------------------------------------------------------------


def _cycled(perm: np.ndarray, length: int) -> np.ndarray:
    return np.resize(perm, length)


def _f1(y_true: np.ndarray, y_pred: np.ndarray, c: int) -> float:
    if len(y_true) == 0:
        return float("nan")
    return macro_f1(confusion(y_true, y_pred, c))


def train(
    source: WindowedDataset,
    target: WindowedDataset | None,
    config: TrainConfig,
    validation: WindowedDataset | None = None,
    target_labels: np.ndarray | None = None,
    epoch_callback: Callable[[int, EpochRecord, ens.EnsembleState | None], None] | None = None,
) -> tuple[Parameters, ens.EnsembleState | None, TrainReport]:
    """Train on labeled ``source`` while adapting to unlabeled ``target``.

    Returns the best-validation parameters (latest epoch among ties), the
    final ensemble state (None when ensembling is off) and the report.
    """
    started = time.perf_counter()
    if not source.is_labeled:
        raise ContractError("source dataset must be fully labeled")
    if target is not None and (target.channel_count, target.window_len) != (source.channel_count, source.window_len):
        raise ContractError(
            f"target windows ({target.channel_count}, {target.window_len}) do not match "
            f"source windows ({source.channel_count}, {source.window_len})"
        )
    opt = config.optimizer
    mcfg = config.model.bind(source.channel_count, source.window_len, source.num_classes)
    init_seq, shuffle_seq, dropout_seq, augment_seq = np.random.SeedSequence(opt.seed).spawn(4)
    params = init(mcfg, seed=int(init_seq.generate_state(1)[0]))
    shuffle_rng = np.random.default_rng(shuffle_seq)
    augment_rng = np.random.default_rng(augment_seq)
    generator = torch.Generator().manual_seed(int(dropout_seq.generate_state(1)[0]))

    xs_all, ys_all = source.x, source.y
    xt_all = target.x if target is not None and len(target) else None
    n_s = len(xs_all)
    n_t = 0 if xt_all is None else len(xt_all)
    c = source.num_classes
    state = ens.EnsembleState.empty(n_t, c) if (config.uses_ensemble and n_t) else None
    alpha = config.ensemble.momentum
    x_val = validation.x if validation is not None and len(validation) else None
    adam = AdamState()
    report = TrainReport()
    best_f1, best_params, since_best = -math.inf, params.copy(), 0
    steps_per_epoch = math.ceil(max(n_s, n_t) / opt.batch_size)
    uses_target = n_t > 0 and (config.beta0 > 0 or config.beta1 > 0)

    for epoch in range(opt.max_epochs):
        lr = opt.lr_at(epoch)
        perm_s = _cycled(shuffle_rng.permutation(n_s), steps_per_epoch * opt.batch_size)
        perm_t = _cycled(shuffle_rng.permutation(n_t), steps_per_epoch * opt.batch_size) if n_t else None
        pseudo = mask = None
        if state is not None and state.t > 0:
            pseudo, mask = ens.pseudo_labels(state, alpha, config.ensemble.confidence_threshold)
        sums = np.zeros(4)
        used_classes = set()
        steps, aborted = 0, False
        for b in range(steps_per_epoch):
            lo, hi = b * opt.batch_size, min((b + 1) * opt.batch_size, max(n_s, n_t))
            if hi - lo < 2:
                continue
            si = perm_s[lo:hi]
            xs, ys = xs_all[si], ys_all[si]
            xt = ti = None
            if uses_target:
                ti = perm_t[lo:hi]
                xt = xt_all[ti]
            xs_aug = xt_aug = None
            if config.beta1 > 0:
                xs_aug = augment_batch(xs, config.augment, augment_rng)
                if xt is not None:
                    xt_aug = augment_batch(xt, config.augment, augment_rng)
            trainable = {k: v.detach().requires_grad_(True) for k, v in params.trainable.items()}
            losses = step_losses(
                params, config, mcfg, xs, ys, generator, epoch,
                xt=xt,
                pseudo=None if pseudo is None or ti is None else pseudo[ti],
                mask=None if mask is None or ti is None else mask[ti],
                xs_aug=xs_aug, xt_aug=xt_aug, trainable=trainable,
            )
            grads = dc.grad(losses.total, trainable)
            try:
                new_trainable, adam = adam_step(trainable, grads, adam, lr, opt.beta1, opt.beta2, opt.eps)
            except NonFiniteGradient as exc:
                log.warning("epoch %d step %d aborted: %s", epoch, b, exc)
                aborted = True
                break
            params = Parameters(new_trainable, losses.running)
            sums += [float(t.detach()) for t in (losses.l_sl, losses.l_kcmmd, losses.l_c, losses.total)]
            if losses.kcmmd_classes:
                used_classes.add(losses.kcmmd_classes)
            steps += 1
        means = sums / max(steps, 1)
        if config.beta0 > 0 and pseudo is not None and not used_classes and steps:
            warnings.warn(f"epoch {epoch}: kCMMD skipped every class in every batch", stacklevel=2)

        target_probs = predict_proba(params, xt_all, mcfg) if xt_all is not None else None
        mean_entropy = pseudo_f1 = float("nan")
        if state is not None:
            state = ens.update(state, target_probs, alpha)
            z_hat = state.corrected(alpha)
            mean_entropy = float(ens.row_entropies(z_hat).mean())
            if target_labels is not None:
                pseudo_f1 = _f1(target_labels, z_hat.argmax(axis=1), c)
        target_f1 = float("nan")
        if target_labels is not None and target_probs is not None:
            target_f1 = _f1(target_labels, target_probs.argmax(axis=1), c)
        val_f1 = float("nan")
        if x_val is not None:
            val_f1 = _f1(validation.y, predict_proba(params, x_val, mcfg).argmax(axis=1), c)

        record = EpochRecord(
            epoch, lr, *map(float, means), val_f1, target_f1, pseudo_f1, mean_entropy,
            max(used_classes, default=0), steps, aborted,
        )
        report.epochs.append(record)
        if epoch_callback is not None:
            epoch_callback(epoch, record, state)

        score = val_f1 if x_val is not None else 0.0
        if score >= best_f1:
            best_f1, best_params, since_best = score, params.copy(), 0
            report.best_epoch = epoch
        else:
            since_best += 1
            if x_val is not None and since_best >= config.patience:
                log.info("early stop at epoch %d (best %d)", epoch, report.best_epoch)
                break

    report.wall_clock_s = time.perf_counter() - started
    return best_params, state, report


# -- grid search ----------------------------------------------------------------

GRID_KEYS = {
    "alpha": ("ensemble", "momentum"),
    "lam": ("kernel", "lam"),
    "lr": ("optimizer", "lr"),
    "gamma": ("kernel", "gamma"),
    "jitter_sigma": ("augment", "jitter_sigma"),
    "rotation_deg": ("augment", "rotation_deg"),
    "beta0": ("weights", "beta0"),
    "beta1": ("weights", "beta1"),
}
DATA_KEYS = ("window_len", "overlap", "window_ms")


def apply_point(template: TrainConfig, point: Mapping[str, float]) -> TrainConfig:
    cfg = template
    for key, value in point.items():
        if key in DATA_KEYS:
            continue
        if key not in GRID_KEYS:
            raise ContractError(f"unknown grid parameter {key!r}")
        section, attr = GRID_KEYS[key]
        cfg = replace(cfg, **{section: replace(getattr(cfg, section), **{attr: value})})
    return cfg


@dataclass
class GridResult:
    point: dict
    best_val_f1: float
    report: TrainReport


def expand_grid(grid: Mapping[str, Sequence]) -> list[dict]:
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ContractError("grid search needs a non-empty grid")
    keys = sorted(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def grid_search(
    template: TrainConfig,
    grid: Mapping[str, Sequence],
    datasets: Callable[[dict], tuple[WindowedDataset, WindowedDataset | None, WindowedDataset]],
    target_labels_fn: Callable[[dict], np.ndarray | None] | None = None,
    runner: Callable | None = None,
) -> list[GridResult]:
    """Train one run per grid point and rank by best validation macro-F1.

    ``datasets(point)`` returns (source_train, target, source_validation);
    window parameters in the point are for it to interpret. Test data never
    enters. Ties are broken by the point's sorted key/value tuple, so the
    ranking does not depend on the grid's enumeration order.
    """
    points = expand_grid(grid)
    run = runner or _run_point
    return rank_results([run(template, p, datasets, target_labels_fn) for p in points])


def rank_results(results: Sequence[GridResult]) -> list[GridResult]:
    return sorted(results, key=lambda r: (-_nan_low(r.best_val_f1), tuple(sorted(r.point.items()))))


def _nan_low(v: float) -> float:
    return -math.inf if math.isnan(v) else v


def _run_point(template, point, datasets, target_labels_fn) -> GridResult:
    cfg = apply_point(template, point)
    src, tgt, val = datasets(point)
    labels = target_labels_fn(point) if target_labels_fn else None
    _, _, report = train(src, tgt, cfg, validation=val, target_labels=labels)
    vals = report.column("val_f1")
    best = float(np.nanmax(vals)) if np.isfinite(vals).any() else float("nan")
    return GridResult(dict(point), best, report)
