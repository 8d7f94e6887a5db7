"""Acceptance suite: one pass/fail line per criterion in the terminal summary."""

import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest
import torch
from scipy.stats import spearmanr

import oracles
from conftest import tiny_config
from mudar import augment, cli, data, ensemble, evaluation, model, synthgen, trainer
from mudar import config as cfgio
from mudar import diffcore as dc
from mudar import losses as L
from mudar.data import SensorRecording
from mudar.ensemble import EnsembleConfig
from mudar.trainer import OptimizerConfig, TrainConfig

criterion = pytest.mark.criterion

# scaled-down experiment settings shared by the ladder and the alpha trend
SEEDS = range(5)
EPOCHS = 40
ALPHAS = (0.55, 0.65, 0.75)
ALPHA_MODE = "te_kcmmd"
# consistency warm-up: a constant weight lets the untrained network collapse target outputs
LADDER_OVERRIDES = {"weights": L.LossWeights(consistency_ramp_epochs=10)}


def shift_corpus(seed, **overrides):
    return synthgen.generate(synthgen.ShiftConfig(seed=seed, **overrides))


def run(corpus, seed, **kw):
    tr, va, _ = data.split(corpus.source, data.SplitSpec(seed=seed))
    opt = OptimizerConfig(max_epochs=kw.pop("epochs", EPOCHS), seed=seed)
    cfg = TrainConfig(optimizer=opt, **kw)
    return trainer.train(tr, corpus.target, cfg, validation=va, target_labels=corpus.target_labels)


# -- 1 ----------------------------------------------------------------------------


@criterion(1, "analytic gradients match central finite differences (rel. err <= 1e-4, < 60 s)")
def test_gradients_match_finite_differences():
    started = time.perf_counter()
    mcfg = tiny_config(num_classes=3, channels=3, window_len=36)
    params = model.init(mcfg, seed=0)
    rng = np.random.default_rng(0)
    xs, xt = rng.normal(size=(4, 3, 36)), rng.normal(size=(4, 3, 36))
    xs_aug, xt_aug = rng.normal(size=(4, 3, 36)), rng.normal(size=(4, 3, 36))
    ys, pseudo = np.array([0, 0, 1, 2]), np.array([0, 0, 1, 1])
    # finite differences see the whole function, so the exact-gradient variant is checked here
    cfg = TrainConfig(
        model=mcfg, kernel=L.KernelConfig(gamma=0.5, lam=0.3), ablation="full", stop_gradient_consistency=False
    )

    def losses(trainable):
        return trainer.step_losses(
            params, cfg, mcfg, xs, ys, torch.Generator().manual_seed(5), epoch=3,
            xt=xt, pseudo=pseudo, xs_aug=xs_aug, xt_aug=xt_aug, trainable=trainable,
        )

    def fresh():
        return {k: v.clone().requires_grad_(True) for k, v in params.trainable.items()}

    probe = losses(None)
    assert probe.kcmmd_classes == 1 and float(probe.l_c) > 0
    for term in ("l_sl", "l_kcmmd", "l_c", "total"):
        leaves = fresh()
        analytic = dc.grad(getattr(losses(leaves), term), leaves)
        numeric = dc.finite_difference_grad(lambda tr: float(getattr(losses(tr), term)), leaves)
        err = dc.max_relative_error(analytic, numeric)
        print(f"{term}: max relative error {err:.2e}")
        assert err <= 1e-4, term

    # stop-gradient form: the clean-view prediction is a constant of the objective
    x, x_aug = np.concatenate([xs, xt]), np.concatenate([xs_aug, xt_aug])

    def views(trainable):
        gen = torch.Generator().manual_seed(5)
        state = gen.get_state()
        clean = model.forward(params, x, mcfg, "train", gen, trainable).probabilities
        gen.set_state(state)
        return clean, model.forward(params, x_aug, mcfg, "train", gen, trainable).probabilities

    frozen = views(None)[0].detach()

    def surrogate(trainable):
        p_aug = views(trainable)[1]
        return L.consistency_loss(frozen[:4], p_aug[:4], False) + L.consistency_loss(frozen[4:], p_aug[4:], False)

    leaves = fresh()
    clean, p_aug = views(leaves)
    stopped = L.consistency_loss(clean[:4], p_aug[:4]) + L.consistency_loss(clean[4:], p_aug[4:])
    analytic = dc.grad(stopped, leaves)
    numeric = dc.finite_difference_grad(lambda tr: float(surrogate(tr)), leaves)
    err = dc.max_relative_error(analytic, numeric)
    print(f"l_c with stop-gradient: max relative error {err:.2e}")
    assert err <= 1e-4
    # and the trainer's stop-gradient term differentiates to exactly this
    leaves = fresh()
    sg_cfg = replace(cfg, stop_gradient_consistency=True)
    trained = trainer.step_losses(
        params, sg_cfg, mcfg, xs, ys, torch.Generator().manual_seed(5), epoch=3,
        xt=xt, pseudo=pseudo, xs_aug=xs_aug, xt_aug=xt_aug, trainable=leaves,
    )
    via_trainer = dc.grad(trained.l_c, leaves)
    assert max(float((via_trainer[k] - analytic[k]).abs().max()) for k in leaves) <= 1e-12
    assert time.perf_counter() - started < 60.0


# -- 2 ----------------------------------------------------------------------------


@criterion(2, "vectorized kCMMD equals quadruple-loop reference within 1e-9 on >= 100 instances")
def test_kcmmd_matches_bruteforce():
    rng = np.random.default_rng(2024)
    checked = 0
    for _ in range(150):
        n, m, d, c = rng.integers(1, 21), rng.integers(1, 21), rng.integers(1, 9), rng.integers(1, 5)
        lam = float(rng.choice([0.0, 0.18, 0.45]))
        gamma = float(rng.uniform(0.05, 2.0))
        S, T = rng.normal(size=(n, d)), rng.normal(size=(m, d))
        ys, yt = rng.integers(0, c, n), rng.integers(0, c, m)
        mask = rng.random(m) < 0.8
        ref = oracles.kcmmd_bruteforce(S.tolist(), ys.tolist(), T.tolist(), yt.tolist(), gamma, lam, mask=mask.tolist())
        got, _ = L.kcmmd_loss(
            torch.from_numpy(S), ys, torch.from_numpy(T), yt, mask, L.KernelConfig(lam=lam), gamma=gamma
        )
        assert abs(float(got) - ref) <= 1e-9
        checked += 1
    assert checked >= 100


# -- 3 ----------------------------------------------------------------------------


@criterion(3, "kCMMD anchors: identical sets give lam/n + lam/m; worked example 0.78694")
def test_kcmmd_anchors():
    rng = np.random.default_rng(3)
    for lam in (0.0, 0.18, 0.45):
        x = rng.normal(size=(5, 3))
        y = np.array([0, 0, 1, 1, 1])
        got, diag = L.kcmmd_loss(torch.from_numpy(x), y, torch.from_numpy(x.copy()), y, config=L.KernelConfig(lam=lam), gamma=0.7)
        per_class = [lam / 2 + lam / 2, lam / 3 + lam / 3]
        assert abs(float(got) - np.mean(per_class)) <= 1e-12
        for k, v in zip((0, 1), per_class):
            assert abs(diag.per_class[k] - v) <= 1e-12
    worked, _ = L.kcmmd_loss(
        torch.tensor([[0.0], [0.0]], dtype=torch.float64), [0, 0],
        torch.tensor([[1.0], [1.0]], dtype=torch.float64), [0, 0],
        config=L.KernelConfig(lam=0.0), gamma=0.5,
    )
    assert abs(float(worked) - 0.78694) <= 1e-5
    assert abs(float(worked) - oracles.kcmmd_bruteforce([[0], [0]], [0, 0], [[1], [1]], [0, 0], 0.5, 0.0)) <= 1e-12


# -- 4 ----------------------------------------------------------------------------


@criterion(4, "bias-corrected EMA of a constant is exact for t <= 128; uniform-4 entropy = ln 4")
def test_ensemble_identities():
    p = np.array([[0.1, 0.2, 0.3, 0.4], [0.7, 0.1, 0.1, 0.1]])
    for alpha in (0.55, 0.60, 0.75):
        state = ensemble.EnsembleState.empty(2, 4)
        for t in range(1, 129):
            state = ensemble.update(state, p, alpha)
            assert np.abs(state.corrected(alpha) - p).max() <= 1e-12, (alpha, t)
        assert abs(oracles.ema_corrected([[0.3]] * 128, alpha)[0] - 0.3) <= 1e-12
    assert abs(ensemble.entropy([0.25] * 4) - math.log(4)) <= 1e-12
    assert abs(oracles.entropy([0.25] * 4) - math.log(4)) <= 1e-12


# -- 5 ----------------------------------------------------------------------------


@criterion(5, "final pseudo-label entropy non-increasing in alpha: Spearman rho <= 0 in >= 4 of 5 seeds, < 15 min")
def test_alpha_entropy_trend():
    started = time.perf_counter()
    rhos = []
    for seed in SEEDS:
        corpus = shift_corpus(seed)
        finals = []
        for alpha in ALPHAS:
            _, _, rep = run(corpus, seed, ablation=ALPHA_MODE, ensemble=EnsembleConfig(momentum=alpha))
            finals.append(rep.final.mean_entropy)
        rho = spearmanr(ALPHAS, finals).statistic
        rhos.append(rho)
        print(f"seed {seed}: final entropy {np.round(finals, 4).tolist()} rho {rho:+.2f}")
    elapsed = time.perf_counter() - started
    print(f"rho <= 0 in {sum(r <= 0 for r in rhos)} of {len(rhos)} seeds; {elapsed:.0f} s")
    assert sum(r <= 0 for r in rhos) >= 4
    assert elapsed < 15 * 60


# -- 6 ----------------------------------------------------------------------------


@criterion(6, "ablation ladder full >= te_kcmmd >= te >= baseline (1 pt), full - baseline >= 10 pts, < 10 min/seed")
def test_ablation_ladder():
    modes = ("baseline", "te", "te_kcmmd", "full")
    scores = {m: [] for m in modes}
    for seed in SEEDS:
        started = time.perf_counter()
        corpus = shift_corpus(seed)
        for mode in modes:
            _, _, rep = run(corpus, seed, ablation=mode, **LADDER_OVERRIDES)
            scores[mode].append(rep.best.target_f1)
        elapsed = time.perf_counter() - started
        print(f"seed {seed}: " + " ".join(f"{m}={scores[m][-1]:.3f}" for m in modes) + f" ({elapsed:.0f} s)")
        assert elapsed < 10 * 60
    mean = {m: float(np.mean(v)) for m, v in scores.items()}
    print("mean target macro-F1: " + " ".join(f"{m}={v:.3f}" for m, v in mean.items()))
    assert mean["full"] >= mean["te_kcmmd"] - 0.01
    assert mean["te_kcmmd"] >= mean["te"] - 0.01
    assert mean["te"] >= mean["baseline"] - 0.01
    assert mean["full"] - mean["baseline"] >= 0.10


# -- 7 ----------------------------------------------------------------------------


@criterion(7, "no-shift corpus: source-only training reaches target macro-F1 >= 0.95 within 30 epochs")
def test_no_shift_sanity():
    corpus = shift_corpus(0, rotation_shift_deg=0.0, amplitude_shift=0.0, target_noise_std=0.0)
    _, _, rep = run(corpus, 0, ablation="baseline", epochs=30)
    print(f"best-validation epoch {rep.best_epoch}: target macro-F1 {rep.best.target_f1:.4f}")
    assert rep.best.target_f1 >= 0.95


# -- 8 ----------------------------------------------------------------------------


@criterion(8, "confusion and macro-F1 equal brute-force recounts on 1000 vectors; [[1,1],[0,2]] -> 0.73333")
def test_metric_oracles():
    rng = np.random.default_rng(8)
    for _ in range(1000):
        c = int(rng.integers(2, 7))
        n = int(rng.integers(1, 60))
        y, p = rng.integers(0, c, n), rng.integers(0, c, n)
        m = evaluation.confusion(y, p, c)
        assert m.tolist() == oracles.confusion_recount(y.tolist(), p.tolist(), c)
        assert evaluation.macro_f1(m) == oracles.macro_f1_recount(y.tolist(), p.tolist(), c)
    assert abs(evaluation.macro_f1(np.array([[1, 1], [0, 2]])) - 0.73333) <= 1e-5
    assert abs(evaluation.macro_f1(np.array([[1, 1], [0, 2]])) - 11 / 15) <= 1e-9


# -- 9 ----------------------------------------------------------------------------


@criterion(9, "rotations keep norms (1e-9) and are orthonormal (1e-12); jitter std within 5% at 1e5 samples")
def test_augmentation_invariants():
    rng = np.random.default_rng(9)
    for _ in range(1000):
        R = augment.rotation_matrix(augment.random_axis(rng), rng.uniform(-180, 180))
        assert np.abs(R.T @ R - np.eye(3)).max() <= 1e-12
        x = rng.normal(size=(6, 16)) * rng.uniform(0.1, 10)
        out = augment.rotate(x, rng=rng, max_angle_deg=180.0)
        for g in range(2):
            a = np.linalg.norm(x[3 * g : 3 * g + 3], axis=0)
            b = np.linalg.norm(out[3 * g : 3 * g + 3], axis=0)
            assert np.abs(a - b).max() <= 1e-9
    sigma = 0.055
    noise = augment.jitter(np.zeros((1, 100_000)), sigma, rng)
    assert abs(noise.std() - sigma) <= 0.05 * sigma


# -- 10 ---------------------------------------------------------------------------


@criterion(10, "two identical train runs write byte-identical report CSVs")
def test_cli_train_determinism(tmp_path):
    def main(*argv):
        return cli.main([str(a) for a in argv])

    assert main("synth", "--out", tmp_path / "raw", "--samples-per-class", 30, "--seed", 4) == 0
    assert main("prepare", "--input", tmp_path / "raw/source.csv", "--domain", "source", "--out", tmp_path / "src",
                "--window-len", 48) == 0
    assert main("prepare", "--input", tmp_path / "raw/target.csv", "--domain", "target", "--out", tmp_path / "tgt",
                "--window-len", 48, "--stats", tmp_path / "src.stats.csv") == 0
    cfg = TrainConfig(optimizer=OptimizerConfig(max_epochs=4))
    (tmp_path / "c.json").write_text(cfgio.dumps(cfg))
    reports = []
    for name in ("a", "b"):
        code = main("train", "--config", tmp_path / "c.json", "--source", tmp_path / "src", "--target", tmp_path / "tgt",
                    "--seed", 11, "--out", tmp_path / name)
        assert code == 0
        reports.append((tmp_path / name / "report.csv").read_bytes())
    assert reports[0] == reports[1]
    assert json.loads((tmp_path / "a/manifest.json").read_text())["seed"] == 11


# -- 11 ---------------------------------------------------------------------------


def _rec(channels, labels=None):
    channels = np.atleast_2d(np.asarray(channels, dtype=np.float64))
    return SensorRecording("s", "source", 25.0, channels, None if labels is None else np.asarray(labels))


@criterion(11, "median filter, min-max, majority vote and windowing examples reproduce exactly")
def test_preprocessing_examples():
    assert data.median_filter(_rec([1, 9, 1]), 3).channels.tolist() == [[1, 1, 1]]
    assert oracles.median_replicate([1, 9, 1], 3) == [1, 1, 1]
    x = np.random.default_rng(11).normal(size=(2, 9))
    assert np.array_equal(data.median_filter(_rec(x), 1).channels, x)
    assert data.median_filter(_rec([5, 5, 5, 5]), 3).channels.tolist() == [[5, 5, 5, 5]]

    stats = data.fit_minmax(np.array([[2.0, 4.0, 6.0], [7.0, 7.0, 7.0]]))
    assert data.apply_minmax(np.array([[2.0, 4.0, 6.0], [7.0, 7.0, 7.0]]), stats).tolist() == [[0, 0.5, 1], [0, 0, 0]]
    stored = data.MinMaxStats(np.array([0.0]), np.array([10.0]))
    assert data.apply_minmax(np.array([[5.0]]), stored).tolist() == [[0.5]]

    assert data.window_stride(25, 0.40) == 15
    offsets = data.window_offsets(100, 25, 0.40)
    assert offsets == [0, 15, 30, 45, 60, 75] and (len(offsets), 15) == oracles.window_count(100, 25, 0.40)
    assert data.window_offsets(100, 25, 0.0) == [0, 25, 50, 75]
    w = data.make_windows(_rec(np.zeros(3), [2, 2, 3]), 3, 0.0)
    assert [win.label for win in w] == [2]

    for labels, want in (([0, 0, 1], 0), ([1, 2], 1), ([3, 3, 3], 3)):
        assert data.majority_vote(labels) == want == oracles.majority(labels)

    ds = data.WindowedDataset(
        [data.Window(np.zeros((1, 2)), k % 2, "s", "source", k) for k in range(100)], 2, 1, 2
    )
    tr, va, te = data.split(ds, data.SplitSpec(seed=0))
    assert (len(tr), len(va), len(te)) == (60, 20, 20)

    assert data.window_len_from_ms(1000, 25.0) == 25
    assert data.window_stride(25, 0.5) == 13 == oracles.round_half_up(25 * 0.5)
