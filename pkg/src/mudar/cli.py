"""Command-line entry point: ``mudar <command> [options]``.

Commands: init-config, synth, prepare, train, eval, sweep. Each command writes
its outputs plus a ``manifest.json`` run manifest into one output directory.

Environment:
    MUDAR_OUTPUT_DIR  base directory for outputs when ``--out`` is omitted
                      (default ``./mudar-out``; each command uses a subdirectory)
    MUDAR_WORKERS     worker processes for ``sweep`` (default 1)

Exit codes: 0 success, 2 usage error, 3 contract or data error,
4 file format or config schema error, 5 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgio
from . import data, ensemble, evaluation, model, synthgen, trainer
from .errors import ContractError, FormatError, NumericDomainError

log = logging.getLogger("mudar")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONTRACT = 3
EXIT_FORMAT = 4
EXIT_NUMERIC = 5


class UsageError(Exception):
    pass


# -- run manifest ------------------------------------------------------------------


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    seed: int | None = None
    config_path: str | None = None
    config_sha256: str | None = None
    inputs: dict[str, str] = field(default_factory=dict)  # path -> sha256
    outputs: dict[str, str] = field(default_factory=dict)  # path -> sha256
    extra: dict = field(default_factory=dict)
    code_version: str = __version__
    started_utc: str = ""
    finished_utc: str = ""

    def add_input(self, path: str | Path) -> None:
        p = Path(path)
        self.inputs[str(p)] = file_digest(p)

    def add_output(self, path: str | Path) -> None:
        p = Path(path)
        self.outputs[str(p)] = file_digest(p)

    def write(self, target: Path) -> Path:
        self.finished_utc = _now()
        atomic_write(target, json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return target


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def window_input_files(prefix: str | Path) -> list[Path]:
    p = Path(prefix)
    if p.name.endswith(".manifest.csv"):
        p = p.with_name(p.name[: -len(".manifest.csv")])
    return [p.with_name(p.name + ".manifest.csv"), p.with_name(p.name + ".npy")]


def output_dir(arg: str | None, command: str) -> Path:
    if arg:
        out = Path(arg)
    else:
        out = Path(os.environ.get("MUDAR_OUTPUT_DIR", "mudar-out")) / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def workers_from_env(arg: int | None) -> int:
    if arg is not None:
        n = arg
    else:
        raw = os.environ.get("MUDAR_WORKERS", "1")
        try:
            n = int(raw)
        except ValueError:
            raise UsageError(f"MUDAR_WORKERS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"worker count must be >= 1, got {n}")
    return n


# -- commands ----------------------------------------------------------------------


def cmd_init_config(args, manifest: RunManifest) -> None:
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write(path, cfgio.dumps(trainer.TrainConfig()))
    print(f"wrote {path}")


def cmd_synth(args, manifest: RunManifest) -> Path:
    out = output_dir(args.out, "synth")
    cfg = synthgen.ShiftConfig(
        num_classes=args.num_classes,
        channels=args.channels,
        window_len=args.window_len,
        samples_per_class=args.samples_per_class,
        subjects_per_domain=args.subjects,
        sample_rate_hz=args.sample_rate,
        rotation_shift_deg=args.rotation_shift,
        user_rotation_deg=args.user_rotation,
        amplitude_shift=args.amplitude_shift,
        noise_std=args.noise_std,
        target_noise_std=args.target_noise_std,
        offset_spread_deg=args.offset_spread,
        frequency_step=args.frequency_step,
        seed=args.seed,
    )
    manifest.seed = args.seed
    manifest.extra["shift_config"] = asdict(cfg)
    corpus = synthgen.generate(cfg)
    paths = [out / "source.csv", out / "target.csv", out / "target_labels.csv"]
    data.write_csv(corpus.source_recordings, paths[0])
    data.write_csv(corpus.target_recordings, paths[1], include_labels=False)
    data.write_timestep_labels(corpus.target_timestep_labels, cfg.sample_rate_hz, paths[2])
    for p in paths:
        manifest.add_output(p)
    print(f"source windows={len(corpus.source)} target windows={len(corpus.target)} -> {out}")
    return out


def _attach_labels(recordings, tracks: dict[str, np.ndarray]):
    out = []
    for r in recordings:
        if r.subject_id not in tracks:
            raise ContractError(f"label file has no labels for subject {r.subject_id!r}")
        lab = tracks[r.subject_id]
        if len(lab) != r.num_timesteps:
            raise ContractError(
                f"label file holds {len(lab)} labels for subject {r.subject_id!r} with {r.num_timesteps} samples"
            )
        out.append(replace(r, labels=lab))
    return out


def cmd_prepare(args, manifest: RunManifest) -> Path:
    if args.window_ms is None and args.window_len is None:
        args.window_ms = 1000.0
    if args.median_kernel < 1:
        raise UsageError("--median-kernel must be >= 1")
    manifest.add_input(args.input)
    manifest.seed = args.seed
    recordings = [r for r in data.read_csv(args.input, args.sample_rate) if r.domain == args.domain]
    if not recordings:
        raise ContractError(f"{args.input} holds no rows for domain {args.domain!r}")
    if args.domain == "source" and any(r.labels is None for r in recordings):
        raise ContractError("source recordings must be labeled (missing or empty 'label' column)")

    rates = sorted({round(r.sample_rate_hz, 6) for r in recordings})
    if args.window_len is not None:
        window_len = args.window_len
    else:
        if len(rates) > 1:
            raise ContractError(f"recordings disagree on sample rate: {rates}")
        window_len = data.window_len_from_ms(args.window_ms, recordings[0].sample_rate_hz)
    stride = data.window_stride(window_len, args.overlap)

    hidden_tracks = None
    if args.domain == "target":
        if all(r.labels is not None for r in recordings):
            hidden_tracks = True
        elif args.label_file:
            manifest.add_input(args.label_file)
            recordings = _attach_labels(recordings, data.read_timestep_labels(args.label_file))
            hidden_tracks = True
        if args.hidden_labels and not hidden_tracks:
            raise ContractError("--hidden-labels needs labels in the input or a --label-file")

    if args.median_kernel > 1:
        recordings = [data.median_filter(r, args.median_kernel) for r in recordings]
    dataset = data.build_dataset(recordings, window_len, args.overlap)
    if len(dataset) == 0:
        raise ContractError(f"no windows: every recording is shorter than W={window_len}")

    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    stats_path = prefix.with_name(prefix.name + ".stats.csv")
    if args.domain == "source":
        dataset = data.tag_splits(dataset, data.SplitSpec(seed=args.seed))
        stats = data.fit_minmax(dataset.part("train").x)
    elif args.stats:
        manifest.add_input(args.stats)
        stats = data.load_stats(args.stats)
        if stats.minimum.shape[0] != dataset.channel_count:
            raise ContractError(
                f"statistics cover {stats.minimum.shape[0]} channels, data has {dataset.channel_count}"
            )
    else:
        # unlabeled target data only; no label information reaches the statistics
        stats = data.fit_minmax(dataset.x)
    dataset, _ = data.minmax_normalize(dataset, stats)

    if args.domain == "target":
        hidden = dataset.y
        dataset = dataset.unlabeled()
        if args.hidden_labels:
            data.save_labels(hidden, args.hidden_labels)
            manifest.add_output(args.hidden_labels)
    written = data.save_windows(dataset, prefix)
    data.save_stats(stats, stats_path)
    for p in (*written, stats_path):
        manifest.add_output(p)
    manifest.extra.update(window_len=window_len, stride=stride, overlap=args.overlap, windows=len(dataset))
    print(f"windows={len(dataset)} window_len={window_len} stride={stride} -> {written[0]}")
    return prefix.with_name(prefix.name + ".run.json")


def _resolve_sweep(spec: str) -> dict:
    if spec == "best":
        path = Path(os.environ.get("MUDAR_OUTPUT_DIR", "mudar-out")) / "sweep" / "ranked.csv"
    else:
        path = Path(spec)
        if path.is_dir():
            path = path / "ranked.csv"
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise ContractError(f"cannot read sweep table {path} ({exc.strerror})") from None
    if not rows:
        raise FormatError(f"{path}: empty sweep table")
    top = min(rows, key=lambda r: int(r["rank"]))
    try:
        return {k: float(v) for k, v in top.items() if k not in ("rank", "best_val_f1")}
    except ValueError as exc:
        raise FormatError(f"{path}: bad sweep value ({exc})") from None


def _load_train_inputs(args, manifest: RunManifest, seed: int):
    for p in window_input_files(args.source):
        manifest.add_input(p)
    source = data.load_windows(args.source)
    if not source.is_labeled:
        raise ContractError(f"{args.source}: source windows must be labeled")
    if not source.has_splits:
        source = data.tag_splits(source, data.SplitSpec(seed=seed))
    target = None
    if args.target:
        for p in window_input_files(args.target):
            manifest.add_input(p)
        target = data.load_windows(args.target).unlabeled()
    labels = None
    if args.target_labels:
        if target is None:
            raise UsageError("--target-labels needs --target")
        manifest.add_input(args.target_labels)
        labels = data.load_labels(args.target_labels)
        if len(labels) != len(target):
            raise ContractError(f"{len(labels)} hidden labels for {len(target)} target windows")
    return source, target, labels


def _load_config(args, manifest: RunManifest) -> trainer.TrainConfig:
    if args.config:
        cfg, digest = cfgio.load(args.config)
        manifest.config_path, manifest.config_sha256 = str(args.config), digest
    else:
        cfg = trainer.TrainConfig()
        manifest.config_sha256 = hashlib.sha256(cfgio.dumps(cfg).encode()).hexdigest()
    return cfgio.with_seed(cfg, args.seed)


def cmd_train(args, manifest: RunManifest) -> Path:
    out = output_dir(args.out, "train")
    cfg = _load_config(args, manifest)
    if args.from_sweep:
        point = _resolve_sweep(args.from_sweep)
        cfg = trainer.apply_point(cfg, point)
        manifest.extra["sweep_point"] = point
    if args.ablation:
        cfg = replace(cfg, ablation=args.ablation)
    manifest.seed = args.seed
    source, target, labels = _load_train_inputs(args, manifest, args.seed)
    params, state, report = trainer.train(
        source.part("train"), target, cfg, validation=source.part("val"), target_labels=labels
    )
    mcfg = cfg.model.bind(source.channel_count, source.window_len, source.num_classes)
    ckpt, rep, eff = out / "checkpoint.npz", out / "report.csv", out / "config.effective.json"
    model.save_checkpoint(
        ckpt, params, mcfg, args.seed,
        {"ablation": cfg.ablation, "best_epoch": report.best_epoch, "config_sha256": manifest.config_sha256},
    )
    rep.write_text(report.to_csv(), encoding="utf-8")
    eff.write_text(cfgio.dumps(cfg), encoding="utf-8")
    outputs = [ckpt, rep, eff]
    if state is not None:
        ens_path = out / "ensemble.csv"
        ensemble.dump_epoch(ens_path, len(report.epochs) - 1, state.corrected(cfg.ensemble.momentum), append=False)
        outputs.append(ens_path)
    for p in outputs:
        manifest.add_output(p)
    best = report.best
    manifest.extra.update(best_epoch=report.best_epoch, epochs=len(report.epochs), wall_clock_s=report.wall_clock_s)
    msg = f"ablation={cfg.ablation} epochs={len(report.epochs)} best_epoch={report.best_epoch} val_f1={best.val_f1:.4f}"
    if labels is not None:
        msg += f" target_f1={best.target_f1:.4f}"
    print(msg)
    return out


def cmd_eval(args, manifest: RunManifest) -> Path:
    out = output_dir(args.out, "eval")
    manifest.add_input(args.checkpoint)
    params, mcfg, header = model.load_checkpoint(args.checkpoint)
    manifest.seed = header.get("seed")
    for p in window_input_files(args.data):
        manifest.add_input(p)
    ds = data.load_windows(args.data)
    split = args.split or ("test" if ds.has_splits else "all")
    if split != "all":
        if not ds.has_splits:
            raise ContractError(f"{args.data} carries no split tags; use --split all")
        ds = ds.part(split)
    if (ds.channel_count, ds.window_len) != (mcfg.in_channels, mcfg.window_len):
        raise ContractError(
            f"data windows ({ds.channel_count}, {ds.window_len}) do not fit the checkpoint "
            f"({mcfg.in_channels}, {mcfg.window_len})"
        )
    labels = None
    if args.labels:
        manifest.add_input(args.labels)
        labels = data.load_labels(args.labels)
        if len(labels) != len(ds):
            raise ContractError(f"{len(labels)} labels for {len(ds)} windows")
    elif ds.is_labeled:
        labels = ds.y
    probs = model.predict_proba(params, ds.x, mcfg)
    preds = probs.argmax(axis=1)
    ent = ensemble.row_entropies(probs)
    summary = {"windows": len(ds), "split": split, "mean_entropy": float(ent.mean()) if len(ds) else None}
    outputs = []
    pred_path = out / "predictions.csv"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["window_id", "predicted", "entropy"] + [f"p_{k}" for k in range(probs.shape[1])])
    for i in range(len(ds)):
        w.writerow([i, int(preds[i]), repr(float(ent[i]))] + [repr(float(v)) for v in probs[i]])
    pred_path.write_text(buf.getvalue(), encoding="utf-8")
    outputs.append(pred_path)
    if labels is not None:
        rep = evaluation.score(labels, preds, mcfg.num_classes, probs)
        summary["macro_f1"] = rep.macro_f1
        per_class = out / "per_class.csv"
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(rep.rows())
        per_class.write_text(buf.getvalue(), encoding="utf-8")
        conf = out / "confusion.csv"
        conf.write_text(evaluation.confusion_csv(evaluation.confusion(labels, preds, mcfg.num_classes)), encoding="utf-8")
        outputs += [per_class, conf]
    else:
        summary["macro_f1"] = None
    if args.embeddings:
        emb = out / "embeddings.csv"
        emb.write_text(
            evaluation.embeddings_csv(model.embed(params, ds.x, mcfg), labels, preds), encoding="utf-8"
        )
        outputs.append(emb)
    metrics = out / "metrics.json"
    metrics.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    outputs.append(metrics)
    for p in outputs:
        manifest.add_output(p)
    if summary["macro_f1"] is None:
        print(f"windows={len(ds)} mean_entropy={summary['mean_entropy']:.6f} (no labels)")
    else:
        print(f"windows={len(ds)} macro_f1={summary['macro_f1']:.6f} mean_entropy={summary['mean_entropy']:.6f}")
    return out


def _parse_grid(items: list[str] | None) -> dict[str, list]:
    grid: dict[str, list] = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"grid entry {item!r} is not KEY=v1,v2,...")
        key, _, values = item.partition("=")
        key = key.strip()
        if key in trainer.DATA_KEYS:
            raise UsageError(f"grid key {key!r} needs raw data; sweep window parameters through the library API")
        if key not in trainer.GRID_KEYS:
            raise UsageError(f"unknown grid key {key!r}; choose from {sorted(trainer.GRID_KEYS)}")
        try:
            parsed = [float(v) for v in values.split(",") if v.strip()]
        except ValueError:
            raise UsageError(f"grid values for {key!r} must be numbers") from None
        if not parsed:
            raise UsageError(f"grid key {key!r} has no values")
        grid[key] = parsed
    if not grid:
        raise UsageError("sweep needs a non-empty grid (--grid KEY=v1,v2,...)")
    return grid


def _sweep_point(job: dict) -> tuple[dict, float, list[float], str]:
    """Runs in a worker process; everything it needs arrives by value."""
    import torch

    torch.set_num_threads(1)
    cfg = trainer.apply_point(cfgio.from_dict(job["config"]), job["point"])
    source = data.load_windows(job["source"])
    if not source.has_splits:
        source = data.tag_splits(source, data.SplitSpec(seed=job["seed"]))
    target = data.load_windows(job["target"]).unlabeled() if job["target"] else None
    labels = data.load_labels(job["labels"]) if job["labels"] else None
    _, _, report = trainer.train(source.part("train"), target, cfg, validation=source.part("val"), target_labels=labels)
    run_dir = Path(job["run_dir"])
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    vals = report.column("val_f1")
    best = float(np.nanmax(vals)) if np.isfinite(vals).any() else float("nan")
    return job["point"], best, report.column("mean_entropy").tolist(), str(run_dir / "report.csv")


def cmd_sweep(args, manifest: RunManifest) -> Path:
    grid = _parse_grid(args.grid)
    out = output_dir(args.out, "sweep")
    cfg = _load_config(args, manifest)
    manifest.seed = args.seed
    _load_train_inputs(args, manifest, args.seed)  # validates inputs and records digests up front
    points = trainer.expand_grid(grid)
    jobs = [
        {
            "config": cfgio.to_dict(cfg),
            "point": p,
            "seed": args.seed,
            "source": str(args.source),
            "target": str(args.target) if args.target else None,
            "labels": str(args.target_labels) if args.target_labels else None,
            "run_dir": str(out / "runs" / f"point_{k:03d}"),
        }
        for k, p in enumerate(points)
    ]
    n_workers = min(workers_from_env(args.workers), len(jobs))
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_sweep_point, jobs))
    else:
        results = [_sweep_point(j) for j in jobs]
    curves = {tuple(sorted(p.items())): c for p, _, c, _ in results}
    ranked = trainer.rank_results(
        [trainer.GridResult(p, best, trainer.TrainReport()) for p, best, _, _ in results]
    )
    keys = sorted(grid)
    ranked_path = out / "ranked.csv"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank"] + keys + ["best_val_f1"])
    for i, r in enumerate(ranked, start=1):
        w.writerow([i] + [repr(float(r.point[k])) for k in keys] + [repr(r.best_val_f1)])
    ranked_path.write_text(buf.getvalue(), encoding="utf-8")
    outputs = [ranked_path] + [Path(rp) for _, _, _, rp in results]
    if keys == ["alpha"]:
        rows = evaluation.alpha_uncertainty_sweep(
            lambda a: curves[(("alpha", a),)], [p["alpha"] for p in points]
        )
        alpha_path = out / "alpha_entropy.csv"
        alpha_path.write_text(evaluation.sweep_csv(rows), encoding="utf-8")
        outputs.append(alpha_path)
    for p in outputs:
        manifest.add_output(p)
    manifest.extra["grid"] = grid
    print(f"{len(ranked)} runs; best {ranked[0].point} val_f1={ranked[0].best_val_f1:.4f} -> {ranked_path}")
    return out


# -- argument parsing ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mudar", description="Cross-user activity recognition with domain adaptation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init-config", help="write the default training config")
    s.add_argument("--out", required=True, help="path of the JSON file to write")

    s = sub.add_parser("synth", help="generate a synthetic source/target corpus")
    s.add_argument("--out", help="output directory")
    s.add_argument("--seed", type=int, default=0)
    d = synthgen.ShiftConfig()
    s.add_argument("--num-classes", type=int, default=d.num_classes)
    s.add_argument("--channels", type=int, default=d.channels)
    s.add_argument("--window-len", type=int, default=d.window_len, help="samples per generated activity segment")
    s.add_argument("--samples-per-class", type=int, default=d.samples_per_class)
    s.add_argument("--subjects", type=int, default=d.subjects_per_domain, help="subjects per domain")
    s.add_argument("--sample-rate", type=float, default=d.sample_rate_hz)
    s.add_argument("--rotation-shift", type=float, default=d.rotation_shift_deg, help="target rotation (degrees)")
    s.add_argument("--user-rotation", type=float, default=d.user_rotation_deg, help="per-subject rotation range")
    s.add_argument("--amplitude-shift", type=float, default=d.amplitude_shift, help="target amplitude scale - 1")
    s.add_argument("--noise-std", type=float, default=d.noise_std)
    s.add_argument("--target-noise-std", type=float, default=d.target_noise_std)
    s.add_argument("--offset-spread", type=float, default=d.offset_spread_deg, help="per-window offset angle std")
    s.add_argument("--frequency-step", type=float, default=d.frequency_step)

    s = sub.add_parser("prepare", help="filter, window and normalize a raw recording CSV")
    s.add_argument("--input", required=True)
    s.add_argument("--domain", required=True, choices=data.DOMAINS)
    s.add_argument("--out", required=True, help="output prefix for <prefix>.manifest.csv / .npy / .stats.csv")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--window-ms", type=float, help="window length in milliseconds (default 1000)")
    g.add_argument("--window-len", type=int, help="window length in samples")
    s.add_argument("--overlap", type=float, default=0.5, help="fractional overlap in [0, 1)")
    s.add_argument("--median-kernel", type=int, default=3, help="median filter width (1 disables)")
    s.add_argument("--sample-rate", type=float, help="override the rate inferred from timestamps")
    s.add_argument("--stats", help="reuse these normalization statistics (target domain)")
    s.add_argument("--label-file", help="per-timestep evaluation labels for target recordings")
    s.add_argument("--hidden-labels", help="write evaluation-only window labels here (target domain)")
    s.add_argument("--seed", type=int, default=0, help="seed of the train/val/test split (source domain)")

    def training_inputs(s):
        s.add_argument("--config", help="JSON config (see init-config); defaults when omitted")
        s.add_argument("--source", required=True, help="prepared source window prefix")
        s.add_argument("--target", help="prepared target window prefix")
        s.add_argument("--target-labels", help="hidden target window labels, for monitoring only")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--out", help="output directory")

    s = sub.add_parser("train", help="train one model")
    training_inputs(s)
    s.add_argument("--ablation", choices=trainer.ABLATIONS, help="override the config's ablation mode")
    s.add_argument("--from-sweep", help="'best' (latest sweep in the output dir) or a ranked.csv path")

    s = sub.add_parser("eval", help="score a checkpoint on a prepared dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="prepared window prefix")
    s.add_argument("--labels", help="evaluation-only window labels (window_id,label)")
    s.add_argument("--split", choices=("train", "val", "test", "all"), help="default: test if tagged, else all")
    s.add_argument("--embeddings", action="store_true", help="also export eval-mode embeddings")
    s.add_argument("--out", help="output directory")

    s = sub.add_parser("sweep", help="grid search ranked by validation macro-F1")
    training_inputs(s)
    s.add_argument("--grid", action="append", help="KEY=v1,v2,... (repeatable); keys: " + ", ".join(sorted(trainer.GRID_KEYS)))
    s.add_argument("--workers", type=int, help="parallel runs (default $MUDAR_WORKERS or 1)")
    return p


COMMANDS = {
    "init-config": cmd_init_config,
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    manifest = RunManifest(args.command, argv, started_utc=_now())
    try:
        out = COMMANDS[args.command](args, manifest)
        if out is not None:
            manifest.write(out if out.suffix == ".json" else out / "manifest.json")
        return EXIT_OK
    except UsageError as exc:
        print(f"mudar {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"mudar {args.command}: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (NumericDomainError, ArithmeticError) as exc:
        print(f"mudar {args.command}: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ContractError, OSError) as exc:
        print(f"mudar {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
