"""Recording ingest, preprocessing, windowing and splitting.

Pipeline order is median filter -> window -> split -> min-max. Min-max is a
per-channel affine map, so scaling windows with statistics from the source
training split gives the same values as scaling the filtered recordings
before windowing, without letting validation/test data define the scaler.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import median_filter as _nd_median

from .errors import ContractError, FormatError

DOMAINS = ("source", "target")
WINDOWS_MAGIC = "mudar-windows"
WINDOWS_VERSION = 1


@dataclass
class SensorRecording:
    subject_id: str
    domain: str
    sample_rate_hz: float
    channels: np.ndarray  # (C, T)
    labels: np.ndarray | None = None  # (T,) int

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        if self.channels.ndim != 2 or min(self.channels.shape) < 1:
            raise ContractError(f"recording channels must be a non-empty C x T matrix, got {self.channels.shape}")
        if self.domain not in DOMAINS:
            raise ContractError(f"unknown domain tag {self.domain!r}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.channels.shape[1],):
                raise ContractError(
                    f"labels length {self.labels.shape} does not match T={self.channels.shape[1]}"
                )
            if (self.labels < 0).any():
                raise ContractError("labels must be non-negative class ids")

    @property
    def num_timesteps(self) -> int:
        return self.channels.shape[1]


@dataclass
class Window:
    data: np.ndarray  # (C, W)
    label: int | None
    subject_id: str
    domain: str
    offset: int = 0
    split: str = ""  # "train" / "val" / "test" once partitioned, else empty


@dataclass
class WindowedDataset:
    windows: list[Window]
    num_classes: int
    channel_count: int
    window_len: int

    def __post_init__(self):
        for w in self.windows:
            if w.data.shape != (self.channel_count, self.window_len):
                raise ContractError(
                    f"window shape {w.data.shape} != ({self.channel_count}, {self.window_len})"
                )

    def __len__(self) -> int:
        return len(self.windows)

    @property
    def x(self) -> np.ndarray:
        if not self.windows:
            return np.zeros((0, self.channel_count, self.window_len))
        return np.stack([w.data for w in self.windows])

    @property
    def y(self) -> np.ndarray:
        """Labels as an int array; -1 marks unlabeled windows."""
        return np.array([-1 if w.label is None else w.label for w in self.windows], dtype=np.int64)

    @property
    def is_labeled(self) -> bool:
        return bool(self.windows) and all(w.label is not None for w in self.windows)

    def count(self, domain: str) -> int:
        return sum(w.domain == domain for w in self.windows)

    def subset(self, indices: Iterable[int]) -> "WindowedDataset":
        return replace(self, windows=[self.windows[i] for i in indices])

    def with_data(self, x: np.ndarray) -> "WindowedDataset":
        """Copy with window arrays replaced by ``x`` (n, C, W), tags preserved."""
        return replace(self, windows=[replace(w, data=x[i]) for i, w in enumerate(self.windows)])

    def unlabeled(self) -> "WindowedDataset":
        return replace(self, windows=[replace(w, label=None) for w in self.windows])

    def part(self, name: str) -> "WindowedDataset":
        return self.subset(i for i, w in enumerate(self.windows) if w.split == name)

    @property
    def has_splits(self) -> bool:
        return bool(self.windows) and all(w.split for w in self.windows)


@dataclass
class SplitSpec:
    fractions: tuple[float, float, float] = (0.60, 0.20, 0.20)
    seed: int = 0

    def __post_init__(self):
        if any(f <= 0 for f in self.fractions) or abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ContractError(f"split fractions must be positive and sum to 1, got {self.fractions}")


@dataclass
class MinMaxStats:
    minimum: np.ndarray  # (C,)
    maximum: np.ndarray  # (C,)

    def to_rows(self) -> list[tuple[int, float, float]]:
        return [(i, float(lo), float(hi)) for i, (lo, hi) in enumerate(zip(self.minimum, self.maximum))]


# -- filtering and scaling ----------------------------------------------------


def median_filter(recording: SensorRecording, kernel_size: int) -> SensorRecording:
    """Per-channel sliding median with edge-value (replicate) padding."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ContractError(f"median filter kernel size must be odd and positive, got {kernel_size}")
    if kernel_size > recording.num_timesteps:
        raise ContractError(f"kernel size {kernel_size} exceeds recording length {recording.num_timesteps}")
    filtered = _nd_median(recording.channels, size=(1, kernel_size), mode="nearest")
    return replace(recording, channels=filtered)


def fit_minmax(x: np.ndarray) -> MinMaxStats:
    """Per-channel min/max of windows (n, C, W) or a channel matrix (C, T)."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ContractError("cannot fit min-max statistics on empty data")
    axes = (0, 2) if x.ndim == 3 else (1,)
    return MinMaxStats(x.min(axis=axes), x.max(axis=axes))


def apply_minmax(x: np.ndarray, stats: MinMaxStats) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    shape = (1, -1, 1) if x.ndim == 3 else (-1, 1)
    lo = stats.minimum.reshape(shape)
    span = (stats.maximum - stats.minimum).reshape(shape)
    safe = np.where(span > 0, span, 1.0)
    # constant channels map to 0
    return np.where(span > 0, (x - lo) / safe, 0.0)


def minmax_normalize(
    dataset: WindowedDataset, stats: MinMaxStats | None = None
) -> tuple[WindowedDataset, MinMaxStats]:
    """Scale every channel to [0, 1]; reuse ``stats`` verbatim when given."""
    if len(dataset) == 0:
        raise ContractError("minmax_normalize needs a non-empty dataset")
    x = dataset.x
    if stats is None:
        stats = fit_minmax(x)
    return dataset.with_data(apply_minmax(x, stats)), stats


# -- windowing ----------------------------------------------------------------


def majority_vote(labels: Sequence[int]) -> int:
    """Most frequent class id; ties go to the lowest id."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ContractError("majority_vote needs at least one label")
    return int(np.argmax(np.bincount(labels)))


def window_stride(window_len: int, overlap: float) -> int:
    if not 0.0 <= overlap < 1.0:
        raise ContractError(f"overlap fraction must lie in [0, 1), got {overlap}")
    # round half up: 12.5 -> 13
    return max(1, int(math.floor(window_len * (1.0 - overlap) + 0.5)))


def window_offsets(num_timesteps: int, window_len: int, overlap: float) -> list[int]:
    stride = window_stride(window_len, overlap)
    if window_len > num_timesteps:
        return []
    return list(range(0, num_timesteps - window_len + 1, stride))


def make_windows(recording: SensorRecording, window_len: int, overlap: float = 0.5) -> list[Window]:
    if window_len < 1:
        raise ContractError(f"window length must be positive, got {window_len}")
    offsets = window_offsets(recording.num_timesteps, window_len, overlap)
    if not offsets:
        warnings.warn(
            f"subject {recording.subject_id}: window length {window_len} exceeds "
            f"recording length {recording.num_timesteps}; no windows produced",
            stacklevel=2,
        )
        return []
    out = []
    for off in offsets:
        label = None
        if recording.labels is not None:
            label = majority_vote(recording.labels[off : off + window_len])
        out.append(
            Window(
                data=recording.channels[:, off : off + window_len].copy(),
                label=label,
                subject_id=recording.subject_id,
                domain=recording.domain,
                offset=off,
            )
        )
    return out


def window_len_from_ms(window_ms: float, sample_rate_hz: float) -> int:
    return max(1, int(math.floor(window_ms * sample_rate_hz / 1000.0 + 0.5)))


def build_dataset(
    recordings: Sequence[SensorRecording],
    window_len: int,
    overlap: float = 0.5,
    num_classes: int | None = None,
) -> WindowedDataset:
    if not recordings:
        raise ContractError("no recordings to window")
    channels = {r.channels.shape[0] for r in recordings}
    if len(channels) != 1:
        raise ContractError(f"recordings disagree on channel count: {sorted(channels)}")
    windows = [w for r in recordings for w in make_windows(r, window_len, overlap)]
    if num_classes is None:
        ids = [int(r.labels.max()) for r in recordings if r.labels is not None and r.labels.size]
        num_classes = max(ids) + 1 if ids else 0
    return WindowedDataset(windows, num_classes, channels.pop(), window_len)


# -- splitting ----------------------------------------------------------------


def _allocate(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    n_val = int(math.floor(n * fractions[1] + 0.5))
    n_test = int(math.floor(n * fractions[2] + 0.5))
    return n - n_val - n_test, n_val, n_test


def split(
    dataset: WindowedDataset, spec: SplitSpec | None = None
) -> tuple[WindowedDataset, WindowedDataset, WindowedDataset]:
    """Deterministic, class-stratified train/validation/test partition."""
    spec = spec or SplitSpec()
    if len(dataset) == 0:
        raise ContractError("cannot split an empty dataset")
    rng = np.random.default_rng(spec.seed)
    y = dataset.y
    groups = [np.flatnonzero(y == c) for c in np.unique(y)] if dataset.is_labeled else [np.arange(len(y))]
    parts: list[list[int]] = [[], [], []]
    for members in groups:
        members = rng.permutation(members)
        if dataset.is_labeled and len(members) < 3:
            warnings.warn(
                f"class {int(y[members[0]])} has {len(members)} windows; assigned wholly to train",
                stacklevel=2,
            )
            parts[0].extend(members.tolist())
            continue
        n_train, n_val, _ = _allocate(len(members), spec.fractions)
        parts[0].extend(members[:n_train].tolist())
        parts[1].extend(members[n_train : n_train + n_val].tolist())
        parts[2].extend(members[n_train + n_val :].tolist())
    return tuple(dataset.subset(sorted(p)) for p in parts)  # type: ignore[return-value]


SPLIT_NAMES = ("train", "val", "test")


def tag_splits(dataset: WindowedDataset, spec: SplitSpec | None = None) -> WindowedDataset:
    """Same windows in the same order, each tagged with its split name."""
    parts = split(dataset, spec)
    tag = {}
    for name, part in zip(SPLIT_NAMES, parts):
        tag.update({id(w): name for w in part.windows})
    return replace(dataset, windows=[replace(w, split=tag[id(w)]) for w in dataset.windows])


# -- CSV ingest ---------------------------------------------------------------


def read_csv(path: str | Path, sample_rate_hz: float | None = None) -> list[SensorRecording]:
    """Parse the raw recording CSV into one recording per (subject, domain).

    Raises FormatError with the offending line number on malformed input.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_csv(fh, sample_rate_hz)


def parse_csv(stream, sample_rate_hz: float | None = None) -> list[SensorRecording]:
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("line 1: empty file") from None
    header = [h.strip() for h in header]
    for col in ("subject", "domain", "timestamp"):
        if col not in header:
            raise FormatError(f"line 1: missing required column {col!r}")
    ch_cols = [i for i, h in enumerate(header) if h.startswith("ch_")]
    if not ch_cols:
        raise FormatError("line 1: no ch_<k> channel columns")
    expected = [f"ch_{k}" for k in range(len(ch_cols))]
    if [header[i] for i in ch_cols] != expected:
        raise FormatError(f"line 1: channel columns must be {expected}")
    i_subj, i_dom, i_ts = header.index("subject"), header.index("domain"), header.index("timestamp")
    i_lab = header.index("label") if "label" in header else None

    groups: dict[tuple[str, str], dict[str, list]] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise FormatError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        domain = row[i_dom].strip()
        if domain not in DOMAINS:
            raise FormatError(f"line {lineno}: unknown domain tag {domain!r}")
        try:
            ts = float(row[i_ts])
            values = [float(row[i]) for i in ch_cols]
            raw_label = row[i_lab].strip() if i_lab is not None else ""
            label = int(raw_label) if raw_label else None
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
        if not all(math.isfinite(v) for v in values):
            raise FormatError(f"line {lineno}: non-finite channel value")
        g = groups.setdefault((row[i_subj].strip(), domain), {"ts": [], "x": [], "y": [], "line": lineno})
        if g["ts"] and ts <= g["ts"][-1]:
            raise FormatError(f"line {lineno}: timestamps must increase within a subject")
        g["ts"].append(ts)
        g["x"].append(values)
        g["y"].append(label)

    recordings = []
    for (subject, domain), g in groups.items():
        labels = g["y"]
        if all(v is None for v in labels):
            lab = None
        elif any(v is None for v in labels):
            raise FormatError(f"line {g['line']}: subject {subject!r} mixes labeled and unlabeled rows")
        else:
            lab = np.array(labels, dtype=np.int64)
        rate = sample_rate_hz
        if rate is None:
            diffs = np.diff(g["ts"])
            rate = 1.0 / float(np.median(diffs)) if diffs.size else 1.0
        recordings.append(SensorRecording(subject, domain, rate, np.array(g["x"]).T, lab))
    return recordings


def write_csv(recordings: Sequence[SensorRecording], path: str | Path, include_labels: bool = True) -> None:
    """Write recordings in the raw CSV layout; timestamps are t / sample_rate seconds."""
    num_ch = recordings[0].channels.shape[0]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "domain", "timestamp", "label"] + [f"ch_{k}" for k in range(num_ch)])
        for r in recordings:
            for t in range(r.num_timesteps):
                label = "" if (r.labels is None or not include_labels) else str(int(r.labels[t]))
                w.writerow(
                    [r.subject_id, r.domain, repr(round(t / r.sample_rate_hz, 9)), label]
                    + [repr(float(v)) for v in r.channels[:, t]]
                )


# -- windowed output ----------------------------------------------------------


def save_windows(dataset: WindowedDataset, prefix: str | Path) -> tuple[Path, Path]:
    """Write ``<prefix>.manifest.csv`` and ``<prefix>.npy``.

    The manifest's first line is ``# mudar-windows v1 num_classes=.. channels=.. window_len=..``;
    then a CSV header ``window_id,subject,domain,offset,label,split`` with one row
    per window (empty label for unlabeled windows, empty split if untagged). Row i corresponds to ``array[i]``
    of the (n, C, W) float64 array file.
    """
    prefix = Path(prefix)
    manifest = prefix.with_name(prefix.name + ".manifest.csv")
    array = prefix.with_name(prefix.name + ".npy")
    buf = io.StringIO()
    buf.write(
        f"# {WINDOWS_MAGIC} v{WINDOWS_VERSION} num_classes={dataset.num_classes} "
        f"channels={dataset.channel_count} window_len={dataset.window_len}\n"
    )
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["window_id", "subject", "domain", "offset", "label", "split"])
    for i, win in enumerate(dataset.windows):
        w.writerow([i, win.subject_id, win.domain, win.offset, "" if win.label is None else win.label, win.split])
    manifest.write_text(buf.getvalue(), encoding="utf-8")
    np.save(array, dataset.x)
    return manifest, array


def load_windows(prefix: str | Path) -> WindowedDataset:
    prefix = Path(prefix)
    if prefix.name.endswith(".manifest.csv"):
        prefix = prefix.with_name(prefix.name[: -len(".manifest.csv")])
    manifest = prefix.with_name(prefix.name + ".manifest.csv")
    try:
        lines = manifest.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise FormatError(f"{manifest}: cannot read ({exc.strerror})") from None
    if not lines or not lines[0].startswith(f"# {WINDOWS_MAGIC} v"):
        raise FormatError(f"{manifest}: not a windowed-dataset manifest")
    tokens = lines[0].split()
    version = int(tokens[2].lstrip("v"))
    if version != WINDOWS_VERSION:
        raise FormatError(f"{manifest}: unsupported version {version}")
    try:
        meta = dict(t.split("=") for t in tokens[3:])
        x = np.load(prefix.with_name(prefix.name + ".npy"), allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise FormatError(f"{manifest}: unreadable header or array ({exc})") from None
    rows = list(csv.DictReader(lines[1:]))
    if len(rows) != len(x):
        raise FormatError(f"{manifest}: {len(rows)} rows but array holds {len(x)} windows")
    try:
        windows = [
            Window(
                x[i], None if r["label"] == "" else int(r["label"]), r["subject"], r["domain"],
                int(r["offset"]), r.get("split") or "",
            )
            for i, r in enumerate(rows)
        ]
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{manifest}: bad manifest row ({exc})") from None
    return WindowedDataset(windows, int(meta["num_classes"]), int(meta["channels"]), int(meta["window_len"]))


def save_labels(labels: np.ndarray, path: str | Path) -> None:
    """Evaluation-only window labels: ``window_id,label`` rows."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window_id", "label"])
        for i, lab in enumerate(labels):
            w.writerow([i, int(lab)])


def load_labels(path: str | Path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(rows[0]) != {"window_id", "label"}:
        raise FormatError(f"{path}: expected columns window_id,label")
    rows.sort(key=lambda r: int(r["window_id"]))
    return np.array([int(r["label"]) for r in rows], dtype=np.int64)


def save_stats(stats: MinMaxStats, path: str | Path) -> None:
    """``channel,min,max`` rows."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["channel", "min", "max"])
        for ch, lo, hi in stats.to_rows():
            w.writerow([ch, repr(lo), repr(hi)])


def load_stats(path: str | Path) -> MinMaxStats:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        rows.sort(key=lambda r: int(r["channel"]))
        lo = np.array([float(r["min"]) for r in rows])
        hi = np.array([float(r["max"]) for r in rows])
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"{path}: not a normalization-statistics file ({exc})") from None
    return MinMaxStats(lo, hi)


def write_timestep_labels(tracks: dict[str, np.ndarray], sample_rate_hz: float, path: str | Path) -> None:
    """Evaluation-only per-timestep labels: ``subject,timestamp,label``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "timestamp", "label"])
        for subject, labels in tracks.items():
            for t, lab in enumerate(labels):
                w.writerow([subject, repr(round(t / sample_rate_hz, 9)), int(lab)])


def read_timestep_labels(path: str | Path) -> dict[str, np.ndarray]:
    tracks: dict[str, list[int]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"subject", "label"} <= set(reader.fieldnames):
            raise FormatError(f"{path}: line 1: expected columns subject,timestamp,label")
        for lineno, r in enumerate(reader, start=2):
            try:
                tracks.setdefault(r["subject"], []).append(int(r["label"]))
            except (TypeError, ValueError):
                raise FormatError(f"{path}: line {lineno}: bad label {r.get('label')!r}") from None
    return {k: np.array(v, dtype=np.int64) for k, v in tracks.items()}
