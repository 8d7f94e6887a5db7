"""Synthetic source/target corpora with a controllable conditional shift.

Each class is a sinusoid on every tri-axial group whose frequency, amplitude
and DC offset direction are indexed by the class id. Every subject carries its
own small random sensor rotation in both domains. The target domain adds one
fixed rotation, an amplitude scale and extra noise, so P(y|x) moves while the
class priors stay identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .augment import apply_rotation, random_axis, rotation_matrix
from .data import SensorRecording, WindowedDataset, build_dataset
from .errors import ContractError


@dataclass
class ShiftConfig:
    num_classes: int = 4
    channels: int = 6
    window_len: int = 48
    samples_per_class: int = 150
    subjects_per_domain: int = 3
    sample_rate_hz: float = 25.0
    rotation_shift_deg: float = 30.0
    user_rotation_deg: float = 10.0
    amplitude_shift: float = 0.2
    noise_std: float = 0.1
    target_noise_std: float = 0.5
    offset_magnitude: float = 1.0
    frequency_step: float = 0.3
    offset_spread_deg: float = 15.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ContractError(f"need at least 2 classes, got {self.num_classes}")
        if self.channels < 3 or self.channels % 3:
            raise ContractError(f"channels must be a positive multiple of 3, got {self.channels}")
        if self.window_len < 2 or self.samples_per_class < 1 or self.subjects_per_domain < 1:
            raise ContractError("window_len, samples_per_class and subjects_per_domain must be positive")
        if self.samples_per_class < self.subjects_per_domain:
            # windows are dealt round-robin, so a later subject would record nothing
            raise ContractError(
                f"samples_per_class ({self.samples_per_class}) must be >= subjects_per_domain ({self.subjects_per_domain})"
            )
        if min(self.noise_std, self.target_noise_std, self.user_rotation_deg) < 0:
            raise ContractError("noise and rotation ranges must be non-negative")

    @property
    def is_shifted(self) -> bool:
        return bool(self.rotation_shift_deg or self.amplitude_shift or self.target_noise_std)


@dataclass
class Corpus:
    source: WindowedDataset
    target: WindowedDataset
    target_labels: np.ndarray
    source_recordings: list[SensorRecording]
    target_recordings: list[SensorRecording]
    # per-timestep labels of each target recording, evaluation only
    target_timestep_labels: dict[str, np.ndarray]


def class_frequency(y: int, step: float = 0.6) -> float:
    return 1.0 + step * y


def class_amplitude(y: int) -> float:
    return 1.0 + 0.15 * y


def class_offsets(y: int, num_classes: int, groups: int, magnitude: float, jitter_rad: float = 0.0) -> np.ndarray:
    """(groups, 3) DC offsets; class directions are evenly spaced on a circle."""
    out = np.zeros((groups, 3))
    for g in range(groups):
        phi = 2.0 * np.pi * y / num_classes + g * np.pi / 3.0 + jitter_rad
        # each group lives in a differently tilted plane
        tilt = 0.5 * g
        out[g] = magnitude * np.array([np.cos(phi), np.sin(phi) * np.cos(tilt), np.sin(phi) * np.sin(tilt)])
    return out


def _window(cfg: ShiftConfig, y: int, rng: np.random.Generator) -> np.ndarray:
    groups = cfg.channels // 3
    t = np.arange(cfg.window_len) / cfg.sample_rate_hz
    phase = rng.uniform(0, 2 * np.pi)
    amp = class_amplitude(y) * rng.uniform(0.9, 1.1)
    freq = class_frequency(y, cfg.frequency_step) * rng.uniform(0.95, 1.05)
    spread = np.deg2rad(cfg.offset_spread_deg) * rng.standard_normal() if cfg.offset_spread_deg else 0.0
    offsets = class_offsets(y, cfg.num_classes, groups, cfg.offset_magnitude, spread)
    x = np.empty((groups, 3, cfg.window_len))
    for g in range(groups):
        wave = amp * np.sin(2 * np.pi * freq * t + phase + g * np.pi / 2)
        direction = np.roll(np.array([1.0, 0.5, 0.25]), g + y)
        direction /= np.linalg.norm(direction)
        x[g] = offsets[g][:, None] + direction[:, None] * wave[None, :]
    return x.reshape(cfg.channels, cfg.window_len)


def _domain(cfg: ShiftConfig, domain: str, rng: np.random.Generator, shift_r: np.ndarray) -> list[SensorRecording]:
    target = domain == "target"
    per_subject = [[] for _ in range(cfg.subjects_per_domain)]
    for y in range(cfg.num_classes):
        for k in range(cfg.samples_per_class):
            per_subject[k % cfg.subjects_per_domain].append(y)
    recordings = []
    for s, classes in enumerate(per_subject):
        user_r = rotation_matrix(random_axis(rng), rng.uniform(-cfg.user_rotation_deg, cfg.user_rotation_deg))
        order = rng.permutation(len(classes))
        chunks, labels = [], []
        for idx in order:
            y = classes[idx]
            w = apply_rotation(_window(cfg, y, rng), user_r)
            w = w + rng.normal(0.0, cfg.noise_std, size=w.shape) if cfg.noise_std else w
            if target:
                w = apply_rotation(w, shift_r) * (1.0 + cfg.amplitude_shift)
                if cfg.target_noise_std:
                    w = w + rng.normal(0.0, cfg.target_noise_std, size=w.shape)
            chunks.append(w)
            labels.append(np.full(cfg.window_len, y))
        recordings.append(
            SensorRecording(
                subject_id=f"{domain[0]}{s:02d}",
                domain=domain,
                sample_rate_hz=cfg.sample_rate_hz,
                channels=np.concatenate(chunks, axis=1),
                labels=np.concatenate(labels),
            )
        )
    return recordings


def generate(cfg: ShiftConfig) -> Corpus:
    """Deterministic paired corpora; target windows carry no labels."""
    root = np.random.SeedSequence(cfg.seed)
    _, src_seq, tgt_seq = root.spawn(3)
    # fixed z axis: the shift turns the class offset circle within its own plane
    shift_r = rotation_matrix(np.array([0.0, 0.0, 1.0]), cfg.rotation_shift_deg)
    src = _domain(cfg, "source", np.random.default_rng(src_seq), shift_r)
    tgt = _domain(cfg, "target", np.random.default_rng(tgt_seq), shift_r)
    source = build_dataset(src, cfg.window_len, overlap=0.0, num_classes=cfg.num_classes)
    target_labeled = build_dataset(tgt, cfg.window_len, overlap=0.0, num_classes=cfg.num_classes)
    hidden = target_labeled.y
    unlabeled_tgt = [
        SensorRecording(r.subject_id, r.domain, r.sample_rate_hz, r.channels, None) for r in tgt
    ]
    tracks = {r.subject_id: r.labels for r in tgt}
    return Corpus(source, target_labeled.unlabeled(), hidden, src, unlabeled_tgt, tracks)
