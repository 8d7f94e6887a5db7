"""Rotation and jitter augmentations for tri-axial sensor windows."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass
class AugmentConfig:
    jitter_sigma: float = 0.055
    rotation_deg: float = 25.0

    def __post_init__(self):
        if self.jitter_sigma < 0:
            raise ContractError(f"jitter sigma must be >= 0, got {self.jitter_sigma}")
        if not 0.0 <= self.rotation_deg <= 180.0:
            raise ContractError(f"rotation range must lie in [0, 180] degrees, got {self.rotation_deg}")


def rotation_matrix(axis, angle_deg: float) -> np.ndarray:
    """Rodrigues rotation by ``angle_deg`` about ``axis`` (normalised here)."""
    axis = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(axis)
    if axis.shape != (3,) or norm == 0:
        raise ContractError(f"rotation axis must be a non-zero 3-vector, got {axis!r}")
    kx, ky, kz = axis / norm
    k = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    theta = np.deg2rad(angle_deg)
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def random_axis(rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(3)
    while np.linalg.norm(v) < 1e-12:
        v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def apply_rotation(window: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Multiply every consecutive 3-channel group of a (C, W) window by ``r``."""
    window = np.asarray(window, dtype=np.float64)
    c, w = window.shape
    if c % 3:
        raise ContractError(f"rotation needs a multiple of 3 channels, got {c}")
    grouped = window.reshape(c // 3, 3, w)
    return np.einsum("ij,gjt->git", r, grouped).reshape(c, w)


def rotate(
    window: np.ndarray,
    angle_deg: float | None = None,
    axis=None,
    rng: np.random.Generator | None = None,
    max_angle_deg: float = 0.0,
) -> np.ndarray:
    """Rotate all tri-axial groups of one window by a single rotation.

    A missing angle is drawn uniformly from [-max_angle_deg, max_angle_deg],
    then a missing axis uniformly on the sphere, in that order from ``rng``.
    """
    if np.shape(window)[0] % 3:
        raise ContractError(f"rotation needs a multiple of 3 channels, got {np.shape(window)[0]}")
    if angle_deg is None or axis is None:
        if rng is None:
            raise ContractError("rotate needs an rng when angle or axis is not fixed")
    if angle_deg is None:
        angle_deg = rng.uniform(-max_angle_deg, max_angle_deg)
    if axis is None:
        axis = random_axis(rng)
    return apply_rotation(window, rotation_matrix(axis, angle_deg))


def jitter(window: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ContractError(f"jitter sigma must be >= 0, got {sigma}")
    window = np.asarray(window, dtype=np.float64)
    if sigma == 0:
        return window.copy()
    return window + rng.normal(0.0, sigma, size=window.shape)


def augment_batch(batch: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Rotate then jitter each (C, W) sample of ``batch`` with its own draws."""
    batch = np.asarray(batch, dtype=np.float64)
    out = np.empty_like(batch)
    for i, window in enumerate(batch):
        rotated = rotate(window, rng=rng, max_angle_deg=config.rotation_deg)
        out[i] = jitter(rotated, config.jitter_sigma, rng)
    return out
