import numpy as np
import pytest

from mudar import synthgen
from mudar.errors import ContractError
from mudar.synthgen import ShiftConfig


def small(**kw):
    base = dict(samples_per_class=6, subjects_per_domain=2, window_len=40)
    return ShiftConfig(**{**base, **kw})


def test_deterministic():
    a, b = synthgen.generate(small(seed=3)), synthgen.generate(small(seed=3))
    np.testing.assert_array_equal(a.source.x, b.source.x)
    np.testing.assert_array_equal(a.target.x, b.target.x)
    assert not np.array_equal(a.source.x, synthgen.generate(small(seed=4)).source.x)


def test_shapes_and_balanced_priors():
    cfg = small()
    c = synthgen.generate(cfg)
    assert c.source.x.shape == (cfg.num_classes * cfg.samples_per_class, cfg.channels, cfg.window_len)
    assert c.target.x.shape == c.source.x.shape
    assert np.bincount(c.source.y).tolist() == [cfg.samples_per_class] * cfg.num_classes
    assert np.bincount(c.target_labels).tolist() == [cfg.samples_per_class] * cfg.num_classes


def test_target_is_unlabeled():
    c = synthgen.generate(small())
    assert not c.target.is_labeled
    assert all(r.labels is None for r in c.target_recordings)
    assert set(c.target_timestep_labels) == {r.subject_id for r in c.target_recordings}


def test_zero_shift_matches_source_statistics():
    cfg = small(rotation_shift_deg=0.0, amplitude_shift=0.0, target_noise_std=0.0, samples_per_class=30)
    assert not cfg.is_shifted
    c = synthgen.generate(cfg)
    for y in range(cfg.num_classes):
        ms = c.source.x[c.source.y == y].mean(axis=(0, 2))
        mt = c.target.x[c.target_labels == y].mean(axis=(0, 2))
        np.testing.assert_allclose(ms, mt, atol=0.25)


def test_shift_moves_class_means():
    cfg = small(samples_per_class=30)
    assert cfg.is_shifted
    c = synthgen.generate(cfg)
    gaps = [
        np.linalg.norm(c.source.x[c.source.y == y].mean(axis=(0, 2)) - c.target.x[c.target_labels == y].mean(axis=(0, 2)))
        for y in range(cfg.num_classes)
    ]
    assert min(gaps) > 0.3


def test_class_parameters_distinct():
    freqs = [synthgen.class_frequency(y, 0.3) for y in range(4)]
    assert len(set(freqs)) == 4
    offs = [synthgen.class_offsets(y, 4, 2, 1.0) for y in range(4)]
    for y in range(4):
        np.testing.assert_allclose(np.linalg.norm(offs[y], axis=1), 1.0)


def test_config_validation():
    with pytest.raises(ContractError):
        ShiftConfig(channels=4)
    with pytest.raises(ContractError):
        ShiftConfig(num_classes=1)
    with pytest.raises(ContractError):
        ShiftConfig(noise_std=-1.0)
    with pytest.raises(ContractError, match="subjects_per_domain"):
        ShiftConfig(samples_per_class=2, subjects_per_domain=3)
