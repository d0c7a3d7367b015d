"""Synthetic task generator: determinism, budget, oracle masks, augmentation."""

import numpy as np
import pytest

from erfseg.errors import ConfigError
from erfseg.synth import (
    Dataset,
    SyntheticTaskConfig,
    _budgeted_ellipses,
    augment_hflip,
    ellipse_mask,
    gen_synthetic,
    load_dataset,
    save_dataset,
)

from oracles import ellipse_member_loops

SMALL = SyntheticTaskConfig(size=32, n_train=6, n_val=2, n_test=2)


def test_same_seed_bitwise_identical():
    a = gen_synthetic(SMALL, seed=5)
    b = gen_synthetic(SMALL, seed=5)
    for sa, sb in zip(a.samples, b.samples):
        assert sa.case_id == sb.case_id and sa.split == sb.split
        assert np.array_equal(sa.image, sb.image)
        assert np.array_equal(sa.mask, sb.mask)
    c = gen_synthetic(SMALL, seed=6)
    assert not np.array_equal(a.samples[0].image, c.samples[0].image)


def test_foreground_budget_enforced_and_nonempty():
    cfg = SyntheticTaskConfig(size=64, n_train=50, n_val=0, n_test=0, fg_budget=0.05)
    ds = gen_synthetic(cfg, seed=0)
    fracs = [s.mask.mean() for s in ds.samples]
    assert all(0 < f <= 0.05 for f in fracs)
    assert np.mean(fracs) <= 0.05


def test_mask_matches_ellipse_oracle():
    rng = np.random.Generator(np.random.PCG64(3))
    cfg = SyntheticTaskConfig(size=32)
    for _ in range(5):
        ellipses, mask = _budgeted_ellipses(rng, cfg)
        want = ellipse_member_loops(ellipses, 32)
        assert np.array_equal(mask, want)
        assert np.array_equal(ellipse_mask(ellipses, 32), want)


def test_split_sizes_follow_config():
    ds = gen_synthetic(SMALL, seed=1)
    assert len(ds.cases("train")) == 6
    assert len(ds.cases("val")) == 2
    assert len(ds.cases("test")) == 2


def test_sample_shapes_and_dtypes():
    ds = gen_synthetic(SMALL, seed=2)
    s = ds.samples[0]
    assert s.image.shape == (4, 32, 32) and s.image.dtype == np.float32
    assert s.mask.shape == (1, 32, 32) and s.mask.dtype == np.float32
    assert set(np.unique(s.mask)) <= {0.0, 1.0}


def test_infeasible_budget_rejected():
    with pytest.raises(ConfigError):
        SyntheticTaskConfig(size=16, fg_budget=0.01)
    with pytest.raises(ConfigError):
        SyntheticTaskConfig(fg_budget=0.5)


class TestHFlip:
    def test_p_zero_is_identity(self):
        ds = gen_synthetic(SMALL, seed=3)
        s = ds.samples[0]
        rng = np.random.Generator(np.random.PCG64(0))
        img, msk = augment_hflip(s.image, s.mask, 0.0, rng)
        assert np.array_equal(img, s.image) and np.array_equal(msk, s.mask)

    def test_p_one_twice_is_identity(self):
        ds = gen_synthetic(SMALL, seed=4)
        s = ds.samples[0]
        rng = np.random.Generator(np.random.PCG64(0))
        img1, msk1 = augment_hflip(s.image, s.mask, 1.0, rng)
        img2, msk2 = augment_hflip(img1, msk1, 1.0, rng)
        assert np.array_equal(img2, s.image) and np.array_equal(msk2, s.mask)
        assert not np.array_equal(img1, s.image)  # a flip really happened

    def test_flip_preserves_foreground_count(self):
        ds = gen_synthetic(SMALL, seed=5)
        s = ds.samples[0]
        rng = np.random.Generator(np.random.PCG64(1))
        _, msk = augment_hflip(s.image, s.mask, 1.0, rng)
        assert msk.sum() == s.mask.sum()

    def test_flipped_mask_matches_flipped_ellipse_oracle(self):
        rng = np.random.Generator(np.random.PCG64(6))
        cfg = SyntheticTaskConfig(size=32)
        ellipses, mask = _budgeted_ellipses(rng, cfg)
        img = mask[None].astype(np.float32)
        _, flipped = augment_hflip(img, mask[None].astype(np.float32), 1.0,
                                   np.random.Generator(np.random.PCG64(0)))
        oracle = ellipse_member_loops(ellipses, 32)[:, ::-1]
        assert np.array_equal(flipped[0] > 0.5, oracle)

    def test_invalid_probability(self):
        with pytest.raises(ConfigError):
            augment_hflip(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)), 1.5,
                          np.random.Generator(np.random.PCG64(0)))


def test_save_load_roundtrip(tmp_path):
    ds = gen_synthetic(SMALL, seed=7)
    save_dataset(ds, tmp_path)
    loaded = load_dataset(tmp_path)
    assert len(loaded.samples) == len(ds.samples)
    for a, b in zip(ds.samples, loaded.samples):
        assert a.case_id == b.case_id and a.split == b.split
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.mask, b.mask)
