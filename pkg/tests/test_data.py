import hashlib
from pathlib import Path

import numpy as np
import numpy.testing as npt
import pytest

from capsroute import data as D


def flip_only_config():
    # probability 1 with every magnitude at identity except the flip
    return D.AugmentConfig(
        probability=1.0, scale_range=(1.0, 1.0), shift_fraction=0.0,
        rotate_degrees=0.0, elastic_alpha_fraction=0.0, noise_std=0.0,
    )


class TestPGM:
    def test_round_trip(self, tmp_path, rng):
        arr = rng.integers(0, 256, (12, 9)).astype(np.uint8)
        D.write_pgm(tmp_path / "x.pgm", arr)
        npt.assert_array_equal(D.read_pgm(tmp_path / "x.pgm"), arr)

    def test_rejects_non_pgm(self, tmp_path):
        (tmp_path / "x.pgm").write_bytes(b"P6\n2 2\n255\n" + bytes(12))
        with pytest.raises(D.DatasetError):
            D.read_pgm(tmp_path / "x.pgm")

    def test_truncated_raster(self, tmp_path):
        (tmp_path / "x.pgm").write_bytes(b"P5\n4 4\n255\n" + bytes(3))
        with pytest.raises(D.DatasetError):
            D.read_pgm(tmp_path / "x.pgm")

    def test_wrong_dtype_rejected_on_write(self, tmp_path):
        with pytest.raises(ValueError):
            D.write_pgm(tmp_path / "x.pgm", np.zeros((2, 2), dtype=np.float32))


class TestLoadDataset:
    def _write_pair(self, d, name, size=8, mask_size=None):
        rng = np.random.default_rng(0)
        D.write_pgm(d / f"{name}.pgm", rng.integers(0, 255, (size, size)).astype(np.uint8))
        m = np.zeros((mask_size or size, mask_size or size), dtype=np.uint8)
        m[:2, :2] = 255
        D.write_pgm(d / f"{name}_mask.pgm", m)

    def test_single_pair(self, tmp_path):
        self._write_pair(tmp_path, "a")
        samples = D.load_dataset(tmp_path)
        assert len(samples) == 1 and samples[0].identifier == "a"
        assert set(np.unique(samples[0].mask)) <= {0, 1}

    def test_extent_mismatch_names_sample(self, tmp_path):
        self._write_pair(tmp_path, "a", size=8, mask_size=4)
        with pytest.raises(D.DatasetError) as e:
            D.load_dataset(tmp_path)
        assert "a" in str(e.value)

    def test_empty_directory_ok(self, tmp_path):
        assert D.load_dataset(tmp_path) == []

    def test_unpaired_image_rejected(self, tmp_path):
        D.write_pgm(tmp_path / "lonely.pgm", np.zeros((4, 4), dtype=np.uint8))
        with pytest.raises(D.DatasetError) as e:
            D.load_dataset(tmp_path)
        assert "lonely" in str(e.value)

    def test_unpaired_mask_rejected(self, tmp_path):
        D.write_pgm(tmp_path / "ghost_mask.pgm", np.zeros((4, 4), dtype=np.uint8))
        with pytest.raises(D.DatasetError):
            D.load_dataset(tmp_path)

    def test_order_deterministic(self, tmp_path):
        for name in ["zz", "aa", "mm"]:
            self._write_pair(tmp_path, name)
        ids = [s.identifier for s in D.load_dataset(tmp_path)]
        assert ids == ["aa", "mm", "zz"]

    def test_exclusion_list(self, tmp_path):
        for name in ["a", "b", "c"]:
            self._write_pair(tmp_path, name)
        excl = tmp_path / "exclude.txt"
        excl.write_text("b\n# comment\n")
        ids = [s.identifier for s in D.load_dataset(tmp_path, exclude=excl)]
        assert ids == ["a", "c"]

    def test_png_pairs_accepted(self, tmp_path, rng):
        from PIL import Image

        img = rng.integers(0, 255, (8, 8)).astype(np.uint8)
        Image.fromarray(img, mode="L").save(tmp_path / "p.png")
        Image.fromarray((img > 128).astype(np.uint8) * 255, mode="L").save(
            tmp_path / "p_mask.png")
        samples = D.load_dataset(tmp_path)
        assert len(samples) == 1
        npt.assert_allclose(samples[0].image, img / 255.0)


class TestAugment:
    def _sample(self, rng, size=24):
        img = rng.random((size, size))
        mask = np.zeros((size, size), dtype=np.uint8)
        mask[6:14, 8:18] = 1
        return D.Sample(img, mask, "s")

    def test_disabled_identity(self, rng):
        s = self._sample(rng)
        out = D.augment(s, rng, D.AugmentConfig.disabled())
        npt.assert_array_equal(out.image, s.image)
        npt.assert_array_equal(out.mask, s.mask)

    def test_flip_twice_restores(self, rng):
        s = self._sample(rng)
        cfg = flip_only_config()
        once = D.augment(s, np.random.default_rng(3), cfg)
        twice = D.augment(once, np.random.default_rng(3), cfg)
        npt.assert_allclose(twice.image, s.image, atol=1e-12)
        npt.assert_array_equal(twice.mask, s.mask)

    def test_extents_and_binarity_preserved(self, rng):
        s = self._sample(rng)
        for seed in range(25):
            out = D.augment(s, np.random.default_rng(seed), D.AugmentConfig())
            assert out.image.shape == s.image.shape
            assert out.mask.shape == s.mask.shape
            assert set(np.unique(out.mask)) <= {0, 1}
            assert out.image.min() >= 0.0 and out.image.max() <= 1.0

    def test_flip_keeps_image_mask_relation(self, rng):
        # piecewise-constant image equal to its own mask stays consistent
        mask = np.zeros((16, 16), dtype=np.uint8)
        mask[4:9, 2:11] = 1
        s = D.Sample(mask.astype(np.float64), mask, "bin")
        out = D.augment(s, np.random.default_rng(5), flip_only_config())
        npt.assert_array_equal((out.image > 0.5).astype(np.uint8), out.mask)

    def test_elastic_changes_bounded_fraction_of_mask(self):
        # measured over 100 seeded draws at the default magnitudes
        samples = D.synth_generate(10, 64, seed=11)
        cfg = D.AugmentConfig(
            probability=1.0, scale_range=(1.0, 1.0), flip_enabled=False,
            shift_fraction=0.0, rotate_degrees=0.0, noise_std=0.0,
        )  # elastic only
        fractions = []
        for i in range(100):
            s = samples[i % len(samples)]
            out = D.augment(s, np.random.default_rng(1000 + i), cfg)
            changed = np.logical_xor(out.mask > 0, s.mask > 0).sum()
            fractions.append(changed / max(1, s.mask.sum()))
        assert np.mean(fractions) <= 0.20

    def test_elastic_displacement_peak_normalized(self, rng):
        dy, dx = D.elastic_displacement((32, 32), alpha=1.5, sigma=8.0, rng=rng)
        assert np.abs(dy).max() == pytest.approx(1.5)
        assert np.abs(dx).max() == pytest.approx(1.5)


class TestKFold:
    def test_sizes_balanced(self):
        split = D.kfold_split([f"s{i}" for i in range(8)], 4, seed=0)
        assert [len(f) for f in split.folds] == [2, 2, 2, 2]

    def test_deterministic(self):
        ids = [f"s{i}" for i in range(10)]
        a = D.kfold_split(ids, 3, seed=42)
        b = D.kfold_split(ids, 3, seed=42)
        assert a.folds == b.folds

    def test_partition(self):
        ids = [f"s{i}" for i in range(11)]
        split = D.kfold_split(ids, 4, seed=1)
        joined = sorted(i for f in split.folds for i in f)
        assert joined == sorted(ids)
        sizes = sorted(len(f) for f in split.folds)
        assert sizes[-1] - sizes[0] <= 1

    def test_k_one(self):
        split = D.kfold_split(["a", "b"], 1, seed=0)
        assert len(split.folds) == 1 and sorted(split.folds[0]) == ["a", "b"]

    def test_k_exceeds_n(self):
        with pytest.raises(ValueError):
            D.kfold_split(["a"], 2, seed=0)

    def test_train_val_split(self):
        split = D.kfold_split([f"s{i}" for i in range(8)], 4, seed=0)
        train, val = split.train_val_ids(1)
        assert sorted(train + val) == sorted(f"s{i}" for i in range(8))
        assert not set(train) & set(val)


class TestSynth:
    def test_zero_samples(self):
        assert D.synth_generate(0, 64, seed=0) == []

    def test_foreground_fraction_bounds(self):
        for s in D.synth_generate(30, 32, seed=5):
            frac = s.mask.mean()
            assert 0.02 <= frac <= 0.60

    def test_deterministic_bytes(self, tmp_path):
        def round_trip(subdir):
            out = tmp_path / subdir
            for s in D.synth_generate(12, 32, seed=7):
                D.save_sample(s, out)
            digest = hashlib.sha256()
            for p in sorted(out.iterdir()):
                digest.update(p.name.encode())
                digest.update(p.read_bytes())
            return digest.hexdigest()

        assert round_trip("a") == round_trip("b")

    def test_extent_minimum(self):
        with pytest.raises(ValueError):
            D.synth_generate(1, 8, seed=0)

    def test_rectangular_extents(self):
        samples = D.synth_generate(2, (32, 48), seed=3)
        assert samples[0].image.shape == (32, 48)

    def test_sample_invariants(self):
        for s in D.synth_generate(5, 24, seed=9):
            assert s.image.shape == s.mask.shape
            assert s.image.min() >= 0 and s.image.max() <= 1
            assert set(np.unique(s.mask)) <= {0, 1}


def test_sample_extent_mismatch_rejected():
    with pytest.raises(D.DatasetError):
        D.Sample(np.zeros((4, 4)), np.zeros((5, 5), dtype=np.uint8), "bad")
