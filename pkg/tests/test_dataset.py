"""Synthetic generator, split logic, and the binary patch file format."""

import numpy as np
import pytest

from selfpace.dataset import (
    LabeledPatch,
    SplitSpec,
    SyntheticSpec,
    UnlabeledPatch,
    generate_synthetic,
    load_patches,
    mean_threshold_accuracy,
    save_patches,
    split,
)
from selfpace.errors import DataError, FormatError


SMALL = SyntheticSpec(counts_per_class=(30, 30, 30), pool_size=20, seed=5)


class TestGenerator:
    def test_deterministic(self):
        l1, p1, t1 = generate_synthetic(SMALL)
        l2, p2, t2 = generate_synthetic(SMALL)
        assert len(l1) == len(l2) == 90
        for a, b in zip(l1, l2):
            np.testing.assert_array_equal(a.pixels, b.pixels)
            assert a.label == b.label
        for a, b in zip(p1, p2):
            np.testing.assert_array_equal(a.pixels, b.pixels)
            assert a.patch_id == b.patch_id
        np.testing.assert_array_equal(t1, t2)

    def test_different_seed_differs(self):
        l1, _, _ = generate_synthetic(SMALL)
        l2, _, _ = generate_synthetic(SyntheticSpec(
            counts_per_class=(30, 30, 30), pool_size=20, seed=6))
        assert any(not np.array_equal(a.pixels, b.pixels) for a, b in zip(l1, l2))

    def test_pixel_range_and_shape(self):
        labeled, pool, _ = generate_synthetic(SMALL)
        for p in labeled + pool:
            assert p.pixels.shape == (1, 36, 36)
            assert p.pixels.min() >= 0.0 and p.pixels.max() <= 1.0

    def test_noise_free_classes_mean_separable(self):
        spec = SyntheticSpec(counts_per_class=(60, 60, 60), noise_sigma=0.0, seed=7)
        labeled, _, _ = generate_synthetic(spec)
        assert mean_threshold_accuracy(labeled) == 1.0

    def test_noisy_classes_overlap_in_mean(self):
        # with realistic noise the mean is a weak feature by design
        spec = SyntheticSpec(counts_per_class=(100, 100, 100), noise_sigma=0.12, seed=8)
        labeled, _, _ = generate_synthetic(spec)
        assert mean_threshold_accuracy(labeled) < 0.9

    def test_pool_truth_hidden_from_pool_objects(self):
        _, pool, truth = generate_synthetic(SMALL)
        assert len(truth) == len(pool) == 20
        assert all(not hasattr(p, "label") for p in pool)
        assert set(np.unique(truth)) <= {0, 1, 2}

    def test_pool_ids_sequential(self):
        _, pool, _ = generate_synthetic(SMALL)
        assert [p.patch_id for p in pool] == list(range(20))

    def test_default_spec_learnable_to_85_percent(self):
        # the full-size dataset trains a verifiably strong classifier
        from selfpace.network import TrainConfig, Variant, build_model, make_architecture, train

        spec = SyntheticSpec(counts_per_class=(600, 600, 600), noise_sigma=0.12, seed=50)
        labeled, _, _ = generate_synthetic(spec)
        tr, ver = split(labeled, SplitSpec(train_per_class=400, verify_per_class=200, seed=51))
        model = build_model(make_architecture(Variant.HALF), seed=52)
        report = train(
            model, tr,
            TrainConfig(learning_rate=0.01, momentum=0.9, batch_size=8, epochs=6, seed=53),
            verify=ver,
        )
        assert report.verify_accuracy > 0.85


class TestSplit:
    def test_exact_counts(self):
        labeled, _, _ = generate_synthetic(
            SyntheticSpec(counts_per_class=(60, 60, 60), seed=9))
        train, verify = split(labeled, SplitSpec(train_per_class=40, verify_per_class=20, seed=1))
        assert len(train) == 120 and len(verify) == 60
        for c in range(3):
            assert sum(1 for p in train if p.label == c) == 40
            assert sum(1 for p in verify if p.label == c) == 20

    def test_full_scale_counts(self):
        # 600 per class split 400/200: 1200 train + 600 verify in total
        labeled, _, _ = generate_synthetic(
            SyntheticSpec(counts_per_class=(600, 600, 600), seed=15))
        train, verify = split(labeled, SplitSpec(train_per_class=400, verify_per_class=200, seed=2))
        assert len(train) == 1200 and len(verify) == 600

    def test_disjoint_by_identity(self):
        labeled, _, _ = generate_synthetic(
            SyntheticSpec(counts_per_class=(60, 60, 60), seed=10))
        train, verify = split(labeled, SplitSpec(train_per_class=30, verify_per_class=20, seed=2))
        train_ids = {id(p) for p in train}
        assert all(id(p) not in train_ids for p in verify)

    def test_seed_changes_membership_not_counts(self):
        labeled, _, _ = generate_synthetic(
            SyntheticSpec(counts_per_class=(60, 60, 60), seed=11))
        t1, _ = split(labeled, SplitSpec(10, 5, seed=1))
        t2, _ = split(labeled, SplitSpec(10, 5, seed=2))
        assert len(t1) == len(t2) == 30
        assert {id(p) for p in t1} != {id(p) for p in t2}

    def test_insufficient_patches_names_class(self):
        labeled, _, _ = generate_synthetic(
            SyntheticSpec(counts_per_class=(50, 10, 50), seed=12))
        with pytest.raises(DataError, match="class 1"):
            split(labeled, SplitSpec(train_per_class=20, verify_per_class=5, seed=0))

    def test_determinism(self):
        labeled, _, _ = generate_synthetic(
            SyntheticSpec(counts_per_class=(40, 40, 40), seed=13))
        t1, v1 = split(labeled, SplitSpec(20, 10, seed=3))
        t2, v2 = split(labeled, SplitSpec(20, 10, seed=3))
        assert [id(p) for p in t1] == [id(p) for p in t2]
        assert [id(p) for p in v1] == [id(p) for p in v2]


class TestPatchFiles:
    def test_labeled_round_trip(self, tmp_path):
        labeled, _, _ = generate_synthetic(
            SyntheticSpec(counts_per_class=(34, 33, 33), seed=14))
        path = tmp_path / "patches.spcn"
        save_patches(path, labeled)
        loaded = load_patches(path)
        assert len(loaded) == 100
        for a, b in zip(labeled, loaded):
            assert isinstance(b, LabeledPatch)
            assert a.label == b.label
            np.testing.assert_array_equal(a.pixels, b.pixels)  # bit-exact

    def test_unlabeled_round_trip(self, tmp_path):
        _, pool, _ = generate_synthetic(SMALL)
        path = tmp_path / "pool.spcn"
        save_patches(path, pool)
        loaded = load_patches(path)
        assert all(isinstance(p, UnlabeledPatch) for p in loaded)
        assert [p.patch_id for p in loaded] == [p.patch_id for p in pool]
        for a, b in zip(pool, loaded):
            np.testing.assert_array_equal(a.pixels, b.pixels)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.spcn"
        labeled, _, _ = generate_synthetic(SyntheticSpec(counts_per_class=(2, 2, 2), seed=1))
        save_patches(path, labeled)
        raw = bytearray(path.read_bytes())
        raw[0] = ord("X")
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError) as err:
            load_patches(path)
        assert err.value.offset == 0

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "short.spcn"
        labeled, _, _ = generate_synthetic(SyntheticSpec(counts_per_class=(2, 2, 2), seed=2))
        save_patches(path, labeled)
        raw = path.read_bytes()
        path.write_bytes(raw[:-100])
        with pytest.raises(FormatError):
            load_patches(path)

    def test_count_mismatch(self, tmp_path):
        import struct
        path = tmp_path / "lying.spcn"
        labeled, _, _ = generate_synthetic(SyntheticSpec(counts_per_class=(2, 2, 2), seed=3))
        save_patches(path, labeled)
        raw = bytearray(path.read_bytes())
        raw[20:24] = struct.pack("<I", 99)  # header count field
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_patches(path)

    def test_empty_collection_rejected(self, tmp_path):
        with pytest.raises(DataError):
            save_patches(tmp_path / "empty.spcn", [])

    def test_mixed_kinds_rejected(self, tmp_path):
        labeled, pool, _ = generate_synthetic(SMALL)
        with pytest.raises(DataError):
            save_patches(tmp_path / "mixed.spcn", [labeled[0], pool[0]])
