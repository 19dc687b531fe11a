"""Model assembly, training behaviour, gradients through the whole stack,
and checkpoint round-trips."""

import numpy as np
import pytest

from selfpace.dataset import LabeledPatch
from selfpace.errors import DataError, DimensionError, FormatError
from selfpace.network import (
    Architecture,
    CnnModel,
    TrainConfig,
    Variant,
    _backward_batch,
    _forward_batch,
    build_model,
    classify_batch,
    clone_params,
    forward_proba,
    load_checkpoint,
    make_architecture,
    save_checkpoint,
    stack_patches,
    toy_architecture,
    train,
)
from selfpace.tensor_ops import softmax_cross_entropy_batch


def random_patch(rng):
    return rng.random((1, 36, 36))


def tiny_labeled_set(rng, per_class=3):
    patches = []
    for c in range(3):
        for _ in range(per_class):
            px = np.full((1, 36, 36), 0.2 + 0.3 * c) + 0.05 * rng.random((1, 36, 36))
            patches.append(LabeledPatch(np.clip(px, 0, 1), c))
    return patches


class TestArchitecture:
    def test_baseline_counts(self):
        arch = make_architecture(Variant.BASELINE)
        assert arch.conv_kernel_counts == (45, 80, 125, 180)
        assert arch.fc_sizes == (1080, 360, 3)
        assert arch.feature_length == 180

    def test_half_variant(self):
        arch = make_architecture(Variant.HALF)
        assert arch.conv_kernel_counts == (23, 40, 63, 90)
        assert arch.fc_sizes == (540, 180, 3)

    def test_plus50_variant(self):
        arch = make_architecture(Variant.PLUS50)
        assert arch.conv_kernel_counts == (68, 120, 188, 270)
        assert arch.fc_sizes == (1620, 540, 3)

    def test_extra_fc_variant(self):
        arch = make_architecture(Variant.EXTRA_FC)
        assert arch.fc_sizes == (1080, 360, 180, 3)
        assert arch.conv_kernel_counts == (45, 80, 125, 180)

    def test_drop_first_conv_variant(self):
        arch = make_architecture(Variant.DROP_FIRST_CONV)
        assert arch.conv_kernel_counts == (80, 125, 180)

    def test_last_fc_must_be_three(self):
        with pytest.raises(Exception):
            Architecture(fc_sizes=(10, 4))

    def test_baseline_parameter_count_closed_form(self):
        # conv: cout*cin*9 + cout, fc: m*n + m, chained 180 -> 1080 -> 360 -> 3
        expected = (
            (45 * 1 * 9 + 45)
            + (80 * 45 * 9 + 80)
            + (125 * 80 * 9 + 125)
            + (180 * 125 * 9 + 180)
            + (1080 * 180 + 1080)
            + (360 * 1080 + 360)
            + (3 * 360 + 3)
        )
        assert make_architecture(Variant.BASELINE).parameter_count() == expected


class TestBuildModel:
    def test_baseline_feature_vector_is_180(self):
        model = build_model(make_architecture(Variant.BASELINE), seed=0)
        x = np.random.default_rng(1).random((1, 1, 36, 36))
        # capture the fc input via the cache of the first fc layer
        _, caches = _forward_batch(model, x, training=False)
        fc_cache = caches[len(model.arch.conv_kernel_counts)]
        assert fc_cache.x.shape == (1, 180)

    def test_same_seed_bit_identical(self):
        arch = make_architecture(Variant.HALF)
        a = build_model(arch, seed=7)
        b = build_model(arch, seed=7)
        for pa, pb in zip(a.params, b.params):
            np.testing.assert_array_equal(pa.value, pb.value)

    def test_param_shapes_match_arch(self):
        for variant in Variant:
            arch = make_architecture(variant)
            model = build_model(arch, seed=0)
            assert [p.value.shape for p in model.params] == arch.layer_shapes()

    @pytest.mark.parametrize("variant", list(Variant))
    def test_every_variant_forward_backward_finite(self, variant):
        rng = np.random.default_rng(3)
        model = build_model(make_architecture(variant), seed=1)
        x = rng.random((2, 1, 36, 36))
        logits, caches = _forward_batch(model, x, training=True, rng=rng)
        assert logits.shape == (2, 3)
        assert np.all(np.isfinite(logits))
        _, _, grad = softmax_cross_entropy_batch(logits, np.array([0, 2]))
        _backward_batch(model, caches, grad)
        for p in model.params:
            assert np.all(np.isfinite(p.grad))

    def test_drop_first_conv_on_36x36(self):
        model = build_model(make_architecture(Variant.DROP_FIRST_CONV), seed=0)
        probs = forward_proba(model, np.random.default_rng(0).random((1, 36, 36)))
        assert probs.shape == (3,)
        assert abs(probs.sum() - 1.0) < 1e-12


class TestForwardProba:
    def test_probabilities_valid(self):
        model = build_model(make_architecture(Variant.HALF), seed=2)
        probs = forward_proba(model, random_patch(np.random.default_rng(4)))
        assert np.all(probs > 0) and np.all(probs < 1)
        assert abs(probs.sum() - 1.0) < 1e-12

    def test_inference_deterministic(self):
        model = build_model(make_architecture(Variant.HALF), seed=2)
        patch = random_patch(np.random.default_rng(5))
        np.testing.assert_array_equal(forward_proba(model, patch), forward_proba(model, patch))

    def test_shape_mismatch_raises(self):
        model = build_model(make_architecture(Variant.HALF), seed=2)
        with pytest.raises(DimensionError):
            forward_proba(model, np.zeros((1, 20, 20)))

    def test_overfits_tiny_set(self):
        # one strongly distinct patch per class; training to convergence
        # (dropout off) must pin each patch to its own class
        rng = np.random.default_rng(6)
        patches = [
            LabeledPatch(np.clip(0.1 + 0.02 * rng.random((1, 36, 36)), 0, 1), 0),
            LabeledPatch(np.clip(0.5 + 0.02 * rng.random((1, 36, 36)), 0, 1), 1),
            LabeledPatch(np.clip(0.9 - 0.02 * rng.random((1, 36, 36)), 0, 1), 2),
        ]
        arch = Architecture(conv_kernel_counts=(2, 2, 2, 2), fc_sizes=(12, 6, 3),
                            dropout_rate=0.0)
        model = build_model(arch, seed=3)
        train(model, patches, TrainConfig(learning_rate=0.02, epochs=300, batch_size=3, seed=0))
        for p in patches:
            assert forward_proba(model, p.pixels)[p.label] > 0.9

    def test_argmax_invariant_under_temperature(self):
        # scaling the last fc layer scales the logits monotonically
        rng = np.random.default_rng(7)
        model = build_model(make_architecture(Variant.HALF), seed=9)
        patches = [random_patch(rng) for _ in range(10)]
        before = [int(np.argmax(forward_proba(model, p))) for p in patches]
        w, b = model.fc_pairs()[-1]
        w.value *= 3.7
        b.value *= 3.7
        after = [int(np.argmax(forward_proba(model, p))) for p in patches]
        assert before == after


class TestTrain:
    def test_loss_decreases_on_learnable_set(self):
        rng = np.random.default_rng(8)
        patches = tiny_labeled_set(rng, per_class=8)
        model = build_model(toy_architecture(), seed=4)
        report = train(model, patches, TrainConfig(epochs=15, batch_size=8, seed=1))
        assert report.epoch_losses[-1] < report.epoch_losses[0]

    def test_determinism(self):
        rng = np.random.default_rng(9)
        patches = tiny_labeled_set(rng, per_class=5)
        cfg = TrainConfig(epochs=3, batch_size=4, seed=11)
        m1 = build_model(toy_architecture(), seed=5)
        m2 = build_model(toy_architecture(), seed=5)
        r1 = train(m1, patches, cfg)
        r2 = train(m2, patches, cfg)
        assert r1.epoch_losses == r2.epoch_losses
        for a, b in zip(m1.params, m2.params):
            np.testing.assert_array_equal(a.value, b.value)

    def test_missing_class_raises(self):
        rng = np.random.default_rng(10)
        patches = [LabeledPatch(rng.random((1, 36, 36)), 0) for _ in range(4)]
        model = build_model(toy_architecture(), seed=0)
        with pytest.raises(DataError):
            train(model, patches, TrainConfig(epochs=1))

    def test_iterations_counted(self):
        rng = np.random.default_rng(11)
        patches = tiny_labeled_set(rng, per_class=4)  # 12 patches
        model = build_model(toy_architecture(), seed=0)
        train(model, patches, TrainConfig(epochs=2, batch_size=5, seed=0))
        assert model.trained_iterations == 2 * 3  # ceil(12/5) = 3 batches/epoch

    def test_verify_accuracy_reported(self):
        rng = np.random.default_rng(12)
        patches = tiny_labeled_set(rng, per_class=8)
        model = build_model(toy_architecture(), seed=1)
        report = train(model, patches, TrainConfig(epochs=20, batch_size=8, seed=2),
                       verify=tiny_labeled_set(np.random.default_rng(999), per_class=4))
        assert report.verify_accuracy is not None
        assert 0.0 <= report.verify_accuracy <= 1.0

    def test_small_synthetic_set_separable(self):
        # 30 patches/class for 30 epochs is enough to clear 80% held-out accuracy
        from selfpace.dataset import SplitSpec, SyntheticSpec, generate_synthetic, split

        labeled, _, _ = generate_synthetic(
            SyntheticSpec(counts_per_class=(60, 60, 60), noise_sigma=0.12, seed=54))
        tr, ver = split(labeled, SplitSpec(train_per_class=30, verify_per_class=30, seed=55))
        model = build_model(make_architecture(Variant.HALF), seed=56)
        report = train(
            model, tr,
            TrainConfig(learning_rate=0.01, momentum=0.9, batch_size=8, epochs=30, seed=57),
            verify=ver,
        )
        assert report.verify_accuracy > 0.8


class TestEndToEndGradient:
    def test_full_network_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(13)
        model = build_model(toy_architecture(), seed=6)
        x = rng.random((1, 1, 36, 36))
        y = np.array([1])

        def loss_fn():
            logits, _ = _forward_batch(model, x, training=False)
            loss, _, _ = softmax_cross_entropy_batch(logits, y)
            return loss

        logits, caches = _forward_batch(model, x, training=False)
        _, _, grad = softmax_cross_entropy_batch(logits, y)
        _backward_batch(model, caches, grad)

        h = 1e-5
        checked = 0
        param_rng = np.random.default_rng(14)
        for p in model.params:
            flat = p.value.reshape(-1)
            gflat = p.grad.reshape(-1)
            for idx in param_rng.choice(flat.size, size=min(3, flat.size), replace=False):
                orig = flat[idx]
                flat[idx] = orig + h
                fp = loss_fn()
                flat[idx] = orig - h
                fm = loss_fn()
                flat[idx] = orig
                fd = (fp - fm) / (2 * h)
                denom = max(abs(fd), 1e-6)
                assert abs(gflat[idx] - fd) / denom < 1e-5, (
                    f"param grad mismatch: analytic {gflat[idx]}, fd {fd}"
                )
                checked += 1
        assert checked >= 20


class TestCheckpoint:
    def test_round_trip_preserves_outputs(self, tmp_path):
        rng = np.random.default_rng(15)
        model = build_model(make_architecture(Variant.HALF), seed=8)
        model.trained_iterations = 123
        path = tmp_path / "model.spck"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.arch == model.arch
        assert loaded.rng_seed == model.rng_seed
        assert loaded.trained_iterations == 123
        patches = rng.random((100, 1, 36, 36))
        np.testing.assert_array_equal(
            classify_batch(model, patches), classify_batch(loaded, patches)
        )
        for a, b in zip(model.params, loaded.params):
            np.testing.assert_array_equal(a.value, b.value)

    def test_corrupt_magic_rejected(self, tmp_path):
        model = build_model(toy_architecture(), seed=0)
        path = tmp_path / "model.spck"
        save_checkpoint(model, path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError) as err:
            load_checkpoint(path)
        assert err.value.offset == 0

    def test_truncated_rejected(self, tmp_path):
        model = build_model(toy_architecture(), seed=0)
        path = tmp_path / "model.spck"
        save_checkpoint(model, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_parameter_bytes_match_analytic_count(self, tmp_path):
        arch = make_architecture(Variant.BASELINE)
        model = build_model(arch, seed=0)
        path = tmp_path / "model.spck"
        save_checkpoint(model, path)
        n_tensors = len(arch.layer_shapes())
        header = 4 + 4 + 1 + 4 * (3 + 1 + 4 + 1 + 3) + 16 + 16
        expected = header + 8 * n_tensors + 8 * arch.parameter_count()
        assert path.stat().st_size == expected

    def test_stack_patches_shapes(self):
        rng = np.random.default_rng(16)
        patches = tiny_labeled_set(rng, per_class=2)
        x, y = stack_patches(patches)
        assert x.shape == (6, 1, 36, 36)
        assert y.tolist() == [0, 0, 1, 1, 2, 2]
