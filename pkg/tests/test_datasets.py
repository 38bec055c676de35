"""Generated corpus, stratified subsets and archive loader error paths."""

from __future__ import annotations

import numpy as np
import pytest

from semfl.datasets import (LabeledImages, _class_templates, _load_cifar,
                            _load_tiny_imagenet, load_dataset,
                            stratified_subset, synthetic_dataset)
from semfl.errors import InvalidInputError, ProviderError


class TestSyntheticDataset:
    def test_shapes_dtypes_and_range(self):
        train, test = synthetic_dataset(37, 11, num_classes=5, seed=0)
        assert train.images.shape == (37, 32, 32, 3)
        assert test.images.shape == (11, 32, 32, 3)
        assert train.images.dtype == np.float32
        assert train.labels.dtype == np.int64
        assert train.images.min() >= 0.0 and train.images.max() <= 1.0
        assert train.num_classes == 5
        assert set(train.labels) <= set(range(5))
        assert train.class_names == [f"class_{c}" for c in range(5)]

    def test_labels_balanced_within_one(self):
        train, _ = synthetic_dataset(43, 8, num_classes=4, seed=1)
        counts = np.bincount(train.labels, minlength=4)
        assert counts.max() - counts.min() <= 1
        assert counts.sum() == 43

    def test_deterministic_and_seed_sensitive(self):
        a_train, a_test = synthetic_dataset(24, 8, num_classes=3, seed=7)
        b_train, b_test = synthetic_dataset(24, 8, num_classes=3, seed=7)
        np.testing.assert_array_equal(a_train.images, b_train.images)
        np.testing.assert_array_equal(a_train.labels, b_train.labels)
        np.testing.assert_array_equal(a_test.images, b_test.images)
        c_train, _ = synthetic_dataset(24, 8, num_classes=3, seed=8)
        assert not np.array_equal(a_train.images, c_train.images)

    def test_train_and_test_splits_differ(self):
        train, test = synthetic_dataset(16, 16, num_classes=4, seed=2)
        assert not np.array_equal(train.images, test.images)

    def test_twins_share_base_when_detail_is_zero(self):
        t = _class_templates(6, 32, seed=3, signal=0.7, detail=0.0)
        np.testing.assert_array_equal(t[0], t[1])
        np.testing.assert_array_equal(t[2], t[3])
        assert not np.array_equal(t[0], t[2])

    def test_twins_closer_than_strangers(self):
        t = _class_templates(6, 32, seed=4, signal=0.7, detail=0.15)
        twin = np.linalg.norm(t[0] - t[1])
        stranger = min(np.linalg.norm(t[0] - t[2]), np.linalg.norm(t[0] - t[4]))
        assert twin < stranger

    def test_template_amplitude_bound(self):
        # Every template entry lies within signal/2 + detail/2 of mid gray.
        signal, detail = 0.6, 0.2
        t = _class_templates(5, 16, seed=5, signal=signal, detail=detail)
        half_span = (signal + detail) / 2
        assert np.abs(t - 0.5).max() <= half_span + 1e-12

    def test_zero_amplitudes_collapse_to_gray(self):
        t = _class_templates(4, 16, seed=6, signal=0.0, detail=0.0)
        np.testing.assert_array_equal(t, np.full_like(t, 0.5))

    def test_odd_class_count(self):
        train, _ = synthetic_dataset(15, 5, num_classes=5, seed=0)
        assert train.num_classes == 5
        t = _class_templates(5, 16, seed=0, signal=0.7, detail=0.0)
        np.testing.assert_array_equal(t[0], t[1])
        # The odd class out keeps a base of its own.
        assert not np.array_equal(t[4], t[2])

    def test_validation(self):
        with pytest.raises(InvalidInputError):
            synthetic_dataset(3, 2, num_classes=4)
        with pytest.raises(InvalidInputError):
            synthetic_dataset(8, 2, num_classes=4, image_size=30)
        with pytest.raises(InvalidInputError):
            synthetic_dataset(8, 2, num_classes=4, signal=1.5)
        with pytest.raises(InvalidInputError):
            synthetic_dataset(8, 2, num_classes=4, detail=-0.1)
        with pytest.raises(InvalidInputError):
            LabeledImages(np.zeros((3, 8, 8, 3)), np.zeros(2, dtype=np.int64),
                          ["a"])


def constant_image_corpus(counts):
    """Images whose constant pixel value encodes their original row index."""
    labels = np.concatenate([np.full(n, c, dtype=np.int64)
                             for c, n in enumerate(counts)])
    images = np.stack([np.full((8, 8, 3), i, dtype=np.float32)
                       for i in range(labels.size)])
    names = [f"class_{c}" for c in range(len(counts))]
    return LabeledImages(images, labels, names)


class TestStratifiedSubset:
    def test_exact_proportions(self):
        data = constant_image_corpus([50, 30, 20])
        sub = stratified_subset(data, 10, seed=0)
        np.testing.assert_array_equal(np.bincount(sub.labels, minlength=3),
                                      [5, 3, 2])

    def test_largest_remainder_rounding(self):
        # Ideal quotas 3.4 / 3.3 / 3.3: the extra sample goes to the class
        # with the largest fractional part.
        data = constant_image_corpus([34, 33, 33])
        sub = stratified_subset(data, 10, seed=0)
        np.testing.assert_array_equal(np.bincount(sub.labels, minlength=3),
                                      [4, 3, 3])

    def test_rows_come_from_source(self):
        data = constant_image_corpus([12, 12])
        sub = stratified_subset(data, 8, seed=3)
        rows = sub.images[:, 0, 0, 0].astype(np.int64)
        assert np.all(np.diff(rows) > 0)  # original order, no repeats
        np.testing.assert_array_equal(sub.labels, data.labels[rows])

    def test_limit_at_or_above_size_is_identity(self):
        data = constant_image_corpus([4, 4])
        assert stratified_subset(data, 8, seed=0) is data
        assert stratified_subset(data, 9, seed=0) is data

    def test_deterministic(self):
        data = constant_image_corpus([20, 20, 20])
        a = stratified_subset(data, 12, seed=5)
        b = stratified_subset(data, 12, seed=5)
        np.testing.assert_array_equal(a.images, b.images)
        c = stratified_subset(data, 12, seed=6)
        assert not np.array_equal(a.images, c.images)

    def test_rejects_nonpositive_limit(self):
        data = constant_image_corpus([4, 4])
        with pytest.raises(InvalidInputError):
            stratified_subset(data, 0, seed=0)


class TestLoadDataset:
    def test_synthetic_dispatch_matches_direct_call(self):
        via_loader = load_dataset("synthetic", train_samples=20,
                                  test_samples=8, num_classes=4, seed=9)
        direct = synthetic_dataset(20, 8, num_classes=4, seed=9)
        np.testing.assert_array_equal(via_loader[0].images, direct[0].images)
        np.testing.assert_array_equal(via_loader[1].images, direct[1].images)

    def test_unknown_name(self):
        with pytest.raises(InvalidInputError):
            load_dataset("mystery")

    def test_missing_cifar_archive_is_actionable(self, tmp_path):
        with pytest.raises(ProviderError) as info:
            _load_cifar("cifar10", tmp_path, download=False)
        assert str(tmp_path) in str(info.value)

    def test_missing_tinyimagenet_archive(self, tmp_path):
        with pytest.raises(ProviderError):
            _load_tiny_imagenet(tmp_path, download=False)


class TestTinyImagenetParsing:
    def build_tree(self, root):
        from PIL import Image
        base = root / "tiny-imagenet-200"
        wnids = ["n01443537", "n01629819"]
        (base / "val" / "images").mkdir(parents=True)
        (base / "wnids.txt").write_text("\n".join(wnids) + "\n")
        (base / "words.txt").write_text(
            "n01443537\tgoldfish, Carassius auratus\n"
            "n01629819\tEuropean fire salamander\n"
            "n99999999\tunused entry\n")
        gen = np.random.default_rng(0)
        for w, wnid in enumerate(wnids):
            img_dir = base / "train" / wnid / "images"
            img_dir.mkdir(parents=True)
            for i in range(2):
                arr = gen.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
                Image.fromarray(arr).save(img_dir / f"{wnid}_{i}.JPEG")
        val_lines = []
        for i, wnid in enumerate(["n01629819", "n01443537"]):
            arr = gen.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
            Image.fromarray(arr).save(base / "val" / "images" / f"val_{i}.JPEG")
            val_lines.append(f"val_{i}.JPEG\t{wnid}\t0\t0\t10\t10")
        (base / "val" / "val_annotations.txt").write_text("\n".join(val_lines) + "\n")

    def test_parses_layout(self, tmp_path):
        self.build_tree(tmp_path)
        train, val = _load_tiny_imagenet(tmp_path, download=False)
        assert train.images.shape == (4, 64, 64, 3)
        assert val.images.shape == (2, 64, 64, 3)
        np.testing.assert_array_equal(train.labels, [0, 0, 1, 1])
        np.testing.assert_array_equal(val.labels, [1, 0])
        assert train.class_names == ["goldfish", "European fire salamander"]
        assert 0.0 <= train.images.min() and train.images.max() <= 1.0
