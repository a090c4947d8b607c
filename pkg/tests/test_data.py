"""IDX/CIFAR parsing fixtures, stratified splitting, batching."""

import gzip
import struct

import numpy as np
import pytest

from mixquant.data import (
    BadMagicError,
    BatchIterator,
    Dataset,
    MissingDataError,
    TruncatedDataError,
    full_batches,
    load_mnist,
    normalize_per_channel,
    parse_cifar10,
    parse_idx,
    split_train_valid,
)


def make_idx_images(pixels: np.ndarray) -> bytes:
    n, h, w = pixels.shape
    return struct.pack(">IIII", 0x803, n, h, w) + pixels.astype(np.uint8).tobytes()


def make_idx_labels(labels: np.ndarray) -> bytes:
    return struct.pack(">II", 0x801, len(labels)) + labels.astype(np.uint8).tobytes()


class TestParseIdx:
    def test_two_image_blob_round_trips_exactly(self):
        rng = np.random.default_rng(0)
        pixels = rng.integers(0, 256, size=(2, 4, 3)).astype(np.uint8)
        parsed = parse_idx(make_idx_images(pixels))
        assert parsed.shape == (2, 4, 3)
        np.testing.assert_array_equal(parsed, pixels.astype(np.float64) / 255.0)

    def test_labels_round_trip(self):
        labels = np.array([3, 1, 9, 0], dtype=np.uint8)
        parsed = parse_idx(make_idx_labels(labels))
        assert parsed.dtype == np.int64
        np.testing.assert_array_equal(parsed, labels)

    def test_wrong_magic_rejected(self):
        blob = struct.pack(">IIII", 0x807, 1, 2, 2) + bytes(4)
        with pytest.raises(BadMagicError, match="magic"):
            parse_idx(blob)

    def test_truncated_payload_rejected(self):
        blob = make_idx_images(np.zeros((2, 3, 3), dtype=np.uint8))[:-5]
        with pytest.raises(TruncatedDataError):
            parse_idx(blob)

    def test_truncated_header_rejected(self):
        with pytest.raises(TruncatedDataError):
            parse_idx(struct.pack(">I", 0x803) + b"\x00\x00")


class TestParseCifar10:
    def test_two_record_blob_round_trips(self):
        rng = np.random.default_rng(1)
        recs = rng.integers(0, 256, size=(2, 3073)).astype(np.uint8)
        recs[:, 0] = [4, 7]
        images, labels = parse_cifar10(recs.tobytes())
        assert images.shape == (2, 3, 32, 32)
        np.testing.assert_array_equal(labels, [4, 7])
        np.testing.assert_array_equal(
            images, recs[:, 1:].reshape(2, 3, 32, 32) / 255.0
        )

    def test_empty_file_rejected(self):
        with pytest.raises(TruncatedDataError):
            parse_cifar10(b"")

    def test_bad_length_rejected(self):
        with pytest.raises(TruncatedDataError, match="3073"):
            parse_cifar10(bytes(3072))


class TestLoadMnist:
    def test_reads_plain_and_gzipped_files(self, tmp_path):
        rng = np.random.default_rng(2)
        tr_img = rng.integers(0, 256, size=(6, 28, 28)).astype(np.uint8)
        tr_lab = rng.integers(0, 10, size=6).astype(np.uint8)
        te_img = rng.integers(0, 256, size=(3, 28, 28)).astype(np.uint8)
        te_lab = rng.integers(0, 10, size=3).astype(np.uint8)
        (tmp_path / "train-images-idx3-ubyte").write_bytes(make_idx_images(tr_img))
        (tmp_path / "train-labels-idx1-ubyte").write_bytes(make_idx_labels(tr_lab))
        (tmp_path / "t10k-images-idx3-ubyte.gz").write_bytes(
            gzip.compress(make_idx_images(te_img))
        )
        (tmp_path / "t10k-labels-idx1-ubyte.gz").write_bytes(
            gzip.compress(make_idx_labels(te_lab))
        )
        train, test = load_mnist(tmp_path)
        assert train.images.shape == (6, 1, 28, 28)
        assert test.images.shape == (3, 1, 28, 28)
        assert train.split == "train" and test.split == "test"

    def test_missing_file_is_distinct_error(self, tmp_path):
        with pytest.raises(MissingDataError, match="not found"):
            load_mnist(tmp_path)


def _toy_dataset(n=100, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.normal(size=(n, 2, 4, 4))
    labels = rng.integers(0, 10, size=n)
    return Dataset(images, labels, "train")


class TestSplit:
    def test_fraction_arithmetic(self):
        ds = _toy_dataset(60000 // 100)  # scaled-down: 600 -> 540/60
        train, valid = split_train_valid(ds, 0.1, seed=0)
        assert len(valid) == 60
        assert len(train) == 540

    def test_same_seed_identical_split(self):
        ds = _toy_dataset(333)
        t1, v1 = split_train_valid(ds, 0.1, seed=5)
        t2, v2 = split_train_valid(ds, 0.1, seed=5)
        assert np.array_equal(v1.images, v2.images)
        assert np.array_equal(t1.labels, t2.labels)

    def test_disjoint_and_exhaustive(self):
        ds = _toy_dataset(101)
        ds.images[:, 0, 0, 0] = np.arange(101)  # unique marker per sample
        train, valid = split_train_valid(ds, 0.25, seed=1)
        markers = np.concatenate(
            [train.images[:, 0, 0, 0], valid.images[:, 0, 0, 0]]
        )
        assert len(markers) == 101
        assert len(np.unique(markers)) == 101

    def test_stratification_within_one(self):
        rng = np.random.default_rng(3)
        labels = rng.integers(0, 10, size=997)
        ds = Dataset(np.zeros((997, 1, 2, 2)), labels, "train")
        _, valid = split_train_valid(ds, 0.1, seed=2)
        for c in range(10):
            exact = (labels == c).sum() * 0.1
            got = (valid.labels == c).sum()
            assert abs(got - exact) <= 1

    def test_bad_fraction_rejected(self):
        for f in (0.0, 1.0, -0.2):
            with pytest.raises(ValueError):
                split_train_valid(_toy_dataset(10), f, seed=0)

    def test_split_tags(self):
        train, valid = split_train_valid(_toy_dataset(50), 0.2, seed=0)
        assert train.split == "train" and valid.split == "valid"


class TestNormalization:
    def test_train_statistics_applied_to_all_splits(self):
        rng = np.random.default_rng(4)
        train = Dataset(rng.normal(3.0, 2.0, size=(200, 3, 4, 4)),
                        rng.integers(0, 10, 200), "train")
        test = Dataset(rng.normal(3.0, 2.0, size=(50, 3, 4, 4)),
                       rng.integers(0, 10, 50), "test")
        ntrain, ntest = normalize_per_channel(train, test)
        np.testing.assert_allclose(ntrain.images.mean(axis=(0, 2, 3)), 0, atol=1e-12)
        np.testing.assert_allclose(ntrain.images.std(axis=(0, 2, 3)), 1, atol=1e-12)
        # test split shifted by the same transform, not its own stats
        mu = train.images.mean(axis=(0, 2, 3), keepdims=True)
        sd = train.images.std(axis=(0, 2, 3), keepdims=True)
        np.testing.assert_allclose(ntest.images, (test.images - mu) / sd)


class TestBatches:
    def test_last_partial_batch_kept(self):
        ds = _toy_dataset(10)
        sizes = [len(y) for _, y in full_batches(ds, 4)]
        assert sizes == [4, 4, 2]

    def test_iterator_deterministic_under_seed(self):
        ds = _toy_dataset(20)
        a = BatchIterator(ds, 8, seed=9)
        b = BatchIterator(ds, 8, seed=9)
        for _ in range(5):
            xa, ya = next(a)
            xb, yb = next(b)
            assert np.array_equal(xa, xb) and np.array_equal(ya, yb)

    def test_dataset_validation(self):
        with pytest.raises(ValueError, match="images"):
            Dataset(np.zeros((3, 1, 2, 2)), np.zeros(4, dtype=int), "train")
        with pytest.raises(ValueError, match="labels"):
            Dataset(np.zeros((2, 1, 2, 2)), np.array([0, 11]), "train")
