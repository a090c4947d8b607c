"""Dataset parsing, normalization, splitting and batching.

Reads the standard MNIST IDX files and CIFAR-10 binary batches from
user-supplied paths (gzipped copies are accepted); nothing is ever
downloaded. Split tags keep the test set out of the search's reach.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixels


class DataError(Exception):
    """Base class for dataset ingestion failures."""


class BadMagicError(DataError):
    pass


class TruncatedDataError(DataError):
    pass


class MissingDataError(DataError):
    pass


@dataclass
class Dataset:
    """Images (N, C, H, W) with integer labels and a split tag."""

    images: np.ndarray
    labels: np.ndarray
    split: str  # train | valid | test

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"{len(self.images)} images vs {len(self.labels)} labels"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() > 9):
            raise ValueError("labels must lie in [0, 9]")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices: np.ndarray, split: str) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices], split)


def parse_idx(raw: bytes):
    """Decode one IDX file: images come back as float64 in [0, 1],
    labels as int64."""
    if len(raw) < 4:
        raise TruncatedDataError(f"IDX header needs 4 bytes, got {len(raw)}")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (IDX_MAGIC_IMAGES, IDX_MAGIC_LABELS):
        raise BadMagicError(f"bad IDX magic 0x{magic:08x}")
    ndim = 3 if magic == IDX_MAGIC_IMAGES else 1
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedDataError(
            f"IDX dimension header needs {header} bytes, got {len(raw)}"
        )
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    payload = raw[header:]
    if len(payload) != expected:
        raise TruncatedDataError(
            f"IDX payload: expected {expected} bytes for shape {dims}, "
            f"got {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(dims)
    if magic == IDX_MAGIC_LABELS:
        return arr.astype(np.int64)
    return arr.astype(np.float64) / 255.0


def parse_cifar10(raw: bytes):
    """Decode CIFAR-10 binary batches: per record 1 label byte followed
    by 3072 pixel bytes. Returns (images in [0, 1], labels)."""
    if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES:
        raise TruncatedDataError(
            f"CIFAR-10 batch length {len(raw)} is not a positive multiple "
            f"of {CIFAR_RECORD_BYTES}"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


def _read_maybe_gz(path: Path) -> bytes:
    if path.exists():
        return path.read_bytes()
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gzip.decompress(gz.read_bytes())
    raise MissingDataError(f"dataset file not found: {path} (nor {gz.name})")


def load_mnist(data_dir) -> tuple[Dataset, Dataset]:
    """Load the four standard MNIST files from `data_dir`."""
    d = Path(data_dir)
    out = []
    for imgs_name, labels_name, split in [
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "train"),
        ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", "test"),
    ]:
        images = parse_idx(_read_maybe_gz(d / imgs_name))
        labels = parse_idx(_read_maybe_gz(d / labels_name))
        out.append(Dataset(images[:, None, :, :], labels, split))
    return out[0], out[1]


def load_cifar10(data_dir, train_batches: int = 5) -> tuple[Dataset, Dataset]:
    """Load CIFAR-10 binary batches (data_batch_1..5.bin + test_batch.bin)."""
    d = Path(data_dir)
    if (d / "cifar-10-batches-bin").is_dir():
        d = d / "cifar-10-batches-bin"
    train_parts = [
        parse_cifar10(_read_maybe_gz(d / f"data_batch_{i}.bin"))
        for i in range(1, train_batches + 1)
    ]
    images = np.concatenate([p[0] for p in train_parts])
    labels = np.concatenate([p[1] for p in train_parts])
    test_images, test_labels = parse_cifar10(_read_maybe_gz(d / "test_batch.bin"))
    return (
        Dataset(images, labels, "train"),
        Dataset(test_images, test_labels, "test"),
    )


def normalize_per_channel(train: Dataset, *others: Dataset):
    """Standardize every split with the training split's channel statistics."""
    mean = train.images.mean(axis=(0, 2, 3), keepdims=True)
    std = train.images.std(axis=(0, 2, 3), keepdims=True)
    std = np.where(std < 1e-8, 1.0, std)

    def apply(ds: Dataset) -> Dataset:
        return replace(ds, images=(ds.images - mean) / std)

    out = [apply(train)] + [apply(ds) for ds in others]
    return out[0] if not others else tuple(out)


def split_train_valid(dataset: Dataset, fraction: float, seed: int):
    """Stratified, deterministic split into (train, valid).

    Validation gets round(N * fraction) samples overall; per class the
    allocation follows largest remainders, so each class count is within
    one of exact proportionality.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    n_valid_total = int(round(len(dataset) * fraction))

    class_indices = {}
    for c in np.unique(dataset.labels):
        idx = np.flatnonzero(dataset.labels == c)
        rng.shuffle(idx)
        class_indices[int(c)] = idx

    quotas = {c: len(idx) * fraction for c, idx in class_indices.items()}
    counts = {c: int(np.floor(q)) for c, q in quotas.items()}
    short = n_valid_total - sum(counts.values())
    remainders = sorted(
        class_indices, key=lambda c: (counts[c] - quotas[c], c)
    )
    for c in remainders[:short]:
        counts[c] += 1

    valid_idx = np.concatenate([class_indices[c][: counts[c]]
                                for c in sorted(class_indices)])
    train_idx = np.concatenate([class_indices[c][counts[c]:]
                                for c in sorted(class_indices)])
    return dataset.subset(train_idx, "train"), dataset.subset(valid_idx, "valid")


def augment_batch(images: np.ndarray, rng: np.random.Generator,
                  pad: int = 4) -> np.ndarray:
    """Random crop (after reflection-free zero padding) plus horizontal flip."""
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(images)
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    for i in range(n):
        dy, dx = offs[i]
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


class BatchIterator:
    """Endless shuffled batches; `epoch()` yields one full pass in order."""

    def __init__(self, dataset: Dataset, batch_size: int, seed: int = 0,
                 augment: bool = False):
        self.dataset = dataset
        self.batch_size = batch_size
        self.augment = augment
        self._rng = np.random.default_rng(seed)
        self._queue: list[tuple[np.ndarray, np.ndarray]] = []

    def _refill(self) -> None:
        order = self._rng.permutation(len(self.dataset))
        for start in range(0, len(order), self.batch_size):
            sel = order[start:start + self.batch_size]
            self._queue.append((self.dataset.images[sel], self.dataset.labels[sel]))

    def __next__(self):
        if not self._queue:
            self._refill()
        x, y = self._queue.pop(0)
        if self.augment:
            x = augment_batch(x, self._rng)
        return x, y

    def __iter__(self):
        return self

    def epoch(self):
        """One deterministic pass over the data in shuffled order."""
        order = self._rng.permutation(len(self.dataset))
        for start in range(0, len(order), self.batch_size):
            sel = order[start:start + self.batch_size]
            x = self.dataset.images[sel]
            if self.augment:
                x = augment_batch(x, self._rng)
            yield x, self.dataset.labels[sel]


def full_batches(dataset: Dataset, batch_size: int):
    """Unshuffled batches covering the dataset once (for evaluation)."""
    for start in range(0, len(dataset), batch_size):
        yield (
            dataset.images[start:start + batch_size],
            dataset.labels[start:start + batch_size],
        )
