"""
    bnexpand.data
    ~~~~~~~~~~~~~

    Readers for the MNIST IDX files and the CIFAR-10 binary batches, and
    the training-time augmentation.

    Images are scaled to ``[0, 1]`` and normalized per channel with the
    mean and standard deviation of the train split; the test split reuses
    the train statistics. Nothing is downloaded: point the loaders at a
    directory holding the original files (plain or gzipped).

    :copyright: (c) 2026 by bnexpand authors and contributors.
    :license: LGPL, see LICENSE for more details.
"""
from __future__ import annotations

import gzip
import logging
import os
import struct
from pathlib import Path
from typing import TYPE_CHECKING, Any, NamedTuple

import numpy as np
import numpy.typing as npt

from .errors import ParseError

if TYPE_CHECKING:
    from collections.abc import Iterator

    from .tensor import Tensor

logger = logging.getLogger(__name__)

Labels = npt.NDArray[np.int64]

#: Environment variable holding the default data root.
DATA_ENV = "BNEXPAND_DATA"

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

CIFAR_SHAPE = (3, 32, 32)
CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_RECORDS_PER_BATCH = 10000
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)

#: Augmentation policies understood by :func:`augment`.
POLICIES = ("none", "crop-flip")

CROP_PADDING = 4


class Dataset(NamedTuple):
    """One split of a dataset.

    :param images: ``(n, channels, height, width)`` normalized images.
    :param labels: ``(n,)`` class indices.
    :param int num_classes: number of classes.
    :param mean: per-channel mean used for normalization.
    :param std: per-channel standard deviation used for normalization.
    :param str split: ``"train"`` or ``"test"``.
    :param str policy: augmentation applied to training batches.
    """
    images: Tensor
    labels: Labels
    num_classes: int
    mean: Tensor
    std: Tensor
    split: str
    policy: str = "none"

    @property
    def size(self) -> int:
        return int(self.labels.shape[0])

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]  # type: ignore[return-value]

    def batches(self, batch_size: int,
                order: npt.NDArray[np.integer[Any]] | None = None
                ) -> Iterator[tuple[Tensor, Labels]]:
        """Yield ``(images, labels)`` batches in ``order`` (default:
        storage order); the last batch may be short."""
        if batch_size < 1:
            raise ValueError("batch size must be positive")
        if order is None:
            order = np.arange(self.size)
        for start in range(0, len(order), batch_size):
            index = order[start:start + batch_size]
            yield self.images[index], self.labels[index]

    def take(self, count: int) -> Dataset:
        """The first ``count`` samples."""
        return self._replace(images=self.images[:count],
                             labels=self.labels[:count])


class Splits(NamedTuple):
    train: Dataset
    test: Dataset


def data_root(path: str | os.PathLike[str] | None = None) -> Path:
    """``path``, or the directory named by :data:`DATA_ENV`, or ``./data``."""
    if path is not None:
        return Path(path)
    return Path(os.environ.get(DATA_ENV, "data"))


def _open(path: Path) -> bytes:
    for candidate in (path, path.with_name(path.name + ".gz")):
        if candidate.exists():
            if candidate.suffix == ".gz":
                with gzip.open(candidate, "rb") as handle:
                    return handle.read()
            return candidate.read_bytes()
    raise FileNotFoundError(f"no such file: {path}")


def read_idx(path: str | os.PathLike[str]) -> npt.NDArray[np.uint8]:
    """Parse an unsigned-byte IDX file.

    The header is two zero bytes, the element type (``0x08``), the number
    of dimensions, and one big-endian 32-bit extent per dimension.
    """
    path = Path(path)
    raw = _open(path)
    if len(raw) < 4:
        raise ParseError(path, len(raw), "truncated header")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise ParseError(path, 0, f"bad magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError(path, len(raw), "truncated header")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    expected = header + int(np.prod(dims))
    if len(raw) < expected:
        raise ParseError(path, len(raw),
                         f"truncated data, expected {expected} bytes")
    data = np.frombuffer(raw, dtype=np.uint8, count=expected - header,
                         offset=header)
    return data.reshape(dims)


def normalization(images: npt.NDArray[np.uint8]) -> tuple[Tensor, Tensor]:
    """Per-channel mean and standard deviation of ``images`` in ``[0, 1]``."""
    scaled = images.astype(np.float64) / 255.0
    axes = (0, 2, 3)
    mean = scaled.mean(axis=axes)
    std = np.maximum(scaled.std(axis=axes), 1e-8)
    return mean.astype(np.float32), std.astype(np.float32)


def _normalize(images: npt.NDArray[np.uint8], mean: Tensor,
               std: Tensor) -> Tensor:
    scaled = images.astype(np.float32) / np.float32(255.0)
    view = (1, -1, 1, 1)
    return (scaled - mean.reshape(view)) / std.reshape(view)


def _splits(train: tuple[npt.NDArray[np.uint8], Labels],
            test: tuple[npt.NDArray[np.uint8], Labels], classes: int,
            policy: str) -> Splits:
    mean, std = normalization(train[0])
    return Splits(*(
        Dataset(_normalize(images, mean, std), labels, classes, mean, std,
                split, policy if split == "train" else "none")
        for split, (images, labels) in (("train", train), ("test", test))))


def _mnist_split(root: Path, split: str) -> tuple[npt.NDArray[np.uint8], Labels]:
    image_name, label_name = MNIST_FILES[split]
    images = read_idx(root / image_name)
    labels = read_idx(root / label_name)
    if images.ndim != 3:
        raise ParseError(root / image_name, 3, "expected an image file")
    if labels.ndim != 1:
        raise ParseError(root / label_name, 3, "expected a label file")
    if images.shape[0] != labels.shape[0]:
        raise ParseError(root / label_name, 4,
                         f"{labels.shape[0]} labels for {images.shape[0]} images")
    if labels.size and labels.max() > 9:
        raise ParseError(root / label_name, 8, "label outside 0..9")
    return images[:, None], labels.astype(np.int64)


def load_mnist(path: str | os.PathLike[str] | None = None) -> Splits:
    """Load MNIST from the four IDX files in ``path``.

    :raises bnexpand.errors.ParseError: on a bad magic number, a truncated
                                        file or mismatched counts.
    """
    root = data_root(path)
    splits = _splits(_mnist_split(root, "train"), _mnist_split(root, "test"),
                     10, "none")
    logger.info("loaded MNIST from %s: %d train, %d test images",
                root, splits.train.size, splits.test.size)
    return splits


def read_cifar_batch(path: str | os.PathLike[str],
                     records: int | None = CIFAR_RECORDS_PER_BATCH
                     ) -> tuple[npt.NDArray[np.uint8], Labels]:
    """Parse one CIFAR-10 binary batch: records of one label byte
    followed by 3072 pixel bytes, channel-major.

    :param records: required record count, ``None`` to accept any.
    """
    path = Path(path)
    raw = _open(path)
    if not raw:
        raise ParseError(path, 0, "empty batch file")
    count, rest = divmod(len(raw), CIFAR_RECORD)
    if rest:
        raise ParseError(path, count * CIFAR_RECORD, "truncated record")
    if records is not None and count != records:
        raise ParseError(path, len(raw),
                         f"expected {records} records, found {count}")
    table = np.frombuffer(raw, dtype=np.uint8).reshape(count, CIFAR_RECORD)
    labels = table[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise ParseError(path, bad * CIFAR_RECORD, "label outside 0..9")
    return table[:, 1:].reshape((count,) + CIFAR_SHAPE), labels


def load_cifar10(path: str | os.PathLike[str] | None = None,
                 records: int | None = CIFAR_RECORDS_PER_BATCH) -> Splits:
    """Load CIFAR-10 from its binary batches in ``path`` (or in its
    ``cifar-10-batches-bin`` subdirectory)."""
    root = data_root(path)
    if not (root / CIFAR_TEST_FILES[0]).exists() \
            and (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"

    def read(names: tuple[str, ...]) -> tuple[npt.NDArray[np.uint8], Labels]:
        parts = [read_cifar_batch(root / name, records) for name in names]
        return (np.concatenate([p[0] for p in parts]),
                np.concatenate([p[1] for p in parts]))

    splits = _splits(read(CIFAR_TRAIN_FILES), read(CIFAR_TEST_FILES), 10,
                     "crop-flip")
    logger.info("loaded CIFAR-10 from %s: %d train, %d test images",
                root, splits.train.size, splits.test.size)
    return splits


def synthetic(count: int, shape: tuple[int, int, int], classes: int = 10,
              seed: int = 0, test_count: int | None = None) -> Splits:
    """A learnable random dataset: labels are the argmax of a fixed random
    linear map of the images."""
    rng = np.random.default_rng(seed)
    total = count + (count if test_count is None else test_count)
    images = rng.integers(0, 256, size=(total,) + shape, dtype=np.uint8)
    projection = rng.standard_normal((classes, int(np.prod(shape))))
    centered = images.reshape(total, -1).astype(np.float64) - 127.5
    labels = np.argmax(centered @ projection.T, axis=1).astype(np.int64)
    return _splits((images[:count], labels[:count]),
                   (images[count:], labels[count:]), classes, "none")


def load_dataset(name: str, path: str | os.PathLike[str] | None = None) -> Splits:
    if name == "mnist":
        return load_mnist(path)
    elif name == "cifar10":
        return load_cifar10(path)
    raise ValueError(f"unknown dataset {name!r}")


def crop_offsets(count: int, rng: np.random.Generator,
                 padding: int = CROP_PADDING) -> tuple[Labels, Labels]:
    offsets = rng.integers(0, 2 * padding + 1, size=(2, count))
    return offsets[0], offsets[1]


def random_crop(batch: Tensor, dy: Labels, dx: Labels,
                padding: int = CROP_PADDING) -> Tensor:
    """Zero-pad every image by ``padding`` and cut it back to its size at
    offsets ``(dy[n], dx[n])``."""
    n, _, h, w = batch.shape
    padded = np.pad(batch, ((0, 0), (0, 0), (padding, padding),
                            (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (h, w),
                                                       axis=(2, 3))
    return np.ascontiguousarray(windows[np.arange(n), :, dy, dx])


def hflip(batch: Tensor) -> Tensor:
    return batch[..., ::-1].copy()


def augment(batch: Tensor, policy: str, rng: np.random.Generator) -> Tensor:
    """Apply a training augmentation ``policy`` to ``batch``.

    ``"crop-flip"`` pads by 4, takes a random crop of the original size and
    flips half of the images horizontally; ``"none"`` returns the batch.
    """
    if policy == "none":
        return batch
    elif policy != "crop-flip":
        raise ValueError(f"unknown augmentation policy {policy!r}")
    dy, dx = crop_offsets(batch.shape[0], rng)
    flips = rng.random(batch.shape[0]) < 0.5
    out = random_crop(batch, dy, dx)
    out[flips] = out[flips, ..., ::-1]
    return out
