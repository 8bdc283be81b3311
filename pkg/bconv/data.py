"""
Datasets for the training loops.

A :class:`Dataset` holds images as a float array [M, C, H, W] with values in
[0, 1] and integer labels in [0, K). Images enter the gradient graph only when a
batch is cut out of them, so the dataset itself stays a plain, read-only numpy
container that is safe to share between threads.
"""

import concurrent.futures
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Sequence, Tuple, TypeVar, Union

import numpy as np

from .tensor import Tensor, resolve_dtype

CIFAR_SIDE = 32
CIFAR_PIXELS = 3 * CIFAR_SIDE * CIFAR_SIDE
CIFAR10_RECORD = 1 + CIFAR_PIXELS
CIFAR100_RECORD = 2 + CIFAR_PIXELS
CIFAR10_CLASSES = 10
CIFAR100_CLASSES = {"coarse": 20, "fine": 100}

PathLike = Union[str, "os.PathLike[str]"]
T = TypeVar("T")


class DataError(ValueError):
    """Raised for malformed dataset files, labels or batching settings."""


@dataclass
class Dataset:
    """Images [M, C, H, W] in [0, 1] with one label in [0, ``class_count``) each."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = "dataset"

    def __post_init__(self) -> None:
        self.images = np.ascontiguousarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        shape, dtype = self.images.shape, self.images.dtype
        if self.images.ndim != 4:
            raise DataError(f"{self.name}: images must be [M, C, H, W], got {shape}")
        if dtype not in (np.float32, np.float64):
            raise DataError(
                f"{self.name}: images must be float32 or float64, got {dtype}"
            )
        if shape[0] < 1:
            raise DataError(f"{self.name}: dataset is empty")
        if self.labels.shape[0] != shape[0]:
            raise DataError(
                f"{self.name}: {self.labels.shape[0]} labels for {shape[0]} images"
            )
        if self.class_count < 1:
            raise DataError(
                f"{self.name}: class_count must be >= 1, got {self.class_count}"
            )
        bad = self.labels[(self.labels < 0) | (self.labels >= self.class_count)]
        if bad.size:
            raise DataError(
                f"{self.name}: label {int(bad[0])} outside [0, {self.class_count})"
            )
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise DataError(f"{self.name}: pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def __repr__(self) -> str:
        return (
            f"Dataset(name={self.name!r}, size={len(self)}, "
            f"shape={self.images.shape[1:]}, classes={self.class_count})"
        )

    @property
    def channels(self) -> int:
        return int(self.images.shape[1])

    @property
    def resolution(self) -> Tuple[int, int]:
        return int(self.images.shape[2]), int(self.images.shape[3])

    @property
    def dtype(self) -> np.dtype:
        return self.images.dtype

    def astype(self, dtype: Union[str, type]) -> "Dataset":
        target = resolve_dtype(dtype)
        if self.images.dtype == target:
            return self
        images = self.images.astype(target)
        return Dataset(images, self.labels, self.class_count, self.name)

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


def synth_pattern(
    label: int,
    classes: int,
    resolution: Tuple[int, int],
    channels: int = 3,
    variant: int = 0,
) -> np.ndarray:
    """Deterministic sinusoid for one class: its own orientation and frequency.

    Orientations are spread over half a turn so no two classes share one, and
    ``variant`` rotates and phase-shifts every class to give a second domain with
    the same label set.
    """
    h, w = resolution
    angle = np.pi * (label + 0.5 * variant) / classes
    frequency = 2.0 + (label % 3)
    rows, cols = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    wave = frequency * 2.0 * np.pi * (cols * np.cos(angle) + rows * np.sin(angle))
    planes = [
        0.5 + 0.4 * np.sin(wave + channel * np.pi / 3.0 + variant * np.pi / 4.0)
        for channel in range(channels)
    ]
    return np.stack(planes)


def synth_generate(
    classes: int,
    per_class: int,
    resolution: Tuple[int, int] = (CIFAR_SIDE, CIFAR_SIDE),
    noise_std: float = 0.05,
    seed: int = 0,
    channels: int = 3,
    variant: int = 0,
    dtype: Union[str, type] = "f32",
) -> Dataset:
    """Build a labelled synthetic dataset.

    Every image of class ``c`` is :func:`synth_pattern` for ``c`` plus seeded
    Gaussian noise, clipped to [0, 1]. With ``noise_std=0`` all images of a class
    are identical and the classes are separable by nearest centroid.
    """
    if classes < 2:
        raise DataError(f"synthetic data needs at least 2 classes, got {classes}")
    if per_class < 1:
        raise DataError(f"per_class must be >= 1, got {per_class}")
    if noise_std < 0:
        raise DataError(f"noise_std must be >= 0, got {noise_std}")

    patterns = np.stack(
        [
            synth_pattern(c, classes, resolution, channels, variant)
            for c in range(classes)
        ]
    )
    labels = np.repeat(np.arange(classes), per_class)
    images = patterns[labels]
    if noise_std > 0:
        rng = np.random.default_rng(seed)
        images = images + noise_std * rng.standard_normal(images.shape)
    images = np.clip(images, 0.0, 1.0).astype(resolve_dtype(dtype))
    name = f"synthetic-k{classes}-v{variant}"
    logging.info(
        f"Generated {name}: {len(labels)} images at {resolution[0]}x{resolution[1]}"
    )
    return Dataset(images, labels, classes, name)


# ---------------------------------------------------------------------------
# CIFAR binary batches
# ---------------------------------------------------------------------------


def _read_records(
    paths: Union[PathLike, Sequence[PathLike]], record_size: int
) -> np.ndarray:
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    chunks = []
    for path in paths:
        try:
            raw = np.fromfile(path, dtype=np.uint8)
        except OSError as e:
            raise DataError(f"Cannot read {path}: {e}") from e
        if raw.size == 0 or raw.size % record_size:
            raise DataError(
                f"{path}: length {raw.size} is not a positive multiple of the "
                f"{record_size}-byte record size"
            )
        chunks.append(raw.reshape(-1, record_size))
        logging.debug(f"Read {chunks[-1].shape[0]} records from {path}")
    if not chunks:
        raise DataError("no CIFAR files given")
    return np.concatenate(chunks)


def _scale_pixels(pixels: np.ndarray, dtype: Union[str, type]) -> np.ndarray:
    target = resolve_dtype(dtype)
    images = pixels.reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).astype(target)
    return images / target(255.0)


def cifar_read(
    path: Union[PathLike, Sequence[PathLike]], dtype: Union[str, type] = "f32"
) -> Dataset:
    """Read CIFAR-10 binary batches (1 label byte + 3072 channel-major pixel bytes).

    ``path`` may be a single file or a list of files, concatenated in order.
    """
    records = _read_records(path, CIFAR10_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= CIFAR10_CLASSES:
        index = int(np.argmax(labels >= CIFAR10_CLASSES))
        raise DataError(
            f"record {index}: label byte {int(labels[index])} is not a CIFAR-10 class"
        )
    if isinstance(path, (str, os.PathLike)):
        name = os.path.basename(str(path))
    else:
        name = "cifar10"
    images = _scale_pixels(records[:, 1:], dtype)
    return Dataset(images, labels, CIFAR10_CLASSES, name)


def cifar100_read(
    path: Union[PathLike, Sequence[PathLike]],
    label_mode: str = "fine",
    dtype: Union[str, type] = "f32",
) -> Dataset:
    """Read CIFAR-100 binary batches (coarse byte, fine byte, 3072 pixel bytes)."""
    if label_mode not in CIFAR100_CLASSES:
        raise ValueError(f"label_mode must be 'coarse' or 'fine', got {label_mode!r}")
    records = _read_records(path, CIFAR100_RECORD)
    column = 0 if label_mode == "coarse" else 1
    classes = CIFAR100_CLASSES[label_mode]
    labels = records[:, column].astype(np.int64)
    if labels.max() >= classes:
        index = int(np.argmax(labels >= classes))
        raise DataError(
            f"record {index}: {label_mode} label {int(labels[index])} >= {classes}"
        )
    images = _scale_pixels(records[:, 2:], dtype)
    return Dataset(images, labels, classes, f"cifar100-{label_mode}")


def cifar_write(dataset: Dataset, path: PathLike) -> None:
    """Write ``dataset`` in the CIFAR-10 binary layout, quantizing pixels to 8 bits."""
    if dataset.images.shape[1:] != (3, CIFAR_SIDE, CIFAR_SIDE):
        raise DataError(
            f"CIFAR records hold 3x32x32 images, "
            f"{dataset.name} has {dataset.images.shape[1:]}"
        )
    if dataset.class_count > CIFAR10_CLASSES:
        raise DataError(
            f"CIFAR-10 labels fit 10 classes, "
            f"{dataset.name} has {dataset.class_count}"
        )
    pixels = np.rint(dataset.images * 255.0).clip(0, 255).astype(np.uint8)
    records = np.empty((len(dataset), CIFAR10_RECORD), dtype=np.uint8)
    records[:, 0] = dataset.labels
    records[:, 1:] = pixels.reshape(len(dataset), -1)
    records.tofile(path)
    logging.debug(f"Wrote {len(dataset)} records to {path}")


def subset(dataset: Dataset, count: int, seed: int = 0) -> Dataset:
    """``count`` samples drawn without replacement, kept in their original order."""
    if count < 1:
        raise DataError(f"subset size must be >= 1, got {count}")
    if count >= len(dataset):
        return dataset
    chosen = np.sort(np.random.default_rng(seed).permutation(len(dataset))[:count])
    return Dataset(
        dataset.images[chosen],
        dataset.labels[chosen],
        dataset.class_count,
        f"{dataset.name}[{count}]",
    )


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


@dataclass
class BatchPlan:
    """Seeded per-epoch shuffling into mini-batches of ``batch_size``.

    The permutation of epoch ``e`` depends only on ``(seed, e)``; the last batch
    of an epoch may be smaller.
    """

    seed: int
    batch_size: int
    _permutations: Dict[Tuple[int, int], np.ndarray] = field(
        default_factory=dict, init=False, repr=False
    )

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise DataError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.seed < 0:
            raise DataError(f"seed must be >= 0, got {self.seed}")

    def permutation(self, epoch: int, size: int) -> np.ndarray:
        key = (epoch, size)
        if key not in self._permutations:
            rng = np.random.default_rng((self.seed, epoch))
            self._permutations[key] = rng.permutation(size)
        return self._permutations[key]

    def index_batches(self, epoch: int, size: int) -> List[np.ndarray]:
        order = self.permutation(epoch, size)
        step = self.batch_size
        return [order[start : start + step] for start in range(0, size, step)]

    def batch_count(self, size: int) -> int:
        return -(-size // self.batch_size)


def augment_batch(
    images: np.ndarray, rng: np.random.Generator, pad: int = 4
) -> np.ndarray:
    """Random translation (zero-pad by ``pad`` then crop) and horizontal mirroring."""
    n, _, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    rows = rng.integers(0, 2 * pad + 1, size=n)
    cols = rng.integers(0, 2 * pad + 1, size=n)
    flips = rng.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, :, rows[i] : rows[i] + h, cols[i] : cols[i] + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def batches(
    dataset: Dataset, plan: BatchPlan, epoch: int, augment: bool = False
) -> Iterator[Tuple[Tensor, np.ndarray]]:
    """Yield ``(images, labels)`` for one epoch in the plan's order."""
    for index, chosen in enumerate(plan.index_batches(epoch, len(dataset))):
        images = dataset.images[chosen]
        if augment:
            rng = np.random.default_rng((plan.seed, epoch, index))
            images = augment_batch(images, rng)
        yield Tensor(images), dataset.labels[chosen]


def prefetch(iterable: Iterable[T]) -> Iterator[T]:
    """Produce the next item on a worker thread while the caller uses the current one.

    Items come out in the same order as from ``iterable``.
    """
    iterator = iter(iterable)
    done = object()
    with concurrent.futures.ThreadPoolExecutor(max_workers=1) as executor:
        pending = executor.submit(next, iterator, done)
        while True:
            item = pending.result()
            if item is done:
                return
            pending = executor.submit(next, iterator, done)
            yield item  # type: ignore[misc]
