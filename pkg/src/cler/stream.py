"""Class-incremental task streams.

A labeled image collection is split into ``T`` tasks with disjoint, equally
sized label sets. Each task is consumed online: every training example is
yielded exactly once per epoch, in a seeded shuffled order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch

from .errors import ConfigError, DataError

DATASET_MAGIC = b"CLERDATA"
DATASET_VERSION = 1
_HEADER = struct.Struct("<8sIIIIIQQ")

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}


@dataclass
class LabeledImages:
    """In-memory dataset: channels-first float32 images in [0, 1] plus int64 labels."""

    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    num_classes: int
    # per-channel normalization applied inside the network, None = identity
    mean: Optional[tuple] = None
    std: Optional[tuple] = None

    def __post_init__(self):
        self.train_images = np.ascontiguousarray(self.train_images, dtype=np.float32)
        self.test_images = np.ascontiguousarray(self.test_images, dtype=np.float32)
        self.train_labels = np.asarray(self.train_labels, dtype=np.int64)
        self.test_labels = np.asarray(self.test_labels, dtype=np.int64)
        if self.train_images.ndim != 4 or self.test_images.ndim != 4:
            raise DataError("images must be stored as (N, C, H, W)")
        if self.train_images.shape[1:] != self.test_images.shape[1:]:
            raise DataError("train and test images have different shapes")
        if len(self.train_images) != len(self.train_labels) or len(self.test_images) != len(self.test_labels):
            raise DataError("image and label counts differ")
        for labels in (self.train_labels, self.test_labels):
            if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise DataError(f"labels must lie in [0, {self.num_classes})")

    @property
    def image_shape(self) -> tuple:
        return tuple(self.train_images.shape[1:])


@dataclass(frozen=True)
class TaskSpec:
    index: int
    class_ids: tuple


@dataclass(frozen=True)
class ClassIncrementalStream:
    data: LabeledImages
    tasks: tuple
    train_indices: tuple = field(repr=False)
    test_indices: tuple = field(repr=False)

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @property
    def num_classes(self) -> int:
        return self.data.num_classes

    @property
    def image_shape(self) -> tuple:
        return self.data.image_shape

    def _check_task(self, task_index: int) -> None:
        if not 0 <= task_index < self.num_tasks:
            raise IndexError(f"task index {task_index} outside [0, {self.num_tasks})")

    def classes_up_to(self, task_index: int) -> list:
        """Class ids of tasks 0..task_index inclusive."""
        return [c for t in self.tasks[: task_index + 1] for c in t.class_ids]

    def task_train(self, task_index: int) -> tuple:
        self._check_task(task_index)
        idx = self.train_indices[task_index]
        return self.data.train_images[idx], self.data.train_labels[idx]

    def task_test(self, task_index: int) -> tuple:
        self._check_task(task_index)
        idx = self.test_indices[task_index]
        return self.data.test_images[idx], self.data.test_labels[idx]

    def iterate_task(self, task_index: int, batch_size: int, shuffle_seed: int) -> Iterator[tuple]:
        return iterate_task(self, task_index, batch_size, shuffle_seed)


def build_class_il_stream(
    data: LabeledImages,
    num_tasks: int,
    seed: int = 0,
    class_order: Optional[Sequence[int]] = None,
) -> ClassIncrementalStream:
    """Split ``data`` into ``num_tasks`` tasks of equally many consecutive classes.

    ``class_order`` permutes class ids before chunking; the default is the
    natural ascending order. ``seed`` is accepted so that callers can key a
    stream on it, but class assignment only depends on ``class_order``.
    """
    del seed  # class assignment is fully determined by class_order
    n = data.num_classes
    if num_tasks < 1 or n % num_tasks:
        raise ConfigError(f"{n} classes cannot be split evenly into {num_tasks} tasks")
    order = list(range(n)) if class_order is None else [int(c) for c in class_order]
    if sorted(order) != list(range(n)):
        raise ConfigError("class_order must be a permutation of all class ids")

    train_counts = np.bincount(data.train_labels, minlength=n)
    test_counts = np.bincount(data.test_labels, minlength=n)
    empty = [c for c in range(n) if train_counts[c] == 0 or test_counts[c] == 0]
    if empty:
        raise DataError(f"classes without train or test examples: {empty[:10]}")

    per_task = n // num_tasks
    tasks, train_idx, test_idx = [], [], []
    for t in range(num_tasks):
        ids = tuple(order[t * per_task:(t + 1) * per_task])
        tasks.append(TaskSpec(index=t, class_ids=ids))
        train_idx.append(np.flatnonzero(np.isin(data.train_labels, ids)))
        test_idx.append(np.flatnonzero(np.isin(data.test_labels, ids)))
    return ClassIncrementalStream(data, tuple(tasks), tuple(train_idx), tuple(test_idx))


def iterate_task(stream: ClassIncrementalStream, task_index: int, batch_size: int,
                 shuffle_seed: int) -> Iterator[tuple]:
    """Yield ``(images, labels)`` tensors covering the task's training set once."""
    stream._check_task(task_index)
    if batch_size < 1:
        raise ConfigError("batch_size must be positive")
    idx = stream.train_indices[task_index]
    order = idx[np.random.default_rng(shuffle_seed).permutation(len(idx))]
    for start in range(0, len(order), batch_size):
        sel = order[start:start + batch_size]
        yield (torch.from_numpy(stream.data.train_images[sel]),
               torch.from_numpy(stream.data.train_labels[sel]))


def iterate_arrays(images: np.ndarray, labels: np.ndarray, batch_size: int,
                   shuffle_seed: Optional[int] = None) -> Iterator[tuple]:
    """Batch arbitrary arrays; ``shuffle_seed=None`` keeps the stored order."""
    order = np.arange(len(labels))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(labels))
    for start in range(0, len(order), batch_size):
        sel = order[start:start + batch_size]
        yield torch.from_numpy(images[sel]), torch.from_numpy(labels[sel])


def make_synthetic_dataset(
    num_classes: int,
    per_class: int,
    image_size: int,
    seed: int,
    test_per_class: Optional[int] = None,
    channels: int = 3,
    noise: float = 0.25,
    contrast: float = 1.0,
) -> LabeledImages:
    """Generate a class-separable, orientation-asymmetric toy image dataset.

    Every class owns a blocky low-frequency template; examples are the
    template plus Gaussian noise, squeezed into [0, 0.9]; ``contrast`` scales
    how far templates sit from mid-grey. A fixed marker of
    value 1.0 in the top-left corner breaks rotational and jigsaw symmetry so
    that the transform applied to an image can be recovered from its pixels.
    """
    if image_size < 8 or image_size % 2:
        raise ConfigError("image_size must be even and >= 8")
    if num_classes < 1 or per_class < 1:
        raise ConfigError("num_classes and per_class must be positive")
    if test_per_class is None:
        test_per_class = max(1, per_class // 5)

    rng = np.random.default_rng(seed)
    cells = 4
    block = image_size // cells
    coarse = 0.5 + contrast * (rng.random((num_classes, channels, cells, cells)) - 0.5)
    templates = np.kron(coarse, np.ones((block, block)))
    pad = image_size - templates.shape[-1]
    if pad:
        templates = np.pad(templates, ((0, 0), (0, 0), (0, pad), (0, pad)), mode="edge")
    marker = max(2, image_size // 6)

    def draw(count):
        labels = np.repeat(np.arange(num_classes), count)
        images = templates[labels] + noise * rng.standard_normal(
            (len(labels), channels, image_size, image_size))
        images = 0.9 * np.clip(images, 0.0, 1.0)
        images[:, :, :marker, :marker] = 1.0
        return images.astype(np.float32), labels

    train_x, train_y = draw(per_class)
    test_x, test_y = draw(test_per_class)
    return LabeledImages(train_x, train_y, test_x, test_y, num_classes)


def save_dataset(path, data: LabeledImages) -> None:
    """Write ``data`` to a single versioned binary file."""
    c, h, w = data.image_shape
    header = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, c, h, w, data.num_classes,
                          len(data.train_labels), len(data.test_labels))
    with open(path, "wb") as fh:
        fh.write(header)
        for arr, dtype in ((data.train_images, "<f4"), (data.train_labels, "<i8"),
                           (data.test_images, "<f4"), (data.test_labels, "<i8")):
            fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def load_dataset(path) -> LabeledImages:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, c, h, w, n_classes, n_train, n_test = _HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise DataError(f"{path}: not a dataset cache file")
    if version != DATASET_VERSION:
        raise DataError(f"{path}: unsupported dataset cache version {version}")
    offset = _HEADER.size
    arrays = []
    for count, shape, dtype in ((n_train, (n_train, c, h, w), "<f4"), (n_train, (n_train,), "<i8"),
                                (n_test, (n_test, c, h, w), "<f4"), (n_test, (n_test,), "<i8")):
        size = int(np.prod(shape)) * np.dtype(dtype).itemsize
        if offset + size > len(raw):
            raise DataError(f"{path}: truncated payload")
        arrays.append(np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=offset).reshape(shape))
        offset += size
    return LabeledImages(*arrays, num_classes=n_classes)


def load_image_folder(root, image_size: Optional[int] = None, test_fraction: float = 0.2,
                      seed: int = 0) -> LabeledImages:
    """Load ``root/<class>/<image>`` (or ``root/{train,test}/<class>/...``).

    Class ids follow the sorted subdirectory names. Without explicit
    train/test subdirectories each class is split with ``test_fraction``.
    """
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")

    def read_split(base):
        classes = sorted(p.name for p in base.iterdir() if p.is_dir())
        files = {c: sorted(f for f in (base / c).iterdir() if f.suffix.lower() in IMAGE_EXTENSIONS)
                 for c in classes}
        return classes, files

    def to_array(path):
        img = Image.open(path).convert("RGB")
        if image_size is not None:
            img = img.resize((image_size, image_size), Image.BILINEAR)
        return np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0

    def stack(items):
        if not items:
            return np.zeros((0, 3, image_size or 1, image_size or 1), np.float32), np.zeros(0, np.int64)
        xs = [to_array(p) for p, _ in items]
        if len({x.shape for x in xs}) > 1:
            raise DataError("images differ in size; pass image_size to resize")
        return np.stack(xs), np.array([y for _, y in items], dtype=np.int64)

    if (root / "train").is_dir() and (root / "test").is_dir():
        classes, train_files = read_split(root / "train")
        test_classes, test_files = read_split(root / "test")
        if test_classes != classes:
            raise DataError("train and test class directories differ")
        train = [(f, i) for i, c in enumerate(classes) for f in train_files[c]]
        test = [(f, i) for i, c in enumerate(classes) for f in test_files[c]]
    else:
        classes, files = read_split(root)
        rng = np.random.default_rng(seed)
        train, test = [], []
        for i, c in enumerate(classes):
            fs = [files[c][j] for j in rng.permutation(len(files[c]))]
            n_test = int(round(len(fs) * test_fraction)) if len(fs) > 1 else 0
            test += [(f, i) for f in fs[:n_test]]
            train += [(f, i) for f in fs[n_test:]]
    if not classes:
        raise DataError(f"{root} contains no class directories")
    train_x, train_y = stack(train)
    test_x, test_y = stack(test)
    return LabeledImages(train_x, train_y, test_x, test_y, len(classes))
