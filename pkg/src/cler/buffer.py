"""Reservoir-sampling episodic memory."""

from __future__ import annotations

from typing import Optional

import numpy as np
import torch

from .errors import ConfigError, NoReplayAvailable


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


class ReplayBuffer:
    """Fixed-capacity memory of raw (non-augmented) examples.

    Insertion follows reservoir sampling, so after ``N >= capacity`` offers
    every offered example is held with probability ``capacity / N``.
    Storage is preallocated lazily on the first offer.
    """

    def __init__(self, capacity: int, seed: Optional[int] = None):
        if capacity < 0:
            raise ConfigError("buffer capacity must be non-negative")
        self.capacity = int(capacity)
        self.seen_count = 0
        self.images: Optional[np.ndarray] = None
        self.labels: Optional[np.ndarray] = None
        # stream position of each stored example, kept for inspection and tests
        self.positions: Optional[np.ndarray] = None
        self._size = 0
        self._rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return self._size

    def is_empty(self) -> bool:
        return self._size == 0

    def _allocate(self, image_shape, image_dtype) -> None:
        self.images = np.zeros((self.capacity, *image_shape), dtype=image_dtype)
        self.labels = np.zeros(self.capacity, dtype=np.int64)
        self.positions = np.full(self.capacity, -1, dtype=np.int64)

    def offer(self, image, label) -> None:
        self.offer_batch(np.asarray(image)[None], np.asarray([label]))

    def offer_batch(self, images, labels) -> None:
        """Offer examples in order; equivalent to calling :meth:`offer` for each."""
        if isinstance(images, torch.Tensor):
            images = images.detach().cpu().numpy()
        if isinstance(labels, torch.Tensor):
            labels = labels.detach().cpu().numpy()
        images = np.asarray(images)
        labels = np.asarray(labels, dtype=np.int64)
        n = len(labels)
        if n == 0 or self.capacity == 0:
            self.seen_count += n
            return
        if self.images is None:
            self._allocate(images.shape[1:], images.dtype)

        # reservoir draw for the example at 0-based stream position p: j ~ U{0..p}
        stream_pos = self.seen_count + np.arange(n)
        slots = self._rng.integers(0, stream_pos + 1)
        for i in range(n):
            if self._size < self.capacity:
                slot = self._size
                self._size += 1
            elif slots[i] < self.capacity:
                slot = int(slots[i])
            else:
                continue
            self.images[slot] = images[i]
            self.labels[slot] = labels[i]
            self.positions[slot] = stream_pos[i]
        self.seen_count += n

    def sample(self, batch_size: int, rng=None) -> tuple:
        """Draw ``batch_size`` stored examples as ``(images, labels)`` tensors.

        Sampling is without replacement when enough examples are stored and
        with replacement otherwise. ``rng`` may be a seed or a numpy Generator;
        ``None`` uses the buffer's own generator.
        """
        if self._size == 0:
            raise NoReplayAvailable("replay buffer is empty")
        gen = self._rng if rng is None else _as_rng(rng)
        if self._size < batch_size:
            idx = gen.integers(0, self._size, size=batch_size)
        else:
            idx = gen.choice(self._size, size=batch_size, replace=False)
        return torch.from_numpy(self.images[idx]), torch.from_numpy(self.labels[idx])

    def state_dict(self) -> dict:
        size = self._size
        return {
            "capacity": self.capacity,
            "seen_count": self.seen_count,
            "images": None if self.images is None else torch.from_numpy(self.images[:size].copy()),
            "labels": None if self.labels is None else torch.from_numpy(self.labels[:size].copy()),
            "positions": None if self.positions is None else torch.from_numpy(self.positions[:size].copy()),
            "rng": self._rng.bit_generator.state,
        }

    def load_state_dict(self, state: dict) -> None:
        self.capacity = int(state["capacity"])
        self.seen_count = int(state["seen_count"])
        self._size = 0
        self.images = self.labels = self.positions = None
        if state["images"] is not None:
            images = state["images"].numpy()
            self._allocate(images.shape[1:], images.dtype)
            self._size = len(images)
            self.images[:self._size] = images
            self.labels[:self._size] = state["labels"].numpy()
            self.positions[:self._size] = state["positions"].numpy()
        self._rng.bit_generator.state = state["rng"]
