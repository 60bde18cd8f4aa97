"""Equivariant transform families used as self-supervised pretext tasks.

Two families are provided:

* ``rotation``: the four rotations by multiples of 90 degrees (counter-clockwise),
  member ``k`` rotates ``k`` times.
* ``jigsaw``: the 24 rearrangements of the four image quadrants, ordered as
  the lexicographic permutations of ``(0, 1, 2, 3)`` over ``(TL, TR, BL, BR)``.
  Member ``k`` places source quadrant ``perm[q]`` at target position ``q``.

Every member is a pixel permutation, so transforms are lossless and exactly
invertible. Images may be numpy arrays or torch tensors shaped ``(C, H, W)``
or batched ``(N, C, H, W)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .errors import ConfigError

FAMILY_NAMES = ("rotation", "jigsaw")

JIGSAW_PERMUTATIONS = tuple(itertools.permutations(range(4)))


@dataclass(frozen=True)
class TransformFamily:
    kind: str

    def __post_init__(self):
        if self.kind not in FAMILY_NAMES:
            raise ConfigError(f"unknown transform family {self.kind!r}")

    @property
    def size(self) -> int:
        return 4 if self.kind == "rotation" else len(JIGSAW_PERMUTATIONS)

    K = size

    def enumerate(self) -> list:
        """Descriptors of all members: quarter turns or quadrant permutations."""
        if self.kind == "rotation":
            return [{"k": k, "degrees": 90 * k} for k in range(4)]
        return [{"k": k, "permutation": p} for k, p in enumerate(JIGSAW_PERMUTATIONS)]

    def _check(self, k: int) -> None:
        if not 0 <= k < self.size:
            raise ValueError(f"transform index {k} outside [0, {self.size})")

    def apply(self, k: int, image):
        k = int(k)
        self._check(k)
        if self.kind == "rotation":
            return _rotate(image, k)
        return _jigsaw(image, JIGSAW_PERMUTATIONS[k])

    def inverse(self, k: int) -> int:
        self._check(k)
        if self.kind == "rotation":
            return (4 - k) % 4
        perm = JIGSAW_PERMUTATIONS[k]
        inv = [0] * 4
        for q, src in enumerate(perm):
            inv[src] = q
        return JIGSAW_PERMUTATIONS.index(tuple(inv))

    def compose(self, a: int, b: int) -> int:
        """Index ``c`` with ``apply(c, x) == apply(a, apply(b, x))``."""
        self._check(a)
        self._check(b)
        if self.kind == "rotation":
            return (a + b) % 4
        pa, pb = JIGSAW_PERMUTATIONS[a], JIGSAW_PERMUTATIONS[b]
        return JIGSAW_PERMUTATIONS.index(tuple(pb[pa[q]] for q in range(4)))

    def random_apply_batch(self, images, rng=None, labels=None):
        """Transform each image with an independently drawn member.

        ``rng`` is a ``torch.Generator`` or an integer seed. Pass ``labels`` to
        force specific members instead of sampling them. Returns
        ``(transformed, labels)`` as tensors.
        """
        images = torch.as_tensor(images)
        n = images.shape[0]
        if labels is None:
            gen = rng if isinstance(rng, torch.Generator) else _seeded(rng)
            labels = torch.randint(0, self.size, (n,), generator=gen)
        else:
            labels = torch.as_tensor(labels, dtype=torch.long)
        out = torch.empty_like(images)
        for k in torch.unique(labels).tolist():
            sel = labels == k
            out[sel] = self.apply(k, images[sel])
        return out, labels


def _seeded(seed: Optional[int]) -> torch.Generator:
    gen = torch.Generator()
    if seed is None:
        gen.seed()
    else:
        gen.manual_seed(int(seed))
    return gen


def _rotate(image, k: int):
    # counter-clockwise: new[..., i, j] = old[..., j, W - 1 - i]
    if isinstance(image, torch.Tensor):
        return torch.rot90(image, k, dims=(-2, -1))
    return np.ascontiguousarray(np.rot90(image, k, axes=(-2, -1)))


def _jigsaw(image, perm):
    h, w = image.shape[-2], image.shape[-1]
    if h % 2 or w % 2:
        raise ValueError(f"jigsaw needs even spatial dims, got {h}x{w}")
    hh, hw = h // 2, w // 2
    quads = [image[..., :hh, :hw], image[..., :hh, hw:], image[..., hh:, :hw], image[..., hh:, hw:]]
    out = torch.empty_like(image) if isinstance(image, torch.Tensor) else np.empty_like(image)
    out[..., :hh, :hw] = quads[perm[0]]
    out[..., :hh, hw:] = quads[perm[1]]
    out[..., hh:, :hw] = quads[perm[2]]
    out[..., hh:, hw:] = quads[perm[3]]
    return out


def get_family(name: Optional[str]) -> Optional[TransformFamily]:
    """Map a config string (``rotation`` | ``jigsaw`` | ``none``) to a family."""
    if name is None or name == "none":
        return None
    if name not in FAMILY_NAMES:
        raise ConfigError(f"unknown pretext family {name!r}; expected rotation, jigsaw or none")
    return TransformFamily(name)
