"""Self-supervised pretext tasks.

Only rotation prediction is implemented. A task maps a batch of source images
to an augmented batch plus integer class labels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .errors import ContractError, DataError

NUM_ROTATIONS = 4


def rotate90(image: np.ndarray, k: int) -> np.ndarray:
    """Rotate an H x W x C image counterclockwise by ``90 * k`` degrees.

    For k=1 the output pixel (i, j, c) is input pixel (j, H-1-i, c).
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != image.shape[1]:
        raise DataError(f"rotation needs a square H x W x C image, got shape {image.shape}")
    return np.ascontiguousarray(np.rot90(image, k % 4, axes=(0, 1)))


@dataclass
class PretextBatch:
    images: np.ndarray
    labels: np.ndarray
    source_indices: np.ndarray


def make_pretext_batch(images: np.ndarray) -> PretextBatch:
    """All four rotations of every source image, source-major and rotation-minor.

    Row ``4 * i`` is therefore the unrotated source image ``i``.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ContractError("make_pretext_batch needs a nonempty (n, H, W, C) batch")
    n, h, w, c = images.shape
    if h != w:
        raise DataError(f"rotation needs square images, got {h} x {w}")
    out = np.empty((n, NUM_ROTATIONS, h, w, c))
    for k in range(NUM_ROTATIONS):
        out[:, k] = np.rot90(images, k, axes=(1, 2))
    return PretextBatch(
        images=out.reshape(n * NUM_ROTATIONS, h, w, c),
        labels=np.tile(np.arange(NUM_ROTATIONS), n),
        source_indices=np.repeat(np.arange(n), NUM_ROTATIONS),
    )


class PretextTask(Protocol):
    num_classes: int

    def augment(self, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ...


class RotationTask:
    """Predict which multiple of 90 degrees an image was rotated by."""

    num_classes = NUM_ROTATIONS

    def augment(self, images):
        batch = make_pretext_batch(images)
        return batch.images, batch.labels


class ExemplarTask:
    """Exemplar-CNN surrogate classes. Not implemented; rotation is the only shipped task."""

    def augment(self, images):
        raise NotImplementedError("the exemplar pretext task is not part of this library")


class JigsawTask:
    """3x3 jigsaw permutation prediction. Not implemented; rotation is the only shipped task."""

    def augment(self, images):
        raise NotImplementedError("the jigsaw pretext task is not part of this library")
