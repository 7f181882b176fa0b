"""Multiclass-classification datasets turned into contextual bandits.

Each class is an arm. Every round shows one image (the same context for all
arms); pulling the arm equal to the image's label pays 1, anything else 0.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractError, DataError, EndOfRun, FormatError
from .seeding import spawn_streams

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
BNDT_MAGIC = b"BNDT1"
_BNDT_HEADER = struct.Struct("<5I")


@dataclass(frozen=True)
class LabeledExample:
    image: np.ndarray
    label: int


class Dataset:
    """Images (n, H, W, C) in [0, 1] with integer labels; indexes like a list of LabeledExample."""

    def __init__(self, images, labels, num_classes: int | None = None):
        images = np.asarray(images, dtype=np.float64)
        labels = np.asarray(labels)
        if images.ndim == 3:
            images = images[..., None]
        if images.ndim != 4:
            raise DataError(f"images must be (n, H, W, C), got shape {images.shape}")
        if labels.shape != (images.shape[0],):
            raise DataError(f"{labels.shape[0] if labels.ndim else 0} labels for {images.shape[0]} images")
        if labels.size and (labels.min() < 0 or not np.issubdtype(labels.dtype, np.integer)):
            raise DataError("labels must be nonnegative integers")
        inferred = int(labels.max()) + 1 if labels.size else 0
        if num_classes is None:
            num_classes = inferred
        elif inferred > num_classes:
            raise DataError(f"label {inferred - 1} is out of range for {num_classes} classes")
        self.images = images
        self.labels = labels.astype(np.intp)
        self.num_classes = int(num_classes)

    @classmethod
    def from_examples(cls, examples, num_classes=None) -> Dataset:
        examples = list(examples)
        if not examples:
            raise DataError("empty dataset")
        return cls(np.stack([e.image for e in examples]), np.array([e.label for e in examples]), num_classes)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> LabeledExample:
        return LabeledExample(self.images[i], int(self.labels[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def take(self, indices) -> Dataset:
        return Dataset(self.images[indices], self.labels[indices], self.num_classes)


@dataclass(frozen=True)
class Context:
    """The round's observation. No label is attached."""

    image: np.ndarray
    num_arms: int

    @property
    def flat(self) -> np.ndarray:
        return self.image.reshape(-1)

    def for_arm(self, arm: int) -> np.ndarray:
        # shared-context convention: every arm sees the same image
        return self.image


@dataclass(frozen=True)
class RoundOutcome:
    reward: int
    correct_arm: int


class BanditEnv:
    def __init__(self, images: np.ndarray, labels: np.ndarray, num_arms: int):
        self._images = images
        self._labels = labels
        self.num_arms = num_arms
        self.horizon = len(labels)
        self.cursor = 0

    def observe(self) -> Context:
        if self.cursor >= self.horizon:
            raise EndOfRun(f"all {self.horizon} rounds have been played")
        return Context(self._images[self.cursor], self.num_arms)

    def step(self, arm: int) -> RoundOutcome:
        if self.cursor >= self.horizon:
            raise EndOfRun(f"all {self.horizon} rounds have been played")
        if not 0 <= arm < self.num_arms:
            raise ContractError(f"arm {arm} outside [0, {self.num_arms})")
        label = int(self._labels[self.cursor])
        self.cursor += 1
        return RoundOutcome(int(arm == label), label)

    def reset(self) -> None:
        self.cursor = 0


def from_multiclass(dataset, seed: int, num_arms: int | None = None) -> BanditEnv:
    """Shuffle ``dataset`` with the seed's env stream and wrap it as a bandit."""
    if not isinstance(dataset, Dataset):
        dataset = Dataset.from_examples(dataset, num_arms)
    if len(dataset) == 0:
        raise DataError("empty dataset")
    n_arms = dataset.num_classes if num_arms is None else num_arms
    if int(dataset.labels.max()) >= n_arms:
        raise DataError(f"label {int(dataset.labels.max())} >= configured arm count {n_arms}")
    order = spawn_streams(seed)["env"].permutation(len(dataset))
    return BanditEnv(dataset.images[order], dataset.labels[order], n_arms)


def observe(env: BanditEnv) -> Context:
    return env.observe()


def step(env: BanditEnv, chosen: int) -> RoundOutcome:
    return env.step(chosen)


# -- IDX -----------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:2] == b"\x1f\x8b":
        blob = gzip.decompress(blob)
    return blob


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Parse an unsigned-byte IDX file (optionally gzip-compressed)."""
    blob = _read_bytes(path)
    if len(blob) < 4:
        raise FormatError("file too short for an IDX magic number", offset=len(blob), path=path)
    (magic,) = struct.unpack_from(">I", blob, 0)
    if magic >> 8 != 0x08 or (expected_magic is not None and magic != expected_magic):
        raise FormatError(f"bad IDX magic 0x{magic:08x}", offset=0, path=path)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise FormatError("truncated IDX header", offset=len(blob), path=path)
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    size = int(np.prod(dims))
    if len(blob) < header + size:
        raise FormatError(
            f"truncated IDX payload: expected {size} bytes, found {len(blob) - header}",
            offset=len(blob),
            path=path,
        )
    if len(blob) > header + size:
        raise FormatError("trailing bytes after IDX payload", offset=header + size, path=path)
    return np.frombuffer(blob, dtype=np.uint8, count=size, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray, compress: bool | None = None) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise DataError("only unsigned-byte IDX files are supported")
    blob = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()
    if compress is None:
        compress = str(path).endswith(".gz")
    if compress:
        blob = gzip.compress(blob, mtime=0)
    Path(path).write_bytes(blob)


def load_idx(images_path, labels_path) -> Dataset:
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels", offset=4, path=labels_path
        )
    return Dataset(images[..., None] / 255.0, labels.astype(np.intp))


# -- generic binary --------------------------------------------------------------


def quantize(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)


def write_bndt(path, dataset: Dataset) -> None:
    """Magic, five little-endian u32 (count, H, W, C, N), then per example a u8 label and H*W*C u8 pixels."""
    n = len(dataset)
    h, w, c = dataset.image_shape
    if dataset.num_classes > 256:
        raise DataError("the binary format stores labels as single bytes")
    body = np.empty((n, 1 + h * w * c), dtype=np.uint8)
    body[:, 0] = dataset.labels
    body[:, 1:] = quantize(dataset.images).reshape(n, -1)
    with open(path, "wb") as f:
        f.write(BNDT_MAGIC)
        f.write(_BNDT_HEADER.pack(n, h, w, c, dataset.num_classes))
        f.write(body.tobytes())


def read_bndt(path) -> Dataset:
    blob = _read_bytes(path)
    if blob[:5] != BNDT_MAGIC:
        raise FormatError("bad magic, expected BNDT1", offset=0, path=path)
    if len(blob) < 5 + _BNDT_HEADER.size:
        raise FormatError("truncated header", offset=len(blob), path=path)
    n, h, w, c, n_classes = _BNDT_HEADER.unpack_from(blob, 5)
    start = 5 + _BNDT_HEADER.size
    rec = 1 + h * w * c
    if len(blob) != start + n * rec:
        bad = start + (len(blob) - start) // rec * rec
        raise FormatError(f"payload holds {len(blob) - start} bytes, expected {n * rec}", offset=bad, path=path)
    body = np.frombuffer(blob, dtype=np.uint8, offset=start).reshape(n, rec)
    labels = body[:, 0].astype(np.intp)
    if n and labels.max() >= n_classes:
        bad = int(np.argmax(labels >= n_classes))
        raise FormatError(f"label {labels[bad]} >= {n_classes} classes", offset=start + bad * rec, path=path)
    return Dataset(body[:, 1:].reshape(n, h, w, c) / 255.0, labels, n_classes)


def load_dataset(path) -> Dataset:
    """Open a generic binary dataset."""
    return read_bndt(path)


# -- synthetic -------------------------------------------------------------------


def gen_synthetic(
    num_classes: int,
    per_class: int,
    image_size: int,
    noise: float,
    seed: int,
    channels: int = 1,
    max_tries: int = 1000,
) -> Dataset:
    """Binary class templates plus clipped Gaussian pixel noise, in class-major order.

    Templates are redrawn until every pair is at least 0.5 * sqrt(H*W*C) apart in L2.
    """
    if num_classes < 2:
        raise ConfigurationError("need at least two classes")
    if per_class < 1 or image_size < 1 or channels < 1 or noise < 0:
        raise ConfigurationError("per_class, image_size and channels must be positive and noise >= 0")
    rng = np.random.default_rng(seed)
    shape = (image_size, image_size, channels)
    min_dist = 0.5 * np.sqrt(np.prod(shape))
    for _ in range(max_tries):
        templates = (rng.random((num_classes, *shape)) < 0.5).astype(np.float64)
        flat = templates.reshape(num_classes, -1)
        dist = np.sqrt(((flat[:, None, :] - flat[None, :, :]) ** 2).sum(-1))
        if np.all(dist[np.triu_indices(num_classes, 1)] >= min_dist):
            break
    else:
        raise ConfigurationError(f"could not draw {num_classes} separated templates of shape {shape}")
    images = np.repeat(templates, per_class, axis=0)
    if noise > 0:
        images = np.clip(images + noise * rng.standard_normal(images.shape), 0.0, 1.0)
    labels = np.repeat(np.arange(num_classes), per_class)
    return Dataset(images, labels, num_classes)


def resize_nearest(images: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize of (H, W, C) or (n, H, W, C) images to size x size."""
    images = np.asarray(images)
    h, w = images.shape[-3], images.shape[-2]
    rows = (np.arange(size) * h) // size
    cols = (np.arange(size) * w) // size
    return images[..., rows[:, None], cols[None, :], :]
