"""Seeded synthetic image data and an IDX-file loader."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class SyntheticDataset:
    """Noisy copies of one random template per class, clipped at zero.

    Templates are far apart relative to the noise, so the classes are
    linearly separable with overwhelming probability; clipping leaves about
    half of every image exactly zero, like a post-ReLU activation.
    """

    seed: int
    num_samples: int = 512
    classes: int = 4
    image_shape: tuple = (3, 16, 16)
    noise: float = 1.0

    def generate(self, split: str = "train"):
        """Return ``(images float32 [N,C,H,W], labels int64 [N])``; same seed, same bits."""
        streams = np.random.SeedSequence(self.seed).spawn(3)
        templates = np.random.Generator(np.random.PCG64(streams[0])).standard_normal(
            (self.classes,) + tuple(self.image_shape)
        )
        if split == "train":
            rng, n = np.random.Generator(np.random.PCG64(streams[1])), self.num_samples
        elif split == "test":
            rng, n = np.random.Generator(np.random.PCG64(streams[2])), max(self.num_samples // 4, self.classes)
        else:
            raise InvalidInputError(f"unknown split {split!r}")
        labels = rng.permutation(np.arange(n) % self.classes)
        x = templates[labels] + self.noise * rng.standard_normal((n,) + tuple(self.image_shape))
        x = np.maximum(x, 0.0).astype(np.float32)
        return x, labels.astype(np.int64)


def synthetic_input(seed: int, shape) -> np.ndarray:
    """A single seeded batch of clipped Gaussian noise, for analysis passes."""
    rng = np.random.Generator(np.random.PCG64(seed))
    return np.maximum(rng.standard_normal(tuple(shape)), 0.0).astype(np.float32)


_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def read_idx(path) -> np.ndarray:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[0] != 0 or data[1] != 0:
        raise InvalidInputError(f"{path}: not an IDX file")
    code, ndim = data[2], data[3]
    if code not in _IDX_TYPES:
        raise InvalidInputError(f"{path}: unknown IDX type code {code:#x}")
    if len(data) < 4 + 4 * ndim:
        raise InvalidInputError(f"{path}: truncated IDX header")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    dtype = _IDX_TYPES[code]
    count = int(np.prod(dims)) if dims else 1
    if len(data) < 4 + 4 * ndim + count * dtype.itemsize:
        raise InvalidInputError(f"{path}: IDX payload shorter than its header declares")
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=4 + 4 * ndim)
    return arr.reshape(dims).astype(dtype.newbyteorder("="))


def load_idx_dataset(images_path, labels_path):
    """Load an IDX image/label pair as float32 NCHW images scaled to [0, 1]."""
    images = read_idx(images_path)
    labels = read_idx(labels_path).astype(np.int64)
    if images.ndim == 3:
        images = images[:, None]
    if images.ndim != 4:
        raise InvalidInputError(f"{images_path}: expected 3-D or 4-D images, got {images.ndim}-D")
    if len(images) != len(labels):
        raise InvalidInputError(f"{len(images)} images but {len(labels)} labels")
    x = images.astype(np.float32)
    if images.dtype.kind == "u":
        x /= np.float32(255)
    return x, labels
