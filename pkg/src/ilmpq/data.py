"""Dataset loaders: a seeded Gaussian-blobs generator and IDX (MNIST-style) files."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractViolation, DomainError

# IDX type code -> numpy big-endian dtype
_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {dt: code for code, dt in _IDX_DTYPES.items()}


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    n_classes: int

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ContractViolation(f"{len(self.x)} samples but {len(self.y)} labels")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.n_classes)


def make_blobs(n_samples: int, n_features: int = 16, n_classes: int = 10,
               spread: float = 3.0, std: float = 1.0, seed: int = 0) -> Dataset:
    """Isotropic Gaussian clusters with centers drawn uniformly from ``[-spread, spread]``.

    Labels cycle through the classes so every class gets ``n_samples // n_classes``
    or one more samples.
    """
    if n_samples < 1 or n_classes < 1:
        raise DomainError("need at least one sample and one class")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-spread, spread, size=(n_classes, n_features))
    y = np.arange(n_samples) % n_classes
    x = centers[y] + std * rng.standard_normal((n_samples, n_features))
    perm = rng.permutation(n_samples)
    return Dataset(x[perm], y[perm].astype(np.int64), n_classes)


def read_idx(path) -> np.ndarray:
    """Read an IDX array (optionally gzipped) into native byte order."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DomainError(f"{path}: truncated IDX header")
    zero, type_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or type_code not in _IDX_DTYPES:
        raise DomainError(f"{path}: not an IDX file (magic {raw[:4].hex()})")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DomainError(f"{path}: truncated IDX dimensions")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = _IDX_DTYPES[type_code]
    count = int(np.prod(dims)) if dims else 1
    if len(raw) - header != count * dtype.itemsize:
        raise DomainError(f"{path}: payload size does not match dims {dims}")
    arr = np.frombuffer(raw, dtype=dtype, offset=header, count=count).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder(">")
    if dtype not in _IDX_CODES:
        raise ContractViolation(f"dtype {array.dtype} has no IDX type code")
    header = struct.pack(">HBB", 0, _IDX_CODES[dtype], array.ndim)
    header += struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(dtype).tobytes())


def load_idx_dataset(images_path, labels_path, n_classes: int = 10) -> Dataset:
    """Images scaled to [0, 1] with a channel axis: (N, 1, H, W)."""
    images = read_idx(images_path)
    labels = read_idx(labels_path).astype(np.int64)
    if images.ndim != 3:
        raise DomainError(f"expected (N, H, W) images, got shape {images.shape}")
    x = images.astype(np.float64)[:, None] / 255.0
    return Dataset(x, labels, n_classes)


def augment_images(x: np.ndarray, rng: np.random.Generator, pad: int = 2) -> np.ndarray:
    """Random horizontal flip plus zero-pad-and-crop for an (N, C, H, W) batch."""
    n, _, h, w = x.shape
    flip = rng.random(n) < 0.5
    out = np.where(flip[:, None, None, None], x[..., ::-1], x)
    padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    return np.stack([padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)])
