"""MNIST IDX parsing, normalization and deterministic batching.

Shuffling uses xoshiro256** seeded through splitmix64, implemented here in
pure Python so the batch order does not depend on numpy's generator or the
platform.  The permutation for an epoch is a Fisher-Yates shuffle driven by
a generator seeded from ``(seed, epoch)``.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

# normalized pixel = (raw / 255 - MEAN) / STD
MEAN = 0.5
STD = 0.5
PIXEL_RANGE = ((0.0 - MEAN) / STD, (1.0 - MEAN) / STD)

_MASK64 = (1 << 64) - 1


class IdxFormatError(ValueError):
    """Malformed IDX data; ``offset`` is the byte position of the problem."""

    def __init__(self, path, offset, message):
        super().__init__(f"{path}: {message} (at byte offset {offset})")
        self.path = str(path)
        self.offset = offset


class DataMissingError(FileNotFoundError):
    pass


def _read_bytes(path: Path) -> bytes:
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def load_idx(path) -> np.ndarray:
    """Parse an IDX image (magic 2051) or label (magic 2049) file, raw or
    gzip-compressed, into a uint8 array."""
    path = Path(path)
    if not path.exists():
        raise DataMissingError(f"IDX file not found: {path}")
    data = _read_bytes(path)
    if len(data) < 8:
        raise IdxFormatError(path, len(data), "truncated header")
    magic = struct.unpack(">I", data[:4])[0]
    if magic == IMAGE_MAGIC:
        ndim = 3
    elif magic == LABEL_MAGIC:
        ndim = 1
    else:
        raise IdxFormatError(path, 0, f"bad magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxFormatError(path, len(data), "truncated header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    size = int(np.prod(dims))
    if len(data) < header + size:
        raise IdxFormatError(path, len(data), f"truncated payload: expected {size} bytes "
                                              f"after header, found {len(data) - header}")
    if len(data) > header + size:
        raise IdxFormatError(path, header + size, "trailing bytes after payload")
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=header).reshape(dims).copy()


def normalize(raw) -> np.ndarray:
    """uint8 pixels to float32 in ``[-1, 1]``."""
    return ((np.asarray(raw, dtype=np.float64) / 255.0 - MEAN) / STD).astype(np.float32)


def denormalize(x) -> np.ndarray:
    """Inverse of ``normalize`` back to uint8."""
    raw = np.rint((np.asarray(x, dtype=np.float64) * STD + MEAN) * 255.0)
    return np.clip(raw, 0, 255).astype(np.uint8)


@dataclass
class DataSet:
    images: np.ndarray  # (N, 1, 28, 28) float32, normalized
    labels: np.ndarray  # (N,) int64

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")

    def __len__(self):
        return int(self.labels.shape[0])

    @classmethod
    def from_raw(cls, raw_images, raw_labels) -> "DataSet":
        raw_images = np.asarray(raw_images)
        images = normalize(raw_images).reshape(raw_images.shape[0], 1, *raw_images.shape[1:])
        return cls(images, np.asarray(raw_labels, dtype=np.int64))

    def subset(self, n: int) -> "DataSet":
        """First ``n`` examples (all of them if ``n`` is larger)."""
        return DataSet(self.images[:n], self.labels[:n])


def _find(data_dir: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        p = data_dir / name
        if p.exists():
            return p
    raise DataMissingError(f"MNIST file {stem}[.gz] not found in {data_dir}")


def load_split(data_dir, split: str) -> DataSet:
    if split not in FILES:
        raise ValueError(f"split must be one of {sorted(FILES)}, got {split!r}")
    data_dir = Path(data_dir)
    img_name, lbl_name = FILES[split]
    img_path, lbl_path = _find(data_dir, img_name), _find(data_dir, lbl_name)
    images = load_idx(img_path)
    labels = load_idx(lbl_path)
    if images.ndim != 3:
        raise IdxFormatError(img_path, 0, "expected an image file (magic 2051)")
    if labels.ndim != 1:
        raise IdxFormatError(lbl_path, 0, "expected a label file (magic 2049)")
    if labels.size and labels.max() > 9:
        bad = int(np.flatnonzero(labels > 9)[0])
        raise IdxFormatError(lbl_path, 8 + bad, f"label {int(labels[bad])} outside 0..9")
    return DataSet.from_raw(images, labels)


def resolve_data_dir(flag=None) -> Path:
    """``--data-dir`` if given, else ``$CGMQ_DATA_DIR``, else ``./data/mnist``."""
    if flag:
        return Path(flag)
    env = os.environ.get("CGMQ_DATA_DIR")
    return Path(env) if env else Path("data") / "mnist"


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Xoshiro256:
    """xoshiro256** 1.0 with splitmix64 seeding."""

    def __init__(self, seed: int):
        sm = seed & _MASK64
        self.s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            self.s.append(out)

    def next(self) -> int:
        s = self.s
        result = (_rotl((s[1] * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s[1] << 17) & _MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def below(self, n: int) -> int:
        """Uniform integer in ``[0, n)`` by rejection (no modulo bias)."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            r = self.next()
            if r < limit:
                return r % n


def epoch_seed(seed: int, epoch: int) -> int:
    """Mix ``(seed, epoch)`` into one 64-bit generator seed."""
    _, a = splitmix64(seed & _MASK64)
    _, b = splitmix64((a ^ (epoch & _MASK64)) & _MASK64)
    return b


def permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    rng = Xoshiro256(epoch_seed(seed, epoch))
    perm = list(range(n))
    for i in range(n - 1, 0, -1):
        j = rng.below(i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return np.asarray(perm, dtype=np.int64)


def batches(dataset: DataSet, batch_size: int, seed: int, epoch: int, shuffle: bool = True):
    """Yield ``(images, labels)`` mini-batches; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    n = len(dataset)
    order = permutation(n, seed, epoch) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]
