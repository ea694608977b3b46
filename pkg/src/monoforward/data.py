"""Dataset parsing (IDX, CIFAR-10 binary), splits, and synthetic fixtures.

Pixels are scaled by 1/255 into [0, 1]; no further preprocessing is applied
by default (a per-feature standardization helper is available). Files may be
plain or gzip-compressed; compression is sniffed from the first two bytes.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .container import read_container, write_container
from .matrix import SINGLE, DenseMatrix, _wrap
from .model import stream

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 3073  # 1 label byte + 3*32*32 pixels


class FormatError(ValueError):
    """A dataset file does not match its declared binary format."""


@dataclass
class Dataset:
    X: DenseMatrix          # samples x features, values in [0, 1]
    y: np.ndarray           # int64 class indices
    m: int
    name: str

    @property
    def size(self) -> int:
        return self.X.rows

    @property
    def features(self) -> int:
        return self.X.cols

    def take(self, n: int) -> "Dataset":
        """First n samples (deterministic subset)."""
        n = min(n, self.size)
        return Dataset(_wrap(self.X.data[:n].copy()), self.y[:n].copy(),
                       self.m, self.name)


def _read_file(path) -> bytes:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def load_idx(images_path, labels_path, precision=SINGLE, name="idx") -> Dataset:
    """Parse a big-endian IDX image/label file pair."""
    for p in (images_path, labels_path):
        if not os.path.exists(p):
            raise FormatError(f"no such file: {p}")
    img = _read_file(images_path)
    lab = _read_file(labels_path)
    if len(img) < 16:
        raise FormatError(f"{images_path}: truncated header at offset {len(img)}")
    magic, n, rows, cols = struct.unpack(">IIII", img[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(
            f"{images_path}: bad magic 0x{magic:08x} at offset 0, "
            f"expected 0x{IDX_IMAGE_MAGIC:08x}")
    if len(img) != 16 + n * rows * cols:
        raise FormatError(
            f"{images_path}: payload is {len(img) - 16} bytes, "
            f"expected {n * rows * cols}")
    if len(lab) < 8:
        raise FormatError(f"{labels_path}: truncated header at offset {len(lab)}")
    lmagic, ln = struct.unpack(">II", lab[:8])
    if lmagic != IDX_LABEL_MAGIC:
        raise FormatError(
            f"{labels_path}: bad magic 0x{lmagic:08x} at offset 0, "
            f"expected 0x{IDX_LABEL_MAGIC:08x}")
    if ln != n:
        raise FormatError(f"label count {ln} != image count {n}")
    if len(lab) != 8 + ln:
        raise FormatError(f"{labels_path}: payload is {len(lab) - 8} bytes, "
                          f"expected {ln}")
    pixels = np.frombuffer(img, dtype=np.uint8, offset=16).reshape(n, rows * cols)
    X = _wrap(pixels.astype(np.dtype(precision)) / np.dtype(precision).type(255))
    y = np.frombuffer(lab, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset(X, y, int(y.max()) + 1 if n else 0, name)


def load_cifar10(batch_paths, precision=SINGLE, name="cifar10") -> Dataset:
    """Parse CIFAR-10 binary batches (3073-byte records, channel-major)."""
    if isinstance(batch_paths, (str, os.PathLike)):
        batch_paths = [batch_paths]
    xs, ys = [], []
    for p in batch_paths:
        if not os.path.exists(p):
            raise FormatError(f"no such file: {p}")
        raw = _read_file(p)
        if len(raw) % CIFAR_RECORD:
            raise FormatError(
                f"{p}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels = rec[:, 0].astype(np.int64)
        if labels.size and labels.max() > 9:
            raise FormatError(f"{p}: label {labels.max()} out of range")
        ys.append(labels)
        xs.append(rec[:, 1:])
    pixels = np.concatenate(xs, axis=0)
    X = _wrap(pixels.astype(np.dtype(precision)) / np.dtype(precision).type(255))
    return Dataset(X, np.concatenate(ys), 10, name)


def synth_blobs(m: int, features: int, per_class: int, separation: float,
                seed: int, precision=SINGLE) -> Dataset:
    """Gaussian clusters with unit variance at well-separated centers."""
    if m < 2:
        raise ValueError("need at least 2 classes")
    rng = stream(seed, 7001)
    centers = rng.standard_normal((m, features))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)
    y = np.repeat(np.arange(m, dtype=np.int64), per_class)
    X = centers[y] + rng.standard_normal((m * per_class, features))
    perm = rng.permutation(len(y))
    return Dataset(_wrap(X[perm].astype(np.dtype(precision))), y[perm], m,
                   "blobs")


def split(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint (train, test) split; train gets round(fraction * size)."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    n = ds.size
    n_train = int(round(fraction * n))
    if n_train == 0 or n_train == n:
        raise ValueError(f"degenerate split: {n_train}/{n - n_train}")
    perm = stream(seed, 7002).permutation(n)
    tr, te = perm[:n_train], perm[n_train:]
    mk = lambda idx: Dataset(_wrap(np.ascontiguousarray(ds.X.data[idx])),
                             ds.y[idx].copy(), ds.m, ds.name)
    return mk(tr), mk(te)


def standardize(ds: Dataset, eps: float = 1e-8) -> Dataset:
    """Per-feature mean/std normalization (opt-in; default pipeline is 1/255)."""
    mu = ds.X.data.mean(axis=0, keepdims=True)
    sd = ds.X.data.std(axis=0, keepdims=True) + ds.X.data.dtype.type(eps)
    return Dataset(_wrap((ds.X.data - mu) / sd), ds.y.copy(), ds.m, ds.name)


def save_dataset(path, ds: Dataset):
    write_container(path, {"X": ds.X.data, "y": ds.y},
                    {"m": ds.m, "name": ds.name})


def load_dataset(path) -> Dataset:
    tensors, meta = read_container(path)
    return Dataset(DenseMatrix(tensors["X"]), tensors["y"].astype(np.int64),
                   meta["m"], meta.get("name", "dataset"))


# ---------------------------------------------------------------------------
# well-known file layouts under DATA_DIR

_MNIST_FILES = {
    "mnist": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
              "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    "fashion": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

CIFAR_TRAIN_BATCHES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_BATCH = "test_batch.bin"


def _find(directory, fname):
    for cand in (os.path.join(directory, fname),
                 os.path.join(directory, fname + ".gz")):
        if os.path.exists(cand):
            return cand
    return None


def data_dir(override=None) -> str:
    return override or os.environ.get("DATA_DIR", "data")


def load_named(name: str, directory=None, precision=SINGLE,
               train: bool = True) -> Dataset:
    """Load "mnist", "fashion" or "cifar10" from DATA_DIR conventions."""
    d = data_dir(directory)
    if name in _MNIST_FILES:
        sub = os.path.join(d, name)
        base = sub if os.path.isdir(sub) else d
        ti, tl, vi, vl = _MNIST_FILES[name]
        img, lab = (ti, tl) if train else (vi, vl)
        ipath, lpath = _find(base, img), _find(base, lab)
        if not ipath or not lpath:
            raise FormatError(f"{name} files not found under {base}")
        return load_idx(ipath, lpath, precision, name=name)
    if name == "cifar10":
        sub = os.path.join(d, "cifar10")
        base = sub if os.path.isdir(sub) else d
        names = CIFAR_TRAIN_BATCHES if train else [CIFAR_TEST_BATCH]
        paths = [_find(base, n) for n in names]
        if not all(paths):
            raise FormatError(f"cifar10 batches not found under {base}")
        return load_cifar10(paths, precision)
    raise FormatError(f"unknown dataset {name!r}")
