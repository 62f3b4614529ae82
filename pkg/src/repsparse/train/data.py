"""Dataset readers: MNIST IDX files, CIFAR-10 binary batches, and the 8x8
digits set bundled with scikit-learn (always available offline).

Every loader returns ``(x_train, y_train, x_test, y_test)`` with images as
float32 NCHW in roughly zero-mean unit-variance scale and int64 labels.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np


class DatasetMissing(FileNotFoundError):
    pass


def _open(path: Path):
    if path.exists():
        return open(path, "rb")
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gzip.open(gz, "rb")
    raise DatasetMissing(f"missing dataset file {path}")


def read_idx(path) -> np.ndarray:
    """Read an IDX array (unsigned byte payload only, as MNIST uses)."""
    with _open(Path(path)) as fh:
        raw = fh.read()
    zero, dtype, ndim = struct.unpack_from(">HBB", raw)
    if zero != 0 or dtype != 0x08:
        raise ValueError(f"{path}: not an unsigned-byte IDX file")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    data = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    if data.size != int(np.prod(dims)):
        raise ValueError(f"{path}: payload does not match dims {dims}")
    return data.reshape(dims)


def load_mnist(data_dir):
    d = Path(data_dir)
    xtr = read_idx(d / "train-images-idx3-ubyte")
    ytr = read_idx(d / "train-labels-idx1-ubyte")
    xte = read_idx(d / "t10k-images-idx3-ubyte")
    yte = read_idx(d / "t10k-labels-idx1-ubyte")

    def prep(x):
        return ((x.astype(np.float32) / 255.0 - 0.1307) / 0.3081)[:, None]

    return prep(xtr), ytr.astype(np.int64), prep(xte), yte.astype(np.int64)


_CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465], dtype=np.float32)[:, None, None]
_CIFAR_STD = np.array([0.2470, 0.2435, 0.2616], dtype=np.float32)[:, None, None]


def read_cifar10_batch(path):
    """One binary batch: records of 1 label byte + 3072 pixel bytes (CHW)."""
    p = Path(path)
    if not p.exists():
        raise DatasetMissing(f"missing dataset file {p}")
    raw = np.fromfile(p, dtype=np.uint8)
    if raw.size % 3073:
        raise ValueError(f"{p}: size is not a whole number of records")
    rec = raw.reshape(-1, 3073)
    return rec[:, 1:].reshape(-1, 3, 32, 32), rec[:, 0].astype(np.int64)


def load_cifar10(data_dir):
    d = Path(data_dir)
    if (d / "cifar-10-batches-bin").is_dir():
        d = d / "cifar-10-batches-bin"
    parts = [read_cifar10_batch(d / f"data_batch_{i}.bin") for i in range(1, 6)]
    xtr = np.concatenate([p[0] for p in parts])
    ytr = np.concatenate([p[1] for p in parts])
    xte, yte = read_cifar10_batch(d / "test_batch.bin")

    def prep(x):
        return (x.astype(np.float32) / 255.0 - _CIFAR_MEAN) / _CIFAR_STD

    return prep(xtr), ytr, prep(xte), yte


def load_digits_split(seed=0, test_fraction=0.25):
    from sklearn.datasets import load_digits
    from sklearn.model_selection import train_test_split

    ds = load_digits()
    x = (ds.images.astype(np.float32) / 16.0 - 0.5) / 0.5
    xtr, xte, ytr, yte = train_test_split(
        x[:, None], ds.target.astype(np.int64), test_size=test_fraction,
        random_state=seed, stratify=ds.target,
    )
    return xtr, ytr, xte, yte


def load_dataset(name, data_dir=None, seed=0):
    if name == "digits":
        return load_digits_split(seed)
    if data_dir is None:
        raise DatasetMissing(f"dataset {name!r} needs data_dir")
    if name == "mnist":
        return load_mnist(data_dir)
    if name == "cifar10":
        return load_cifar10(data_dir)
    raise ValueError(f"unknown dataset {name!r}")


def random_crop_flip(x: np.ndarray, rng: np.random.Generator, pad=4) -> np.ndarray:
    """Standard CIFAR augmentation: pad-and-crop plus horizontal flip."""
    n, _, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(x)
    for i in range(n):
        crop = xp[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out
