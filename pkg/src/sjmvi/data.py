"""Dataset ingestion, synthetic generators and the train/test split."""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .distributions import SampleBank, Stream, stream
from .errors import EmptyBankError, IdxFormatError

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _idx_header(raw: bytes, magic: int, n_dims: int, path) -> tuple[int, ...]:
    size = 4 + 4 * n_dims
    if len(raw) < size:
        raise IdxFormatError(f"{path}: truncated header")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise IdxFormatError(f"{path}: magic {found}, expected {magic}")
    return struct.unpack(f">{n_dims}I", raw[4:size])


def read_idx_images(path) -> np.ndarray:
    """uint8 image array of shape (n, rows * cols), row-major."""
    raw = _read_bytes(path)
    n, rows, cols = _idx_header(raw, IDX_IMAGES_MAGIC, 3, path)
    need = n * rows * cols
    body = raw[16:]
    if len(body) < need:
        raise IdxFormatError(f"{path}: payload has {len(body)} bytes, header promises {need}")
    return np.frombuffer(body[:need], dtype=np.uint8).reshape(n, rows * cols)


def read_idx_labels(path) -> np.ndarray:
    raw = _read_bytes(path)
    (n,) = _idx_header(raw, IDX_LABELS_MAGIC, 1, path)
    body = raw[8:]
    if len(body) < n:
        raise IdxFormatError(f"{path}: payload has {len(body)} bytes, header promises {n}")
    return np.frombuffer(body[:n], dtype=np.uint8).astype(np.int64)


def load_idx(images_path, labels_path=None, seed: int = 0) -> SampleBank:
    """Images scaled to [0, 1]; labels, if given, ride along for plotting only."""
    images = read_idx_images(images_path)
    if images.shape[0] == 0:
        raise EmptyBankError(f"{images_path}: no images")
    labels = None
    if labels_path is not None:
        labels = read_idx_labels(labels_path)
        if labels.shape[0] != images.shape[0]:
            raise IdxFormatError(
                f"{labels_path}: {labels.shape[0]} labels for {images.shape[0]} images"
            )
    return SampleBank(images.astype(np.float64) / 255.0, seed, labels)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())


def load_csv(path, label_column: int | None = None, seed: int = 0) -> SampleBank:
    """Numeric CSV, optional header line; one column may hold labels."""
    bank = SampleBank.from_csv(path, seed)
    if label_column is None:
        return bank
    arr = bank.samples
    labels = arr[:, label_column].astype(np.int64)
    return SampleBank(np.delete(arr, label_column, axis=1), seed, labels)


def load_digits_bank(seed: int = 0) -> SampleBank:
    """The 8x8 handwritten digits bundled with scikit-learn, scaled to [0, 1]."""
    from sklearn.datasets import load_digits

    d = load_digits()
    return SampleBank(d.data / 16.0, seed, d.target.astype(np.int64))


def linear_gaussian(
    n: int,
    data_dim: int = 5,
    latent_dim: int = 2,
    noise: float = 0.1,
    seed: int = 0,
    counter: int = 0,
) -> tuple[SampleBank, np.ndarray]:
    """x = z W + b + noise * e with z, e standard normal.

    Returns the bank and the loading matrix W (latent_dim x data_dim).  The
    loadings are drawn once per seed, independent of ``counter``, so fresh
    draws from the same generator share them.
    """
    w_rng = stream(seed, Stream.BANK, 10_000)
    w = w_rng.standard_normal((latent_dim, data_dim)) * 2.0
    b = w_rng.standard_normal(data_dim)
    rng = stream(seed, Stream.BANK, counter)
    z = rng.standard_normal((n, latent_dim))
    x = z @ w + b + noise * rng.standard_normal((n, data_dim))
    return SampleBank(x, seed), w


def standard_normal_bank(n: int, dim: int, seed: int = 0, counter: int = 0) -> SampleBank:
    return SampleBank(stream(seed, Stream.BANK, counter).standard_normal((n, dim)), seed)


def train_test_split(
    bank: SampleBank, seed: int, test_every: int = 7, max_train=None, max_test=None
) -> tuple[SampleBank, SampleBank]:
    """Seeded disjoint split with one test row per ``test_every`` rows."""
    order = stream(seed, Stream.SPLIT).permutation(bank.count)
    n_test = bank.count // test_every
    test_idx, train_idx = order[:n_test], order[n_test:]
    if max_train is not None:
        train_idx = train_idx[:max_train]
    if max_test is not None:
        test_idx = test_idx[:max_test]
    if train_idx.size == 0 or test_idx.size == 0:
        raise EmptyBankError(f"split of {bank.count} rows leaves an empty side")
    return bank.subset(np.sort(train_idx)), bank.subset(np.sort(test_idx))
