"""Dataset loading (MNIST IDX) and a seeded synthetic teacher dataset."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .network import DenseLayer, GeneratorNet

__all__ = [
    "Dataset",
    "LatentSet",
    "IdxFormatError",
    "load_mnist_idx",
    "write_idx",
    "find_mnist_files",
    "synthetic_dataset",
    "teacher_net",
    "export_mnist_subset",
    "save_latents",
    "load_latents",
]

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray
    name: str = ""
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.x.ndim != 2 or self.x.shape[0] < 1:
            raise ValueError("dataset needs at least one sample")
        if self.x.min() < 0.0 or self.x.max() > 1.0:
            raise ValueError("dataset values must lie in [0, 1]")

    @property
    def n(self) -> int:
        return self.x.shape[1]

    @property
    def count(self) -> int:
        return self.x.shape[0]


@dataclass
class LatentSet:
    z: np.ndarray

    @property
    def count(self) -> int:
        return self.z.shape[0]

    @property
    def k(self) -> int:
        return self.z.shape[1]


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path, magic: int, limit):
    path = Path(path)
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise IdxFormatError(f"{path}: truncated header at offset {len(raw)}")
    got, count = struct.unpack(">II", raw[:8])
    if got != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{got:08x} at offset 0, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header at offset {len(raw)}")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    item = int(np.prod(dims[1:], dtype=np.int64)) if ndim > 1 else 1
    take = count if limit is None else min(count, int(limit))
    need = header + take * item
    if len(raw) < need:
        raise IdxFormatError(
            f"{path}: truncated data, expected {need} bytes but file ends at offset {len(raw)}"
        )
    data = np.frombuffer(raw, dtype=np.uint8, count=take * item, offset=header)
    return count, dims, data.reshape(take, item) if ndim > 1 else data.copy()


def load_mnist_idx(images_path, labels_path=None, limit=None) -> Dataset:
    """Read IDX images (optionally labels), scale to [0, 1] and flatten.

    Files ending in ``.gz`` are decompressed on the fly.
    """
    count, dims, pixels = _read_idx(images_path, IMAGES_MAGIC, limit)
    labels = None
    if labels_path is not None:
        lcount, _, labels = _read_idx(labels_path, LABELS_MAGIC, limit)
        if lcount != count:
            raise IdxFormatError(
                f"{labels_path}: {lcount} labels at offset 4 but {images_path} holds {count} images"
            )
    return Dataset(pixels.astype(float) / 255.0, name=Path(images_path).name, labels=labels)


def write_idx(path, array) -> None:
    """Write a uint8 array as IDX (images if 3-D, labels if 1-D)."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError("IDX writer expects uint8 data")
    magic = IMAGES_MAGIC if array.ndim == 3 else LABELS_MAGIC
    if array.ndim not in (1, 3):
        raise ValueError("expected a 1-D label array or 3-D image stack")
    header = struct.pack(">I" + "I" * array.ndim, magic, *array.shape)
    data = header + array.tobytes(order="C")
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.GzipFile(path, "wb", mtime=0) as fh:
            fh.write(data)
    else:
        path.write_bytes(data)


def find_mnist_files(directory, split: str):
    """Locate the images/labels pair of a split, accepting ``.gz`` variants."""
    directory = Path(directory)
    found = []
    for stem in MNIST_FILES[split]:
        for candidate in (directory / stem, directory / (stem + ".gz")):
            if candidate.exists():
                found.append(candidate)
                break
        else:
            raise FileNotFoundError(f"missing MNIST file {directory / stem}")
    return tuple(found)


def export_mnist_subset(out_dir, n_train: int = 2000, n_test: int = 500, seed: int = 0):
    """Write a disjoint train/test MNIST subset as IDX files.

    Uses the 5,000-digit MNIST sample shipped with ``mlxtend`` (an optional
    dependency) so the pipeline can run without network access. The sample is
    sorted by class, hence the seeded shuffle before splitting.
    """
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    if n_train + n_test > x.shape[0]:
        raise ValueError(f"subset holds only {x.shape[0]} digits")
    order = np.random.default_rng(seed).permutation(x.shape[0])
    images = x.astype(np.uint8).reshape(-1, 28, 28)[order]
    labels = y.astype(np.uint8)[order]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    parts = {"train": slice(0, n_train), "test": slice(n_train, n_train + n_test)}
    for split, sl in parts.items():
        img_name, lab_name = MNIST_FILES[split]
        write_idx(out / img_name, images[sl])
        write_idx(out / lab_name, labels[sl])
    return out


def teacher_net(k: int, n: int, hidden: int, seed: int) -> GeneratorNet:
    """Fixed random net ``z -> sigmoid(A tanh(B z))`` with zero biases."""
    rng = np.random.default_rng(seed)
    b_mat = rng.standard_normal((hidden, k)) / np.sqrt(k)
    a_mat = 2.0 * rng.standard_normal((n, hidden)) / np.sqrt(hidden)
    return GeneratorNet(
        [DenseLayer(b_mat, np.zeros(hidden), "tanh"), DenseLayer(a_mat, np.zeros(n), "sigmoid")],
        seed=seed,
    )


def synthetic_dataset(k: int, n: int, count: int, seed: int, hidden=None):
    """Exact pairs ``x = teacher(z)`` with ``z ~ N(0, I)``.

    Returns:
        ``(Dataset, LatentSet, teacher)``.
    """
    if not k < n:
        raise ValueError("latent size must be below the ambient size")
    if count < 1:
        raise ValueError("count must be positive")
    hidden = hidden or max(2 * k, 8)
    teacher = teacher_net(k, n, hidden, seed)
    z = np.random.default_rng([seed, 1]).standard_normal((count, k))
    return Dataset(teacher(z), name=f"synthetic-{seed}"), LatentSet(z), teacher


def save_latents(latents: LatentSet, path) -> None:
    lines = [",".join(repr(float(v)) for v in row) for row in latents.z]
    Path(path).write_text("\n".join(lines) + "\n")


def load_latents(path) -> LatentSet:
    rows = [
        [float(t) for t in line.split(",")]
        for line in Path(path).read_text().splitlines()
        if line.strip()
    ]
    return LatentSet(np.array(rows))
