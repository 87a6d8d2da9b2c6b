"""Datasets: MNIST (IDX), CIFAR-10 (binary batches), synthetic problems, normalisation."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}


class DataError(Exception):
    """Base class for dataset problems (missing files, malformed content)."""


class BadMagic(DataError):
    pass


class Truncated(DataError):
    pass


class CountMismatch(DataError):
    pass


class BadRecord(DataError):
    pass


@dataclass(frozen=True)
class Normalisation:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def _arrays(self, ndim: int):
        shape = (1, -1) + (1,) * (ndim - 2)
        return np.reshape(self.mean, shape), np.reshape(self.std, shape)

    def apply(self, x: np.ndarray) -> np.ndarray:
        mean, std = self._arrays(x.ndim)
        return (x - mean) / std

    def invert(self, x: np.ndarray) -> np.ndarray:
        mean, std = self._arrays(x.ndim)
        return x * std + mean


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray | None = None
    targets: np.ndarray | None = None
    num_classes: int | None = None
    split: str = "train"
    normalisation: Normalisation | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.inputs)
        if self.labels is not None:
            if len(self.labels) != n:
                raise ValueError(f"{n} inputs but {len(self.labels)} labels")
            if self.num_classes is not None and n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.targets is not None and len(self.targets) != n:
            raise ValueError(f"{n} inputs but {len(self.targets)} targets")

    def __len__(self) -> int:
        return len(self.inputs)

    def one_hot(self, dtype=np.float64) -> np.ndarray:
        if self.labels is None or self.num_classes is None:
            raise ValueError("dataset has no class labels")
        out = np.zeros((len(self.labels), self.num_classes), dtype=dtype)
        out[np.arange(len(self.labels)), self.labels] = 1
        return out

    def take(self, index) -> "Dataset":
        index = np.asarray(index)
        return replace(
            self,
            inputs=self.inputs[index],
            labels=None if self.labels is None else self.labels[index],
            targets=None if self.targets is None else self.targets[index],
        )

    def astype(self, dtype) -> "Dataset":
        return replace(self, inputs=self.inputs.astype(dtype, copy=False))


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _resolve(directory: Path, name: str) -> Path:
    for candidate in (directory / name, directory / f"{name}.gz"):
        if candidate.exists():
            return candidate
    raise DataError(f"missing file {directory / name}[.gz]")


def read_idx(path: str | Path, expected_magic: int | None = None) -> np.ndarray:
    """Parse an unsigned-byte IDX file into a uint8 array of the header's shape."""
    path = Path(path)
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise Truncated(f"{path}: file ends at byte {len(raw)} inside the 4-byte magic")
    (magic,) = struct.unpack(">I", raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise BadMagic(f"{path}: magic 0x{magic:08x} at byte 0, expected 0x{expected_magic:08x}")
    if magic >> 8 != 0x08:
        raise BadMagic(f"{path}: magic 0x{magic:08x} at byte 0 is not an unsigned-byte IDX file")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise Truncated(f"{path}: file ends at byte {len(raw)} inside the {header}-byte header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) < expected:
        raise Truncated(f"{path}: file ends at byte {len(raw)}, payload needs {expected} bytes for dims {dims}")
    if len(raw) > expected:
        raise BadRecord(f"{path}: {len(raw) - expected} trailing bytes after offset {expected}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path: str | Path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    path = Path(path)
    header = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    if path.suffix == ".gz":
        with open(path, "wb") as raw, gzip.GzipFile(filename="", fileobj=raw, mode="wb", mtime=0) as fh:
            fh.write(header + array.tobytes())
    else:
        path.write_bytes(header + array.tobytes())


def _read_mnist_split(directory: Path, split: str) -> tuple[np.ndarray, np.ndarray]:
    img_name, lbl_name = MNIST_FILES[split]
    img_path, lbl_path = _resolve(directory, img_name), _resolve(directory, lbl_name)
    images = read_idx(img_path, IDX_IMAGES_MAGIC)
    labels = read_idx(lbl_path, IDX_LABELS_MAGIC)
    if images.ndim != 3:
        raise BadRecord(f"{img_path}: expected 3 dimensions, header declares {images.ndim}")
    if len(images) != len(labels):
        raise CountMismatch(f"{img_path} holds {len(images)} images but {lbl_path} holds {len(labels)} labels")
    if len(labels) and labels.max() > 9:
        raise BadRecord(f"{lbl_path}: label {labels.max()} at byte {8 + int(labels.argmax())} exceeds 9")
    return images, labels


def load_mnist(directory: str | Path, normalise: bool = True) -> tuple[Dataset, Dataset]:
    """Read the four IDX files (optionally gzipped); pixels scaled to [0, 1] then standardised."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"MNIST directory {directory} does not exist")
    splits = {}
    for split in ("train", "test"):
        images, labels = _read_mnist_split(directory, split)
        splits[split] = (images[:, None].astype(np.float64) / 255.0, labels.astype(np.int64))
    return _finish(splits, normalise, source=str(directory))


# ---------------------------------------------------------------------------
# CIFAR-10
# ---------------------------------------------------------------------------


def read_cifar_batch(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) % CIFAR_RECORD:
        raise Truncated(
            f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}; "
            f"last record starts at byte {len(raw) - len(raw) % CIFAR_RECORD}"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0]
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise BadRecord(f"{path}: label {labels[bad[0]]} > 9 at byte {bad[0] * CIFAR_RECORD}")
    return records[:, 1:].reshape(-1, 3, 32, 32), labels


def write_cifar_batch(path: str | Path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), -1)
    records = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    Path(path).write_bytes(records.tobytes())


def load_cifar10(directory: str | Path, normalise: bool = True) -> tuple[Dataset, Dataset]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"CIFAR-10 directory {directory} does not exist")
    splits = {}
    for split, names in CIFAR_FILES.items():
        parts = [read_cifar_batch(_resolve(directory, name)) for name in names]
        images = np.concatenate([p[0] for p in parts])
        labels = np.concatenate([p[1] for p in parts])
        splits[split] = (images.astype(np.float64) / 255.0, labels.astype(np.int64))
    return _finish(splits, normalise, source=str(directory))


def _finish(splits, normalise: bool, source: str) -> tuple[Dataset, Dataset]:
    (xtr, ytr), (xte, yte) = splits["train"], splits["test"]
    norm = fit_normalisation(xtr) if normalise else None
    if norm is not None:
        xtr, xte = norm.apply(xtr), norm.apply(xte)
    meta = {"source": source}
    return (
        Dataset(xtr, ytr, num_classes=10, split="train", normalisation=norm, meta=meta),
        Dataset(xte, yte, num_classes=10, split="test", normalisation=norm, meta=meta),
    )


def fit_normalisation(x: np.ndarray) -> Normalisation:
    """Per-channel mean/std over all other axes of an (n, C, H, W) array."""
    axes = (0,) + tuple(range(2, x.ndim))
    std = x.std(axis=axes)
    return Normalisation(tuple(float(m) for m in x.mean(axis=axes)), tuple(float(s) if s > 0 else 1.0 for s in std))


def stratified_subset(ds: Dataset, size: int, seed: int = 0) -> Dataset:
    """Deterministic class-balanced subset; per-class quotas follow the class proportions."""
    if size > len(ds):
        raise ValueError(f"subset of {size} requested from {len(ds)} examples")
    if ds.labels is None:
        idx = np.random.default_rng(seed).permutation(len(ds))[:size]
        return ds.take(np.sort(idx))
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(ds.labels, return_counts=True)
    quota = np.floor(counts * size / len(ds)).astype(int)
    # largest remainders get the leftover slots, ties to the lowest class
    remainder = counts * size / len(ds) - quota
    for i in np.argsort(-remainder, kind="stable")[: size - quota.sum()]:
        quota[i] += 1
    chosen = []
    for cls, q in zip(classes, quota):
        members = np.flatnonzero(ds.labels == cls)
        chosen.append(members[rng.permutation(len(members))[:q]])
    idx = np.concatenate(chosen)
    return ds.take(idx[rng.permutation(len(idx))])


# ---------------------------------------------------------------------------
# synthetic problems
# ---------------------------------------------------------------------------

SYNTHETIC_KINDS = ("two-gaussians", "linear-teacher", "random-labels", "ill-conditioned")


def synthetic(kind: str, n: int, dim: int, seed: int = 0, **options) -> Dataset:
    """Small generated problems for verification runs.

    ``two-gaussians``: labels 0/1, clusters at +-separation/2 along the first axis (unit variance).
    ``linear-teacher``: regression targets ``y = x @ w_star`` (``meta["w_star"]``).
    ``random-labels``: standard normal inputs with uniform labels in ``num_classes``.
    ``ill-conditioned``: regression whose input matrix has singular values log-spaced
    over ``condition`` (default 1e4); targets come from a random linear teacher.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    rng = np.random.default_rng(seed)
    if kind == "two-gaussians":
        separation = float(options.get("separation", 10.0))
        labels = rng.integers(0, 2, n)
        x = rng.standard_normal((n, dim))
        x[:, 0] += (labels - 0.5) * separation
        return Dataset(x, labels, num_classes=2, meta={"kind": kind, "separation": separation})
    if kind == "linear-teacher":
        w_star = rng.standard_normal(dim)
        x = rng.standard_normal((n, dim))
        return Dataset(x, targets=(x @ w_star)[:, None], meta={"kind": kind, "w_star": w_star})
    if kind == "random-labels":
        c = int(options.get("num_classes", 10))
        return Dataset(rng.standard_normal((n, dim)), rng.integers(0, c, n), num_classes=c, meta={"kind": kind})
    if kind == "ill-conditioned":
        condition = float(options.get("condition", 1e4))
        k = min(n, dim)
        u, _ = np.linalg.qr(rng.standard_normal((n, k)))
        v, _ = np.linalg.qr(rng.standard_normal((dim, k)))
        s = np.logspace(0, -np.log10(condition), k)
        x = (u * s) @ v.T * np.sqrt(n)
        w_star = rng.standard_normal(dim)
        sv = np.linalg.svd(x, compute_uv=False)
        meta = {"kind": kind, "w_star": w_star, "condition": float(sv[0] / sv[k - 1])}
        return Dataset(x, targets=(x @ w_star)[:, None], meta=meta)
    raise ValueError(f"unknown synthetic kind {kind!r}; expected one of {SYNTHETIC_KINDS}")


def data_root(default: str | Path = "data") -> Path:
    return Path(os.environ.get("ITERLIN_DATA_ROOT", default))
