"""Desk-scale datasets: IDX files, raw arrays, built-in digits and task variants."""

from __future__ import annotations

import dataclasses
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataFormatError

IDX_LABELS_MAGIC = 0x00000801
IDX_IMAGES_MAGIC = 0x00000803


@dataclass
class Dataset:
    """Images (N, C, H, W) in [0, 1], integer labels and stable sample ids."""

    x: np.ndarray
    y: np.ndarray
    ids: np.ndarray = None
    name: str = ""

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.ids is None:
            self.ids = np.arange(len(self.y), dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if not (len(self.x) == len(self.y) == len(self.ids)):
            raise ValueError(f"x/y/ids lengths differ: {len(self.x)}, {len(self.y)}, {len(self.ids)}")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def num_classes(self) -> int:
        return int(self.y.max()) + 1 if len(self.y) else 0

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.x[idx], self.y[idx], self.ids[idx], self.name)

    def split(self, fraction: float, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        """Seeded split into (rest, held_out) with ``fraction`` held out."""
        order = np.random.default_rng([seed, 0x5711]).permutation(len(self))
        n_out = max(1, int(round(fraction * len(self))))
        return self.subset(np.sort(order[n_out:])), self.subset(np.sort(order[:n_out]))

    def head(self, n: int) -> "Dataset":
        return self.subset(np.arange(min(n, len(self))))


# ---------------------------------------------------------------------------
# IDX


def _read_idx(path, expected_magic: int) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise DataFormatError(f"{path}: truncated IDX header", offset=len(blob))
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    ndim = magic & 0xFF
    need = 4 + 4 * ndim
    if len(blob) < need:
        raise DataFormatError(f"{path}: truncated IDX dimension table", offset=len(blob))
    dims = struct.unpack(f">{ndim}I", blob[4:need])
    count = int(np.prod(dims, dtype=np.int64))
    if len(blob) < need + count:
        raise DataFormatError(
            f"{path}: truncated IDX payload, expected {count} bytes after header, got {len(blob) - need}",
            offset=len(blob),
        )
    return np.frombuffer(blob, dtype=np.uint8, count=count, offset=need).reshape(dims)


def load_idx(images_path, labels_path, name: str = "") -> Dataset:
    """Read an IDX image/label pair; pixels are scaled from [0, 255] to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images[:, None, :, :].astype(np.float32) / np.float32(255.0)
    return Dataset(x, labels.astype(np.int64), name=name or Path(images_path).stem)


def write_idx(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise TypeError("IDX writer only handles uint8 data")
    magic = 0x00000800 | arr.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def write_idx_dataset(directory, prefix: str, ds: Dataset) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    img = directory / f"{prefix}-images.idx3-ubyte"
    lab = directory / f"{prefix}-labels.idx1-ubyte"
    write_idx(img, np.clip(np.rint(ds.x[:, 0] * 255.0), 0, 255).astype(np.uint8))
    write_idx(lab, ds.y.astype(np.uint8))
    return img, lab


# ---------------------------------------------------------------------------
# built-in sources


def digits() -> Dataset:
    """The 8x8 handwritten digits bundled with scikit-learn (1797 images, 10 classes)."""
    from sklearn.datasets import load_digits

    d = load_digits()
    x = (d.images / 16.0).astype(np.float32)[:, None]
    return Dataset(x, d.target, name="digits")


def synthetic(n: int = 1000, num_classes: int = 10, size: int = 8, noise: float = 0.25, seed: int = 0) -> Dataset:
    """Noisy copies of smooth random class prototypes."""
    rng = np.random.default_rng([seed, 0x5E7])
    coarse = rng.uniform(0, 1, size=(num_classes, 1, 4, 4))
    protos = np.repeat(np.repeat(coarse, size // 4 + 1, axis=2), size // 4 + 1, axis=3)[:, :, :size, :size]
    y = np.arange(n) % num_classes
    rng.shuffle(y)
    x = np.clip(protos[y] + noise * rng.normal(size=(n, 1, size, size)), 0, 1)
    return Dataset(x.astype(np.float32), y, name="synthetic")


def make_probe(shape: Sequence[int], n: int, seed: int = 0) -> Dataset:
    """Uniform-noise probe inputs; ids are negative so they never collide with data ids."""
    x = np.random.default_rng([seed, 0x9E0B]).uniform(0, 1, size=(n, *shape)).astype(np.float32)
    return Dataset(x, np.zeros(n, dtype=np.int64), -np.arange(1, n + 1, dtype=np.int64), name="probe")


def fingerprint(x: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(x).tobytes()).hexdigest()


# ---------------------------------------------------------------------------
# transforms and specs


@dataclass(frozen=True)
class Transform:
    kind: str = "none"  # none | rotate | permute | class_subset
    angle: float = 0.0
    seed: int = 0
    classes: tuple[int, ...] = ()

    def apply(self, ds: Dataset) -> Dataset:
        if self.kind == "none":
            return ds
        if self.kind == "rotate":
            return Dataset(rotate_images(ds.x, self.angle), ds.y, ds.ids, ds.name)
        if self.kind == "permute":
            return Dataset(permute_pixels(ds.x, self.seed), ds.y, ds.ids, ds.name)
        if self.kind == "class_subset":
            lookup = {c: i for i, c in enumerate(self.classes)}
            keep = np.isin(ds.y, list(self.classes))
            sub = ds.subset(np.flatnonzero(keep))
            return Dataset(sub.x, np.array([lookup[int(c)] for c in sub.y], dtype=np.int64), sub.ids, ds.name)
        raise ValueError(f"unknown transform {self.kind!r}")


def rotate_images(x: np.ndarray, angle: float) -> np.ndarray:
    quarter = angle / 90.0
    if float(quarter).is_integer():
        return np.ascontiguousarray(np.rot90(x, int(quarter) % 4, axes=(2, 3)))
    from scipy.ndimage import rotate

    return rotate(x, angle, axes=(3, 2), reshape=False, order=1, mode="constant").astype(x.dtype)


def pixel_permutation(n_pixels: int, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 0xBE7]).permutation(n_pixels)


def permute_pixels(x: np.ndarray, seed: int) -> np.ndarray:
    n, c, h, w = x.shape
    perm = pixel_permutation(h * w, seed)
    return np.ascontiguousarray(x.reshape(n, c, h * w)[:, :, perm].reshape(n, c, h, w))


@dataclass(frozen=True)
class DatasetSpec:
    """Where a task's data comes from and how it is split and transformed.

    ``source`` is ``idx`` (paths: train images, train labels, and optionally
    test images, test labels), ``raw`` (one ``.npz`` with ``x`` and ``y``),
    ``digits`` or ``synthetic``.
    """

    name: str
    source: str = "digits"
    paths: tuple[str, ...] = ()
    transform: Transform = field(default_factory=Transform)
    test_fraction: float = 0.25
    split_seed: int = 0
    n_train: int | None = None
    n_test: int | None = None

    def with_transform(self, name: str, transform: Transform) -> "DatasetSpec":
        return dataclasses.replace(self, name=name, transform=transform)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["paths"] = list(self.paths)
        d["transform"]["classes"] = list(self.transform.classes)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        t = dict(d.pop("transform", {}) or {})
        t["classes"] = tuple(t.get("classes", ()))
        d["paths"] = tuple(d.get("paths", ()))
        return cls(transform=Transform(**t), **d)


def _load_source(spec: DatasetSpec) -> tuple[Dataset, Dataset | None]:
    if spec.source == "digits":
        return digits(), None
    if spec.source == "synthetic":
        return synthetic(seed=spec.split_seed), None
    if spec.source == "raw":
        with np.load(spec.paths[0]) as z:
            return Dataset(z["x"], z["y"], name=spec.name), None
    if spec.source == "idx":
        train = load_idx(spec.paths[0], spec.paths[1], spec.name)
        if len(spec.paths) >= 4:
            test = load_idx(spec.paths[2], spec.paths[3], spec.name)
            test.ids = test.ids + len(train)
            return train, test
        return train, None
    raise ValueError(f"unknown dataset source {spec.source!r}")


def load_dataset(spec: DatasetSpec) -> tuple[Dataset, Dataset]:
    """Materialise (train, test) for ``spec``; the two never share a sample id."""
    full, test = _load_source(spec)
    if test is None:
        full, test = full.split(spec.test_fraction, seed=spec.split_seed)
    train = spec.transform.apply(full)
    test = spec.transform.apply(test)
    if spec.n_train is not None:
        train = train.head(spec.n_train)
    if spec.n_test is not None:
        test = test.head(spec.n_test)
    train.name = test.name = spec.name
    return train, test


def synth_tasks(base: DatasetSpec, n_tasks: int, kind: str, seed: int = 0, num_classes: int | None = None) -> list[DatasetSpec]:
    """Deterministic task variants of ``base``: rotations, pixel permutations or class splits."""
    if n_tasks < 1:
        raise ValueError("n_tasks must be >= 1")
    kind = kind.replace("-", "_")
    if kind == "rotate":
        step = 360.0 / (n_tasks + 1)
        return [base.with_transform(f"{base.name}-rot{int(round((k + 1) * step))}", Transform("rotate", angle=(k + 1) * step)) for k in range(n_tasks)]
    if kind == "permute":
        return [
            base.with_transform(f"{base.name}-perm{seed + k}", Transform("permute", seed=seed + k))
            for k in range(n_tasks)
        ]
    if kind == "class_split":
        if num_classes is None:
            num_classes = load_dataset(base)[0].num_classes
        if num_classes < 2 * n_tasks:
            raise ValueError(f"class split into {n_tasks} tasks needs >= {2 * n_tasks} classes, have {num_classes}")
        order = np.random.default_rng([seed, 0xC1A5]).permutation(num_classes)
        groups = np.array_split(order, n_tasks)
        return [
            base.with_transform(f"{base.name}-split{k}", Transform("class_subset", classes=tuple(int(c) for c in sorted(g))))
            for k, g in enumerate(groups)
        ]
    raise ValueError(f"unknown task kind {kind!r}; expected rotate, permute or class-split")
