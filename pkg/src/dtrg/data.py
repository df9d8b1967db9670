"""Datasets: synthetic fine-grained classes, IDX/CSV loaders, sparse and step-imbalanced subsets."""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class FormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if self.split not in ("train", "test"):
            raise ValueError(f"unknown split {self.split!r}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, index, **provenance) -> "Dataset":
        index = np.asarray(index, dtype=np.intp)
        return replace(self, inputs=self.inputs[index], labels=self.labels[index],
                       provenance={**self.provenance, **provenance})

    def with_channel(self) -> "Dataset":
        """(N, H, W) images to (N, H, W, 1); other layouts are returned unchanged."""
        if self.inputs.ndim == 3:
            return replace(self, inputs=self.inputs[..., None])
        return self


def gen_synthetic(num_classes: int = 20, superclasses: int = 4, d_in: int = 32,
                  n_per_class: int = 38, within_spread: float = 0.7,
                  between_spread: float = 1.0, seed: int = 0,
                  test_fraction: float = 0.2) -> tuple[Dataset, Dataset]:
    """Gaussian classes nested in Gaussian superclasses.

    Superclass means ~ N(0, between^2 I), subclass means add N(0, (between/4)^2 I),
    samples add N(0, within^2 I). Each class is split train/test by
    ``test_fraction`` (the default 38 per class gives 30 train / 8 test).
    With the default spreads a nearest-true-mean classifier scores about 75%,
    so sibling classes overlap and there is headroom above a plain CE model.
    """
    if num_classes <= 0 or superclasses <= 0 or num_classes % superclasses:
        raise ValueError("num_classes must be a positive multiple of superclasses")
    if within_spread <= 0 or between_spread <= 0:
        raise ValueError("spreads must be positive")
    if d_in <= 0 or n_per_class < 2 or not 0 < test_fraction < 1:
        raise ValueError("need d_in > 0, n_per_class >= 2 and test_fraction in (0, 1)")
    rng = np.random.default_rng(seed)
    per_super = num_classes // superclasses
    super_means = rng.normal(0.0, between_spread, (superclasses, d_in))
    class_super = np.repeat(np.arange(superclasses), per_super)
    class_means = super_means[class_super] + rng.normal(0.0, between_spread / 4, (num_classes, d_in))

    n_test = max(1, int(round(n_per_class * test_fraction)))
    n_train = n_per_class - n_test
    xs_tr, ys_tr, xs_te, ys_te = [], [], [], []
    for k in range(num_classes):
        x = class_means[k] + rng.normal(0.0, within_spread, (n_per_class, d_in))
        xs_tr.append(x[:n_train])
        xs_te.append(x[n_train:])
        ys_tr.append(np.full(n_train, k))
        ys_te.append(np.full(n_test, k))
    prov = {
        "source": "synthetic", "num_classes": num_classes, "superclasses": superclasses,
        "d_in": d_in, "n_per_class": n_per_class, "within_spread": within_spread,
        "between_spread": between_spread, "seed": seed, "test_fraction": test_fraction,
    }
    train = Dataset(np.concatenate(xs_tr), np.concatenate(ys_tr).astype(np.intp), num_classes, "train", prov)
    test = Dataset(np.concatenate(xs_te), np.concatenate(ys_te).astype(np.intp), num_classes, "test", prov)
    return train, test


def _digest(*blobs: bytes) -> str:
    h = hashlib.sha256()
    for b in blobs:
        h.update(b)
    return h.hexdigest()


def _read_idx(raw: bytes, expected_magic: int, what: str) -> tuple[int, tuple, bytes]:
    if len(raw) < 8:
        raise FormatError(f"{what}: truncated header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != expected_magic:
        raise FormatError(f"{what}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{what}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    size = int(np.prod(dims)) if dims else 0
    body = raw[header:]
    if len(body) < size:
        raise FormatError(f"{what}: truncated body ({len(body)} of {size} bytes)")
    return count, dims, body[:size]


def load_idx(images_path, labels_path, num_classes: int | None = None,
             split: str = "train") -> Dataset:
    """Read an IDX image/label file pair; pixels are scaled to [0, 1]."""
    img_raw = Path(images_path).read_bytes()
    lab_raw = Path(labels_path).read_bytes()
    n_img, dims, img_body = _read_idx(img_raw, IDX_IMAGES_MAGIC, str(images_path))
    n_lab, _, lab_body = _read_idx(lab_raw, IDX_LABELS_MAGIC, str(labels_path))
    if n_img != n_lab:
        raise FormatError(f"{n_img} images but {n_lab} labels")
    images = np.frombuffer(img_body, dtype=np.uint8).reshape(dims).astype(np.float64) / 255.0
    labels = np.frombuffer(lab_body, dtype=np.uint8).astype(np.intp)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 1
    prov = {"source": "idx", "images": str(images_path), "labels": str(labels_path),
            "sha256": _digest(img_raw, lab_raw)}
    return Dataset(images, labels, num_classes, split, prov)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (N, H, W) and labels (N,) in IDX layout."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def load_csv(path, num_classes: int | None = None, split: str = "train") -> Dataset:
    """Header row then one sample per line: feature columns, integer label last."""
    raw = Path(path).read_bytes()
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, encoding="utf-8")
    inputs = table[:, :-1]
    labels = table[:, -1]
    if np.any(labels != np.round(labels)):
        raise FormatError(f"{path}: non-integer label column")
    labels = labels.astype(np.intp)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 1
    return Dataset(inputs, labels, num_classes, split,
                   {"source": "csv", "path": str(path), "sha256": _digest(raw)})


def sparsify(train: Dataset, keep_fraction: float, seed: int) -> Dataset:
    """Keep ceil(keep_fraction * n_c) randomly chosen samples of every class (at least one)."""
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    keep = []
    for k in range(train.num_classes):
        idx = np.flatnonzero(train.labels == k)
        if idx.size == 0:
            continue
        # round first so 0.1 * 30 counts as 3, not 4
        n_keep = max(1, math.ceil(round(keep_fraction * idx.size, 9)))
        keep.append(rng.permutation(idx)[:n_keep])
    index = np.sort(np.concatenate(keep)) if keep else np.zeros(0, dtype=np.intp)
    return train.subset(index, keep_fraction=keep_fraction, sparsify_seed=seed)


def step_imbalance(train: Dataset, minority_fraction: float, seed: int) -> Dataset:
    """Halve floor(minority_fraction * K) randomly chosen classes; leave the rest intact."""
    if not 0 <= minority_fraction <= 1:
        raise ValueError("minority_fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    k = train.num_classes
    minority = np.sort(rng.permutation(k)[: int(math.floor(minority_fraction * k))])
    keep = []
    for c in range(k):
        idx = np.flatnonzero(train.labels == c)
        if c in minority and idx.size:
            idx = rng.permutation(idx)[: max(1, idx.size // 2)]
        keep.append(idx)
    index = np.sort(np.concatenate(keep)) if keep else np.zeros(0, dtype=np.intp)
    return train.subset(index, minority_fraction=minority_fraction,
                        minority_classes=minority.tolist(), imbalance_seed=seed)


def step_levels(dataset: Dataset) -> list[int]:
    """Distinct non-zero class sizes, ascending."""
    counts = dataset.class_counts()
    return sorted(set(int(c) for c in counts if c > 0))
