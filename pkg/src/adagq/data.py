"""Datasets: synthetic Gaussian blobs, IDX (MNIST-style) and CSV loaders.

Every loader returns features in [0, 1]: synthetic and CSV data are min-max
normalized per column (a constant column maps to 0), IDX pixels are divided
by 255.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if len(self.labels) < 1 or len(self.features) != len(self.labels):
            raise ValueError("dataset needs >= 1 sample and one label per row")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx: np.ndarray) -> Dataset:
        return Dataset(self.features[idx], self.labels[idx], self.n_classes, self.provenance)


def minmax_normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    lo = x.min(axis=0)
    span = x.max(axis=0) - lo
    out = np.zeros_like(x)
    nz = span > 0
    out[:, nz] = (x[:, nz] - lo[nz]) / span[nz]
    return out


def generate_synthetic(
    n_classes: int,
    input_dim: int,
    n_samples: int,
    class_sep: float,
    rng: np.random.Generator,
) -> Dataset:
    """Unit-covariance Gaussian blobs whose means are pairwise ``class_sep`` apart.

    Means are the scaled corners of a regular simplex, randomly rotated.
    Class sizes differ by at most one.
    """
    if input_dim < n_classes:
        raise ValueError("input_dim must be >= n_classes for equidistant class means")
    q, _ = np.linalg.qr(rng.standard_normal((input_dim, n_classes)))
    means = q.T * (class_sep / np.sqrt(2.0))
    labels = np.arange(n_samples) % n_classes
    labels = labels[rng.permutation(n_samples)]
    x = means[labels] + rng.standard_normal((n_samples, input_dim))
    prov = {
        "kind": "synthetic",
        "n_classes": n_classes,
        "input_dim": input_dim,
        "n_samples": n_samples,
        "class_sep": class_sep,
    }
    return Dataset(minmax_normalize(x), labels.astype(np.int64), n_classes, prov)


def _read_idx(path: Path, magic: int, header_words: int) -> tuple[tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    head = 4 * (1 + header_words)
    if len(raw) < head:
        raise DataFormatError(f"{path}: file is {len(raw)} bytes, header needs {head}")
    found = struct.unpack_from(">I", raw, 0)[0]
    if found != magic:
        raise DataFormatError(f"{path}: magic at offset 0 is {found:#010x}, expected {magic:#010x}")
    dims = struct.unpack_from(f">{header_words}I", raw, 4)
    return dims, raw[head:]


def load_idx(images_path: str | Path, labels_path: str | Path, n_classes: int = 10) -> Dataset:
    (n_img, rows, cols), pixels = _read_idx(Path(images_path), IDX_IMAGES_MAGIC, 3)
    (n_lab,), labels = _read_idx(Path(labels_path), IDX_LABELS_MAGIC, 1)
    need = n_img * rows * cols
    if len(pixels) != need:
        raise DataFormatError(
            f"{images_path}: pixel data at offset 16 is {len(pixels)} bytes, header implies {need}"
        )
    if len(labels) != n_lab:
        raise DataFormatError(
            f"{labels_path}: label data at offset 8 is {len(labels)} bytes, header implies {n_lab}"
        )
    if n_lab != n_img:
        raise DataFormatError(f"{n_img} images but {n_lab} labels")
    x = np.frombuffer(pixels, dtype=np.uint8).reshape(n_img, rows * cols) / 255.0
    y = np.frombuffer(labels, dtype=np.uint8).astype(np.int64)
    prov = {"kind": "idx", "images": str(images_path), "labels": str(labels_path)}
    return Dataset(x, y, n_classes, prov)


def load_csv(
    path: str | Path, label_column: int | str = -1, header: bool | None = None
) -> Dataset:
    """Numeric CSV. ``label_column`` is an index or, with a header row, a name.

    ``header=None`` sniffs: a first row with any non-empty, non-numeric cell
    is a header.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    if header is None:
        header = any(c.strip() and not _is_number(c) for c in rows[0])
    names = rows[0] if header else None
    body = rows[1:] if header else rows
    width = len(rows[0])
    if isinstance(label_column, str):
        if names is None or label_column not in names:
            raise DataFormatError(f"{path}: no column named {label_column!r}")
        label_idx = names.index(label_column)
    else:
        label_idx = label_column % width

    values = np.empty((len(body), width))
    first = 2 if header else 1
    for r, row in enumerate(body):
        if len(row) != width:
            raise DataFormatError(f"{path}: row {r + first} has {len(row)} columns, expected {width}")
        for c, cell in enumerate(row):
            cell = cell.strip()
            if cell == "":
                raise DataFormatError(f"{path}: missing value at row {r + first}, column {c + 1}")
            try:
                values[r, c] = float(cell)
            except ValueError:
                raise DataFormatError(
                    f"{path}: non-numeric value {cell!r} at row {r + first}, column {c + 1}"
                ) from None
    labels = values[:, label_idx]
    if np.any(labels != np.round(labels)) or labels.min() < 0:
        raise DataFormatError(f"{path}: labels must be non-negative integers")
    labels = labels.astype(np.int64)
    x = np.delete(values, label_idx, axis=1)
    prov = {"kind": "csv", "path": str(path), "label_column": label_column}
    return Dataset(minmax_normalize(x), labels, int(labels.max()) + 1, prov)


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True
