"""Synthetic datasets and CSV ingestion.

CSV layout: header ``f0,...,f{d-1},label`` followed by one numeric row per
sample. ``save_csv`` also writes ``<name>.meta.json`` next to the file with
the generator name, its configuration and the seed.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, ParseError
from .fileio import atomic_write_text
from .seeding import derive_rng


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    n_classes: int
    name: str = "dataset"
    seed: int | None = None
    bounds: tuple[float, float] | None = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.X.shape[0] < 1:
            raise InvalidArgumentError("X must be a non-empty 2-D array")
        if self.y.shape != (self.X.shape[0],):
            raise InvalidArgumentError("y must have one label per row of X")
        if not np.all(np.isfinite(self.X)):
            raise InvalidArgumentError("X has non-finite entries")
        if np.any(self.y < 0) or np.any(self.y >= self.n_classes):
            raise InvalidArgumentError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx, name: str | None = None) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.n_classes, name or self.name,
                       self.seed, self.bounds, dict(self.config))


def _check_count(value, minimum: int, what: str) -> int:
    if int(value) != value or value < minimum:
        raise InvalidArgumentError(f"{what} must be an integer >= {minimum}, got {value}")
    return int(value)


def class_means(n_classes: int, dim: int, separation: float) -> np.ndarray:
    """Centered class means with pairwise distance ``separation``.

    With ``dim >= n_classes`` the means are scaled basis vectors (a regular
    simplex, all pairs equidistant). Otherwise they sit on a circle in the
    first two coordinates, with adjacent means ``separation`` apart.
    """
    if dim >= n_classes:
        means = np.zeros((n_classes, dim))
        means[np.arange(n_classes), np.arange(n_classes)] = separation / math.sqrt(2.0)
    else:
        radius = separation / (2.0 * math.sin(math.pi / n_classes))
        angles = 2.0 * math.pi * np.arange(n_classes) / n_classes
        means = np.zeros((n_classes, dim))
        means[:, 0] = radius * np.cos(angles)
        means[:, 1] = radius * np.sin(angles)
    return means - means.mean(axis=0)


def gen_blobs(n_classes: int, dim: int, n_per_class: int, separation: float,
              noise_sd: float, seed: int) -> Dataset:
    """Isotropic Gaussian blobs around :func:`class_means`."""
    n_classes = _check_count(n_classes, 2, "n_classes")
    dim = _check_count(dim, 2, "dim")
    n_per_class = _check_count(n_per_class, 1, "n_per_class")
    if not separation > 0:
        raise InvalidArgumentError("separation must be positive")
    if noise_sd < 0:
        raise InvalidArgumentError("noise_sd must be non-negative")
    rng = derive_rng(seed, "data", "blobs")
    means = class_means(n_classes, dim, separation)
    y = np.repeat(np.arange(n_classes), n_per_class)
    X = means[y] + noise_sd * rng.standard_normal((y.size, dim))
    cfg = dict(n_classes=n_classes, dim=dim, n_per_class=n_per_class,
               separation=separation, noise_sd=noise_sd)
    return Dataset(X, y, n_classes, "blobs", seed, None, cfg)


def _balanced_labels(n: int, n_classes: int) -> np.ndarray:
    return np.arange(n) % n_classes


def gen_moons(n: int, noise_sd: float, seed: int) -> Dataset:
    """Two interleaved half circles (label 0 on top, label 1 below)."""
    n = _check_count(n, 2, "n")
    if noise_sd < 0:
        raise InvalidArgumentError("noise_sd must be non-negative")
    rng = derive_rng(seed, "data", "moons")
    y = np.sort(_balanced_labels(n, 2))
    n0 = int(np.sum(y == 0))
    t0 = np.linspace(0.0, math.pi, n0)
    t1 = np.linspace(0.0, math.pi, n - n0)
    outer = np.column_stack([np.cos(t0), np.sin(t0)])
    inner = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    X = np.vstack([outer, inner]) + noise_sd * rng.standard_normal((n, 2))
    return Dataset(X, y, 2, "moons", seed, None, dict(n=n, noise_sd=noise_sd))


def gen_rings(n: int, n_classes: int, noise_sd: float, seed: int) -> Dataset:
    """Concentric rings; class ``k`` has radius ``k + 1``."""
    n = _check_count(n, 2, "n")
    n_classes = _check_count(n_classes, 2, "n_classes")
    if noise_sd < 0:
        raise InvalidArgumentError("noise_sd must be non-negative")
    rng = derive_rng(seed, "data", "rings")
    y = np.sort(_balanced_labels(n, n_classes))
    theta = rng.uniform(0.0, 2.0 * math.pi, n)
    radius = (y + 1.0)
    X = np.column_stack([radius * np.cos(theta), radius * np.sin(theta)])
    X = X + noise_sd * rng.standard_normal((n, 2))
    return Dataset(X, y, n_classes, "rings", seed, None, dict(n=n, n_classes=n_classes, noise_sd=noise_sd))


def split(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified seeded split; ``fraction`` of each class goes to the first part.

    Per class the first part gets ``round(fraction * count)`` samples, kept
    within ``[1, count - 1]`` so both parts see every class.
    """
    if not 0.0 < fraction < 1.0:
        raise InvalidArgumentError("fraction must lie in (0, 1)")
    rng = derive_rng(seed, "split")
    first, second = [], []
    for k in range(ds.n_classes):
        idx = np.flatnonzero(ds.y == k)
        if idx.size == 0:
            continue
        if idx.size < 2:
            raise InvalidArgumentError(f"class {k} has fewer than 2 samples; cannot split")
        idx = idx[rng.permutation(idx.size)]
        cut = min(max(int(round(fraction * idx.size)), 1), idx.size - 1)
        first.append(idx[:cut])
        second.append(idx[cut:])
    a = np.sort(np.concatenate(first))
    b = np.sort(np.concatenate(second))
    return ds.subset(a, f"{ds.name}-a"), ds.subset(b, f"{ds.name}-b")


# --------------------------------------------------------------------------
# CSV


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def save_csv(ds: Dataset, path) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"f{j}" for j in range(ds.dim)] + ["label"])
    for row, label in zip(ds.X, ds.y):
        w.writerow([repr(float(v)) for v in row] + [int(label)])
    out = atomic_write_text(path, buf.getvalue())
    meta = dict(name=ds.name, seed=ds.seed, n_classes=ds.n_classes,
                bounds=list(ds.bounds) if ds.bounds else None, config=ds.config)
    atomic_write_text(meta_path(path), json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


def load_csv(path, n_classes: int | None = None) -> Dataset:
    """Read a dataset CSV. The class count comes from ``n_classes``, else the
    sibling metadata file, else ``max(label) + 1``."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ParseError(f"{path}: empty file", 1)
    header = [h.strip() for h in rows[0]]
    if len(header) < 2 or header[-1] != "label":
        raise ParseError(f"{path}: header must end with a 'label' column", 1)
    d = len(header) - 1
    if header[:-1] != [f"f{j}" for j in range(d)]:
        raise ParseError(f"{path}: feature columns must be named f0..f{d - 1}", 1)
    meta = {}
    if meta_path(path).exists():
        meta = json.loads(meta_path(path).read_text(encoding="utf-8"))
    if n_classes is None:
        n_classes = meta.get("n_classes")
    X, y = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != d + 1:
            raise ParseError(f"{path}:{lineno}: expected {d + 1} cells, got {len(row)}", lineno)
        try:
            feats = [float(c) for c in row[:-1]]
            label_f = float(row[-1])
        except ValueError:
            raise ParseError(f"{path}:{lineno}: non-numeric cell", lineno) from None
        if not all(math.isfinite(v) for v in feats):
            raise ParseError(f"{path}:{lineno}: non-finite feature", lineno)
        if not math.isfinite(label_f) or label_f != int(label_f) or label_f < 0 or (n_classes is not None and label_f >= n_classes):
            raise ParseError(f"{path}:{lineno}: label {row[-1]!r} outside [0, {n_classes})", lineno)
        X.append(feats)
        y.append(int(label_f))
    if not X:
        raise ParseError(f"{path}: no data rows", 2)
    y_arr = np.array(y, dtype=np.int64)
    if n_classes is None:
        n_classes = max(2, int(y_arr.max()) + 1)
    bounds = tuple(meta["bounds"]) if meta.get("bounds") else None
    return Dataset(np.array(X), y_arr, int(n_classes), meta.get("name", path.stem),
                   meta.get("seed"), bounds, meta.get("config", {}))
