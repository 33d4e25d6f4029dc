"""Toy datasets, CSV ingestion and per-dimension standardization."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .ndmath import DTYPE

SWISS_T_MAX = 3 * math.pi


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Normalization:
    mean: torch.Tensor
    scale: torch.Tensor

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.mean) / self.scale

    def invert(self, z: torch.Tensor) -> torch.Tensor:
        return z * self.scale + self.mean

    @classmethod
    def identity(cls, d: int) -> "Normalization":
        return cls(torch.zeros(d, dtype=DTYPE), torch.ones(d, dtype=DTYPE))


@dataclass
class LabeledDataset:
    points: torch.Tensor
    labels: torch.Tensor | None = None
    class_count: int = 0
    normalization: Normalization | None = None
    columns: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.points.ndim != 2:
            raise DatasetError(f"points must be [n, d], got {list(self.points.shape)}")
        if self.labels is not None:
            if self.labels.shape[0] != self.points.shape[0]:
                raise DatasetError("labels and points disagree on n")
            if self.labels.numel() and (int(self.labels.min()) < 0 or int(self.labels.max()) >= self.class_count):
                raise DatasetError(f"labels must lie in [0, {self.class_count})")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = torch.as_tensor(idx, dtype=torch.long)
        labels = None if self.labels is None else self.labels[idx]
        return replace(self, points=self.points[idx], labels=labels)


def swiss_curve(t) -> torch.Tensor:
    """Noise-free spiral point (t cos t, t sin t)."""
    t = torch.as_tensor(t, dtype=DTYPE)
    return torch.stack([t * torch.cos(t), t * torch.sin(t)], dim=-1)


def swiss_label(t, class_bins: int) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=DTYPE)
    return torch.clamp((t / SWISS_T_MAX * class_bins).floor().long(), 0, class_bins - 1)


def swiss_roll(n: int, noise_scale: float = 0.05, class_bins: int = 6, seed: int = 0) -> LabeledDataset:
    """Spiral (t cos t, t sin t), t ~ U[0, 3 pi], labelled by equal-width bins of t."""
    if n < 1:
        raise DatasetError("n must be at least 1")
    if class_bins < 1:
        raise DatasetError("class_bins must be at least 1")
    g = torch.Generator().manual_seed(seed)
    t = torch.rand(n, generator=g, dtype=DTYPE) * SWISS_T_MAX
    noise = torch.randn(n, 2, generator=g, dtype=DTYPE) * noise_scale
    return LabeledDataset(swiss_curve(t) + noise, swiss_label(t, class_bins), class_bins, columns=("x", "y"))


def gaussian_mixture(n: int, means: Sequence[Sequence[float]], scale: float = 1.0, seed: int = 0) -> LabeledDataset:
    """Equal-weight isotropic components; labels are component indices."""
    mu = torch.as_tensor(means, dtype=DTYPE)
    if mu.ndim != 2 or mu.shape[0] < 1:
        raise DatasetError("means must be a non-empty [k, d] array")
    g = torch.Generator().manual_seed(seed)
    labels = torch.randint(0, mu.shape[0], (n,), generator=g)
    points = mu[labels] + scale * torch.randn(n, mu.shape[1], generator=g, dtype=DTYPE)
    return LabeledDataset(points, labels, mu.shape[0])


def train_val_split(ds: LabeledDataset, val_fraction: float = 0.2, seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    g = torch.Generator().manual_seed(seed)
    perm = torch.randperm(ds.n, generator=g)
    n_val = int(round(ds.n * val_fraction))
    return ds.subset(perm[n_val:]), ds.subset(perm[:n_val])


def fit_normalize(ds: LabeledDataset) -> tuple[LabeledDataset, Normalization]:
    if ds.n < 2:
        raise DatasetError("need at least 2 points to fit a normalization")
    mean = ds.points.mean(0)
    scale = ds.points.std(0, unbiased=False)
    for j, s in enumerate(scale.tolist()):
        if not s > 0:
            name = ds.columns[j] if ds.columns else str(j)
            raise DatasetError(f"dimension {name!r} has zero variance")
    record = Normalization(mean, scale)
    return apply_normalize(ds, record), record


def apply_normalize(ds: LabeledDataset, record: Normalization) -> LabeledDataset:
    return replace(ds, points=record.apply(ds.points), normalization=record)


def load_csv(path, label_column: str | None = None) -> LabeledDataset:
    """Header row plus numeric rows; ``label_column`` holds integer class ids."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = [(i + 2, r) for i, r in enumerate(rows[1:]) if r and any(c.strip() for c in r)]
    if not body:
        raise DatasetError(f"{path}: no data rows after header")
    if label_column is not None and label_column not in header:
        raise DatasetError(f"{path}: unknown label column {label_column!r}")
    values = []
    for line, r in body:
        if len(r) != len(header):
            raise DatasetError(f"{path}:{line}: expected {len(header)} fields, got {len(r)}")
        try:
            values.append([float(c) for c in r])
        except ValueError as exc:
            raise DatasetError(f"{path}:{line}: non-numeric cell ({exc})") from None
    arr = np.asarray(values, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise DatasetError(f"{path}: non-finite values")
    if label_column is None:
        return LabeledDataset(torch.from_numpy(arr), columns=tuple(header))
    j = header.index(label_column)
    raw = arr[:, j]
    if not np.all(raw == np.round(raw)) or raw.min() < 0:
        bad = int(np.flatnonzero((raw != np.round(raw)) | (raw < 0))[0])
        raise DatasetError(f"{path}:{body[bad][0]}: label must be a non-negative integer")
    labels = torch.from_numpy(raw.astype(np.int64))
    keep = [k for k in range(len(header)) if k != j]
    return LabeledDataset(
        torch.from_numpy(np.ascontiguousarray(arr[:, keep])),
        labels,
        int(labels.max()) + 1,
        columns=tuple(header[k] for k in keep),
    )


def write_csv(path, ds: LabeledDataset, label_column: str = "label") -> None:
    cols = list(ds.columns or [f"x{j}" for j in range(ds.d)])
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols + ([label_column] if ds.labels is not None else []))
        for i in range(ds.n):
            row = [repr(float(v)) for v in ds.points[i].tolist()]
            if ds.labels is not None:
                row.append(int(ds.labels[i]))
            w.writerow(row)
