"""Label co-occurrence graph: feature matrix V and adjacency A."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensorio import read_tensor


@dataclass(frozen=True)
class LabelGraph:
    features: np.ndarray  # n x v
    adjacency: np.ndarray  # n x n, row i = P(j | i)
    names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        n = self.adjacency.shape[0]
        if self.adjacency.shape != (n, n) or self.features.shape[0] != n:
            raise ValueError(
                f"LabelGraph: features {self.features.shape} and adjacency "
                f"{self.adjacency.shape} disagree on label count"
            )
        if np.any(np.diag(self.adjacency) <= 0):
            raise ValueError("LabelGraph: every label needs a self-loop")
        if np.any(self.adjacency < 0) or np.any(self.adjacency > 1):
            raise ValueError("LabelGraph: adjacency entries must lie in [0, 1]")

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def mask(self) -> np.ndarray:
        """Boolean neighbourhood matrix, ``mask[i, j]`` iff j in N_i."""
        return self.adjacency > 0

    def neighborhoods(self) -> list[np.ndarray]:
        return [np.flatnonzero(row) for row in self.mask]


def build_cooccurrence_adjacency(Y, threshold: float = 0.0) -> np.ndarray:
    """Conditional co-occurrence ``A[i, j] = count(i and j) / count(i)``.

    Entries ``<= threshold`` are zeroed, then the diagonal is set to 1.  The
    result is not symmetrised.  Labels that never occur get an identity row
    and column and a warning.
    """
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[0] < 1:
        raise ValueError(f"annotation matrix must be N x n with N >= 1, got {Y.shape}")
    if not np.isin(Y, (0.0, 1.0)).all():
        raise ValueError("annotations must be 0/1")
    if not 0.0 <= threshold < 1.0:
        raise ValueError(f"threshold must lie in [0, 1), got {threshold}")
    joint = Y.T @ Y
    counts = np.diag(joint).copy()
    missing = counts == 0
    if missing.any():
        warnings.warn(
            f"labels {np.flatnonzero(missing).tolist()} never occur; isolated with self-loop only",
            stacklevel=2,
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        A = np.where(counts[:, None] > 0, joint / counts[:, None], 0.0)
    A[:, missing] = 0.0
    A[A <= threshold] = 0.0
    np.fill_diagonal(A, 1.0)
    return A


def init_label_features(n: int, v: int = 300, source=None, seed: int = 0) -> np.ndarray:
    """Label feature matrix, either loaded from an MSRNT1 file or seeded random.

    The random fallback draws standard normals scaled by ``1/sqrt(v)``.
    """
    if source is not None:
        V = read_tensor(source)
        if V.shape != (n, v):
            raise ValueError(f"{source}: expected label features of shape {(n, v)}, found {V.shape}")
        return V
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, v)) / np.sqrt(v)


def read_annotations(path) -> tuple[list[str], np.ndarray]:
    """Read ``Y.csv``: header of label names, then one 0/1 row per image."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty annotation file")
    names, body = rows[0], rows[1:]
    Y = np.zeros((len(body), len(names)))
    for r, row in enumerate(body):
        if len(row) != len(names):
            raise ValueError(f"{path}: row {r + 1} has {len(row)} fields, header has {len(names)}")
        for c, cell in enumerate(row):
            cell = cell.strip()
            if cell not in ("0", "1"):
                raise ValueError(f"{path}: annotations must be 0/1 (row {r + 1}, column {c + 1}: {cell!r})")
            Y[r, c] = float(cell)
    return names, Y


def write_annotations(path, names, Y) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for row in np.asarray(Y):
            writer.writerow([str(int(v)) for v in row])
