"""Synthetic glyph datasets with group-structured label co-occurrence, plus disk I/O.

Directory layout::

    Y.csv                       header of label names, one 0/1 row per image
    labels.txt                  one label name per line
    images/000000.msrnt         H x W x C image tensors
    features/000000.b0.msrnt    optional precomputed raw branch features
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .labelgraph import read_annotations, write_annotations
from .tensorio import read_tensor, write_tensor

PALETTE = np.array([
    [1.0, 0.1, 0.1], [0.1, 0.9, 0.1], [0.2, 0.3, 1.0], [1.0, 0.9, 0.1],
    [0.9, 0.1, 0.9], [0.1, 0.9, 0.9], [1.0, 0.55, 0.1], [0.95, 0.95, 0.95],
    [0.55, 0.25, 0.05], [0.5, 0.5, 0.5], [0.3, 0.6, 0.3], [0.6, 0.3, 0.6],
])

SHAPES = ("square", "disc", "triangle", "cross", "ring", "diamond", "hbar", "vbar")


@dataclass
class SynthConfig:
    n_labels: int = 8
    n_groups: int = 2
    n_images: int = 1000
    image_size: int = 32
    channels: int = 3
    glyph_size: int = 8
    min_glyphs: int = 1
    max_glyphs: int = 3
    beta: float = 4.0  # sampling weight multiplier for labels sharing a group with one already drawn
    noise: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.n_labels < 1 or not 1 <= self.n_groups <= self.n_labels:
            raise ValueError(f"need 1 <= n_groups <= n_labels, got {self.n_groups}, {self.n_labels}")
        if self.beta < 1:
            raise ValueError(f"beta must be >= 1, got {self.beta}")
        if self.channels != 3:
            raise ValueError("glyph rendering is RGB; channels must be 3")
        if self.n_images < 1:
            raise ValueError("n_images must be positive")
        if self.glyph_size < 3 or self.glyph_size > self.image_size:
            raise ValueError(f"glyph_size {self.glyph_size} does not fit a {self.image_size}px image")
        cells = (self.image_size // self.glyph_size) ** 2
        if not 1 <= self.min_glyphs <= self.max_glyphs:
            raise ValueError("need 1 <= min_glyphs <= max_glyphs")
        if self.max_glyphs > min(cells, self.n_labels):
            raise ValueError(
                f"cannot place {self.max_glyphs} distinct glyphs: image holds {cells} "
                f"glyph cells and there are {self.n_labels} labels"
            )

    def groups(self) -> np.ndarray:
        return np.arange(self.n_labels) * self.n_groups // self.n_labels


@dataclass
class Dataset:
    images: np.ndarray | None  # N x H x W x C
    Y: np.ndarray  # N x n, 0/1
    names: list[str]
    features: list[np.ndarray] | None = None  # per branch, N x H_b x W_b x C_b
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.Y = np.asarray(self.Y, dtype=np.int64)
        if self.Y.ndim != 2 or self.Y.shape[1] != len(self.names):
            raise ValueError(f"Y {self.Y.shape} does not match {len(self.names)} label names")
        if self.images is None and self.features is None:
            raise ValueError("dataset needs images or precomputed features")
        if self.images is not None and len(self.images) != len(self.Y):
            raise ValueError(f"{len(self.images)} images but {len(self.Y)} annotation rows")
        for b, f in enumerate(self.features or []):
            if len(f) != len(self.Y):
                raise ValueError(f"branch {b}: {len(f)} feature maps but {len(self.Y)} annotation rows")

    def __len__(self) -> int:
        return len(self.Y)

    @property
    def inputs(self):
        """What the model consumes: the image stack, or the list of branch features."""
        return self.features if self.features is not None else self.images

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(
            None if self.images is None else self.images[index],
            self.Y[index],
            list(self.names),
            None if self.features is None else [f[index] for f in self.features],
            dict(self.meta),
        )

    def split(self, train_fraction: float = 0.5, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        order = np.random.default_rng(seed).permutation(len(self))
        cut = int(round(train_fraction * len(self)))
        return self.subset(np.sort(order[:cut])), self.subset(np.sort(order[cut:]))


def glyph_mask(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    r = size / 2.0 - 0.5
    dy, dx = yy - c, xx - c
    third = max(1, size // 3)
    if shape == "square":
        m = np.ones((size, size), bool)
        m[[0, -1], :] = False
        m[:, [0, -1]] = False
    elif shape == "disc":
        m = dy ** 2 + dx ** 2 <= r ** 2
    elif shape == "triangle":
        m = (yy >= 1) & (np.abs(dx) <= (yy - 1) / 2.0 + 0.5)
    elif shape == "cross":
        m = (np.abs(dy) < third / 2.0 + 0.5) | (np.abs(dx) < third / 2.0 + 0.5)
    elif shape == "ring":
        d2 = dy ** 2 + dx ** 2
        m = (d2 <= r ** 2) & (d2 >= (r - third) ** 2)
    elif shape == "diamond":
        m = np.abs(dy) + np.abs(dx) <= r
    elif shape == "hbar":
        m = np.abs(dy) < third / 2.0 + 0.5
    elif shape == "vbar":
        m = np.abs(dx) < third / 2.0 + 0.5
    else:
        raise ValueError(f"unknown glyph shape {shape!r}")
    return m


def label_appearance(i: int) -> tuple[str, np.ndarray]:
    """Distinct (shape, colour) pair for label ``i``."""
    shape = SHAPES[i % len(SHAPES)]
    colour = PALETTE[(i + i // len(SHAPES)) % len(PALETTE)]
    return shape, colour


def _sample_labels(rng, k: int, groups: np.ndarray, beta: float) -> list[int]:
    n = len(groups)
    chosen = [int(rng.integers(n))]
    for _ in range(k - 1):
        weights = np.ones(n)
        weights[np.isin(groups, groups[chosen])] = beta
        weights[chosen] = 0.0
        chosen.append(int(rng.choice(n, p=weights / weights.sum())))
    return chosen


def _render(rng, labels, config: SynthConfig) -> np.ndarray:
    s, g = config.image_size, config.glyph_size
    img = rng.normal(0.0, config.noise, size=(s, s, config.channels))
    per_side = s // g
    cells = rng.choice(per_side * per_side, size=len(labels), replace=False)
    for label, cell in zip(labels, cells):
        shape, colour = label_appearance(label)
        mask = glyph_mask(shape, g)
        y0, x0 = (cell // per_side) * g, (cell % per_side) * g
        patch = img[y0:y0 + g, x0:x0 + g]
        patch[mask] = colour + rng.normal(0.0, config.noise, size=(int(mask.sum()), config.channels))
    return img


def generate_synthetic(config: SynthConfig, max_attempts: int = 100) -> Dataset:
    """Render a seeded glyph dataset; image i draws from the stream (seed, attempt, i).

    Redraws with the next attempt index until every label occurs at least once.
    """
    config.validate()
    groups = config.groups()
    names = [f"{label_appearance(i)[0]}_{i}" for i in range(config.n_labels)]
    for attempt in range(max_attempts):
        images = np.empty((config.n_images, config.image_size, config.image_size, config.channels))
        Y = np.zeros((config.n_images, config.n_labels), dtype=np.int64)
        for i in range(config.n_images):
            rng = np.random.default_rng([config.seed, attempt, i])
            k = int(rng.integers(config.min_glyphs, config.max_glyphs + 1))
            labels = _sample_labels(rng, k, groups, config.beta)
            Y[i, labels] = 1
            images[i] = _render(rng, labels, config)
        if Y.sum(axis=0).min() > 0:
            return Dataset(images, Y, names, meta={"synth": asdict(config), "groups": groups.tolist()})
    raise ValueError(f"no draw within {max_attempts} attempts covers every label; add images")


def save_dataset(dataset: Dataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_annotations(directory / "Y.csv", dataset.names, dataset.Y)
    (directory / "labels.txt").write_text("\n".join(dataset.names) + "\n")
    if dataset.images is not None:
        (directory / "images").mkdir(exist_ok=True)
        for i, img in enumerate(dataset.images):
            write_tensor(directory / "images" / f"{i:06d}.msrnt", img)
    if dataset.features is not None:
        (directory / "features").mkdir(exist_ok=True)
        for b, fmap in enumerate(dataset.features):
            for i, f in enumerate(fmap):
                write_tensor(directory / "features" / f"{i:06d}.b{b}.msrnt", f)


def _stack(paths, what: str) -> np.ndarray:
    arrays = [read_tensor(p) for p in paths]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"{what}: inconsistent tensor shapes {sorted(shapes)}")
    return np.stack(arrays)


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    y_path = directory / "Y.csv"
    if not y_path.exists():
        raise FileNotFoundError(f"{y_path}: annotation file missing")
    names, Y = read_annotations(y_path)
    labels_path = directory / "labels.txt"
    if labels_path.exists():
        listed = labels_path.read_text().split()
        if listed != names:
            raise ValueError(f"{labels_path}: names disagree with the Y.csv header")
    n = len(Y)
    images = features = None
    img_dir = directory / "images"
    if img_dir.is_dir():
        paths = sorted(img_dir.glob("*.msrnt"))
        if len(paths) != n:
            raise ValueError(f"{img_dir}: {len(paths)} images but Y.csv has {n} rows")
        expected = [img_dir / f"{i:06d}.msrnt" for i in range(n)]
        if paths != expected:
            raise ValueError(f"{img_dir}: image files must be numbered 000000.msrnt upward")
        images = _stack(paths, str(img_dir))
    feat_dir = directory / "features"
    if feat_dir.is_dir():
        branches = sorted({p.name.split(".")[1] for p in feat_dir.glob("*.msrnt")})
        features = []
        for b in range(len(branches)):
            paths = [feat_dir / f"{i:06d}.b{b}.msrnt" for i in range(n)]
            missing = [p for p in paths if not p.exists()]
            if missing:
                raise FileNotFoundError(f"{missing[0]}: branch feature file missing")
            features.append(_stack(paths, f"{feat_dir} branch {b}"))
    if images is None and features is None:
        raise FileNotFoundError(f"{directory}: neither images/ nor features/ present")
    return Dataset(images, Y, names, features)
