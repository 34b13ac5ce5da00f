"""Seeded synthetic domains: Gaussian class blobs under rotation/translation shift."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class DomainSpec:
    class_means: np.ndarray  # (C, d), the unshifted reference geometry
    sample_count: int
    seed: int = 0
    cov_scale: float = 1.0
    rotation: float = 0.0  # radians, applied in every (2i, 2i+1) coordinate plane
    translation: np.ndarray | None = None

    def __post_init__(self):
        means = np.asarray(self.class_means, dtype=np.float64)
        if means.ndim != 2 or means.shape[0] < 2:
            raise ValueError("need at least two class means")
        if self.sample_count < means.shape[0]:
            raise ValueError("sample_count must be at least the number of classes")
        if not self.cov_scale > 0:
            raise ValueError("cov_scale must be positive")
        t = np.zeros(means.shape[1]) if self.translation is None else np.asarray(self.translation, float)
        if t.shape != (means.shape[1],):
            raise ValueError("translation must have input_dim entries")
        object.__setattr__(self, "class_means", means)
        object.__setattr__(self, "translation", t)

    @property
    def num_classes(self) -> int:
        return self.class_means.shape[0]

    @property
    def input_dim(self) -> int:
        return self.class_means.shape[1]


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "inputs", np.asarray(self.inputs))
        object.__setattr__(self, "labels", np.asarray(self.labels))
        if len(self.labels) == 0 or len(self.labels) != len(self.inputs):
            raise ValueError("inputs and labels must be nonempty and aligned")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("label out of range")
        for a in (self.inputs, self.labels):
            a.setflags(write=False)

    def __len__(self) -> int:
        return len(self.labels)


class UnlabeledDataset:
    """Target-domain inputs. Labels are held back for evaluation only.

    There is deliberately no ``labels`` attribute: training code gets
    ``inputs`` and nothing else.
    """

    __slots__ = ("inputs", "num_classes", "_hidden_labels")

    def __init__(self, inputs: np.ndarray, hidden_labels: np.ndarray, num_classes: int):
        self.inputs = inputs
        self.num_classes = num_classes
        self._hidden_labels = hidden_labels

    def __len__(self) -> int:
        return len(self.inputs)

    def evaluation_view(self) -> LabeledDataset:
        """Labeled view of the target, for scoring a trained model."""
        return LabeledDataset(self.inputs, self._hidden_labels, self.num_classes)

    def accuracy(self, predictions: np.ndarray) -> float:
        return float(np.mean(np.asarray(predictions) == self._hidden_labels))


def default_class_means(num_classes: int, input_dim: int, seed: int = 0, radius: float = 3.0,
                        offset: float = 2.0) -> np.ndarray:
    """Random class centres on a sphere of ``radius`` around a common offset point.

    The offset keeps the cloud away from the origin so rotations move it.
    """
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(num_classes, input_dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return offset * np.ones(input_dim) + radius * dirs


def rotation_matrix(input_dim: int, angle: float) -> np.ndarray:
    r = np.eye(input_dim)
    c, s = np.cos(angle), np.sin(angle)
    for i in range(0, input_dim - 1, 2):
        r[i, i], r[i, i + 1] = c, -s
        r[i + 1, i], r[i + 1, i + 1] = s, c
    return r


def apply_shift(x: np.ndarray, angle: float, translation: np.ndarray) -> np.ndarray:
    return x @ rotation_matrix(x.shape[1], angle).T + translation


def _balanced_labels(n: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % num_classes)


def generate_domain(spec: DomainSpec) -> LabeledDataset:
    rng = np.random.default_rng(spec.seed)
    labels = _balanced_labels(spec.sample_count, spec.num_classes, rng)
    x = spec.class_means[labels] + spec.cov_scale * rng.normal(size=(spec.sample_count, spec.input_dim))
    x = apply_shift(x, spec.rotation, spec.translation)
    return LabeledDataset(x.astype(np.float32), labels.astype(np.int64), spec.num_classes)


def as_target(dataset: LabeledDataset) -> UnlabeledDataset:
    return UnlabeledDataset(dataset.inputs, dataset.labels, dataset.num_classes)


def corrupt_labels(dataset: LabeledDataset, fraction: float, seed: int) -> LabeledDataset:
    """Flip exactly ``round(fraction * N)`` labels, each to a uniformly drawn wrong class."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    c = dataset.num_classes
    n = len(dataset)
    n_bad = int(np.floor(fraction * n + 0.5))
    rng = np.random.default_rng(seed)
    idx = rng.choice(n, size=n_bad, replace=False)
    labels = dataset.labels.copy()
    labels[idx] = (labels[idx] + rng.integers(1, c, size=n_bad)) % c
    return LabeledDataset(dataset.inputs, labels, c)


def make_irrelevant_domain(spec: DomainSpec, seed: int, distance: float = 12.0) -> LabeledDataset:
    """Class-independent inputs far from the reference geometry, uniformly random labels."""
    rng = np.random.default_rng(seed)
    centre = spec.class_means.mean(axis=0)
    direction = rng.normal(size=spec.input_dim)
    direction /= np.linalg.norm(direction)
    spread = np.linalg.norm(spec.class_means - centre, axis=1).max() + spec.cov_scale
    x = centre + distance * direction + spread * rng.normal(size=(spec.sample_count, spec.input_dim))
    labels = rng.integers(0, spec.num_classes, size=spec.sample_count)
    return LabeledDataset(x.astype(np.float32), labels.astype(np.int64), spec.num_classes)


# ---------------------------------------------------------------- CSV dump


def dump_csv(dataset: LabeledDataset | UnlabeledDataset, path) -> None:
    """Columns x_0..x_{d-1},label. Unlabeled dumps write -1 in the label column."""
    x = dataset.inputs
    labels = dataset.labels if isinstance(dataset, LabeledDataset) else np.full(len(x), -1)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"x_{j}" for j in range(x.shape[1])] + ["label"])
        for row, y in zip(x, labels):
            w.writerow([repr(float(v)) for v in row] + [int(y)])


def load_csv(path, num_classes: int | None = None):
    """Inverse of :func:`dump_csv`. Returns (inputs, labels) with -1 for unlabeled rows."""
    with open(Path(path), newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    x = np.array([[float(v) for v in r[:-1]] for r in rows], dtype=np.float32)
    y = np.array([int(r[-1]) for r in rows], dtype=np.int64)
    if num_classes is not None and np.all(y >= 0):
        return LabeledDataset(x, y, num_classes)
    return x, y
