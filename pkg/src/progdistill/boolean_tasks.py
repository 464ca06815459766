"""Sparse parity and hierarchical (decision-tree) parity data."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Union

import numpy as np


@dataclass(frozen=True)
class ParitySpec:
    d: int
    k: int
    support: tuple[int, ...] = ()

    def __post_init__(self):
        support = tuple(self.support) if self.support else tuple(range(self.k))
        object.__setattr__(self, "support", support)
        if self.k < 1 or self.k > self.d:
            raise ValueError(f"need 1 <= k <= d, got k={self.k}, d={self.d}")
        if len(support) != self.k or len(set(support)) != self.k:
            raise ValueError(f"support must hold {self.k} distinct indices, got {support}")
        if min(support) < 0 or max(support) >= self.d:
            raise ValueError(f"support indices must lie in [0, {self.d})")

    @property
    def num_classes(self) -> int:
        return 2


@dataclass(frozen=True)
class HierarchySpec:
    """Depth-``depth`` decision tree whose internal nodes are sparse parities.

    ``features`` lists one index set per internal node in breadth-first
    order (root first). At a node the product of ``x`` over its set picks
    the left child on -1 and the right child on +1.
    """

    d: int
    depth: int
    features: tuple[tuple[int, ...], ...] = field(default=())

    def __post_init__(self):
        feats = tuple(tuple(f) for f in self.features)
        object.__setattr__(self, "features", feats)
        if len(feats) != 2 ** self.depth - 1:
            raise ValueError(f"need {2 ** self.depth - 1} feature sets for depth {self.depth}")
        seen: set[int] = set()
        for f in feats:
            if not f or min(f) < 0 or max(f) >= self.d:
                raise ValueError(f"feature {f} has indices outside [0, {self.d})")
            if seen.intersection(f) or len(set(f)) != len(f):
                raise ValueError("feature sets must be pairwise disjoint")
            seen.update(f)

    @classmethod
    def contiguous(cls, d: int, depth: int, k: int) -> HierarchySpec:
        """Features x_0..x_{k-1}, x_k..x_{2k-1}, ... in breadth-first order."""
        n = 2 ** depth - 1
        if n * k > d:
            raise ValueError(f"{n} disjoint features of size {k} do not fit in d={d}")
        return cls(d, depth, tuple(tuple(range(i * k, (i + 1) * k)) for i in range(n)))

    @property
    def num_classes(self) -> int:
        return 2 ** self.depth


Task = Union[ParitySpec, HierarchySpec]


@dataclass
class BooleanSample:
    x: np.ndarray
    y: int


def _check_x(d: int, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] != d:
        raise ValueError(f"expected inputs of length {d}, got {x.shape[-1]}")
    if not np.all(np.abs(x) == 1):
        raise ValueError("inputs must have entries in {-1, +1}")
    return x


def parity_label(spec: ParitySpec, x) -> np.ndarray | int:
    """Class 1 when the product over the support is +1, else class 2.

    Accepts a single vector or a batch (last axis = coordinates).
    """
    x = _check_x(spec.d, x)
    prod = np.prod(x[..., list(spec.support)], axis=-1)
    y = np.where(prod > 0, 1, 2)
    return int(y) if y.ndim == 0 else y


def hierarchy_label(spec: HierarchySpec, x) -> np.ndarray | int:
    """1-based leaf index reached by descending the tree."""
    x = _check_x(spec.d, x)
    batch = x.reshape(-1, spec.d)
    node = np.zeros(len(batch), dtype=np.int64)
    for _ in range(spec.depth):
        prods = np.empty(len(batch))
        for j, f in enumerate(spec.features):
            sel = node == j
            if sel.any():
                prods[sel] = np.prod(batch[sel][:, list(f)], axis=1)
        node = 2 * node + np.where(prods > 0, 2, 1)
    leaf = node - (2 ** spec.depth - 1) + 1
    out = leaf.reshape(x.shape[:-1])
    return int(out) if out.ndim == 0 else out


def label(task: Task, x):
    if isinstance(task, ParitySpec):
        return parity_label(task, x)
    return hierarchy_label(task, x)


def to_signed(y) -> np.ndarray:
    """Class 1 -> +1, class 2 -> -1 (hinge-loss encoding)."""
    return np.where(np.asarray(y) == 1, 1.0, -1.0)


def sample_inputs(d: int, rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(0, 2, size=(n, d)).astype(np.float64) * 2.0 - 1.0


def sample_arrays(task: Task, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    """``n`` uniform cube points and their labels, as arrays."""
    x = sample_inputs(task.d, rng, n)
    y = label(task, x) if n else np.zeros(0, dtype=np.int64)
    return x, np.asarray(y, dtype=np.int64)


def sample_batch(task: Task, rng: np.random.Generator, n: int) -> list[BooleanSample]:
    x, y = sample_arrays(task, rng, n)
    return [BooleanSample(x[i], int(y[i])) for i in range(n)]


def all_inputs(d: int) -> np.ndarray:
    """Every point of {+1,-1}^d as rows (2^d x d)."""
    codes = np.arange(2 ** d, dtype=np.int64)[:, None]
    bits = (codes >> np.arange(d)) & 1
    return 1.0 - 2.0 * bits


def dump_csv(path, x: np.ndarray, y: np.ndarray) -> None:
    d = x.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x_{i}" for i in range(d)] + ["y"])
        for row, lab in zip(x.astype(int), y):
            w.writerow(list(row) + [int(lab)])
