"""Isolation Forest novelty detector over feature vectors.

Scores follow the original formulation ``s(x) = 2 ** (-E[h(x)] / c(psi))``,
so higher means more anomalous.  Each tree draws its subsample and splits
from its own generator, seeded by ``(seed, tree_index)``; building trees in
parallel or serially gives the same forest.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import BadParameter, DimensionMismatch, EmptySample, EmptyTrainingSet

EULER_GAMMA = 0.5772156649


def c_factor(n: int) -> float:
    """Average path length of an unsuccessful BST search among ``n`` points."""
    if n <= 1:
        return 0.0
    return 2.0 * (math.log(n - 1) + EULER_GAMMA) - 2.0 * (n - 1) / n


@dataclass(frozen=True)
class Leaf:
    size: int


@dataclass(frozen=True)
class Internal:
    split_dim: int
    split_value: float
    left: "ITreeNode"
    right: "ITreeNode"


ITreeNode = Union[Leaf, Internal]


class RecordingGenerator:
    """Wraps a generator and logs every draw the tree builder makes."""

    def __init__(self, rng: np.random.Generator):
        self._rng = rng
        self.draws: list[tuple[str, object]] = []

    def integers(self, high: int) -> int:
        value = int(self._rng.integers(high))
        self.draws.append(("integers", value))
        return value

    def random(self) -> float:
        value = float(self._rng.random())
        self.draws.append(("random", value))
        return value

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        value = self._rng.choice(n, size=size, replace=replace)
        self.draws.append(("choice", value.tolist()))
        return value


def tree_generator(seed: int, tree_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, tree_index])


def draw_subsample(rng, n: int, size: int) -> np.ndarray:
    if size >= n:
        return np.arange(n)
    return np.asarray(rng.choice(n, size=size, replace=False))


def build_tree(sample, height_limit: int, rng, depth: int = 0) -> ITreeNode:
    """Grow one isolation tree. Left subtree is fully built before the right."""
    sample = np.asarray(sample, dtype=np.float64)
    if sample.ndim == 1:
        sample = sample[:, None]
    if len(sample) == 0:
        raise EmptySample("cannot build an isolation tree on zero points")
    if depth >= height_limit or len(sample) <= 1:
        return Leaf(len(sample))
    lo = sample.min(axis=0)
    hi = sample.max(axis=0)
    dims = np.flatnonzero(hi > lo)
    if len(dims) == 0:
        return Leaf(len(sample))
    dim = int(dims[int(rng.integers(len(dims)))])
    a, b = float(lo[dim]), float(hi[dim])
    # redraw until strictly inside (a, b); float rounding can land on an endpoint
    while True:
        value = a + float(rng.random()) * (b - a)
        if a < value < b:
            break
    goes_left = sample[:, dim] < value
    left, right = sample[goes_left], sample[~goes_left]
    assert len(left) and len(right), "split left an empty partition"
    return Internal(
        dim,
        value,
        build_tree(left, height_limit, rng, depth + 1),
        build_tree(right, height_limit, rng, depth + 1),
    )


def tree_depth(node: ITreeNode) -> int:
    if isinstance(node, Leaf):
        return 0
    return 1 + max(tree_depth(node.left), tree_depth(node.right))


def path_length(tree: ITreeNode, x) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    edges = 0
    node = tree
    while isinstance(node, Internal):
        if node.split_dim >= len(x):
            raise DimensionMismatch(f"tree splits on dim {node.split_dim}, input has {len(x)} dims")
        node = node.left if x[node.split_dim] < node.split_value else node.right
        edges += 1
    # empty partitions never occur at build time, but a size-0 leaf is scored as size 1
    return edges + c_factor(max(node.size, 1))


@dataclass
class IsolationForestModel:
    trees: list[ITreeNode]
    psi: int
    psi_eff: int
    height_limit: int
    seed: int
    dim: int
    _flat: tuple | None = field(default=None, repr=False, compare=False)

    def _compiled(self):
        if self._flat is None:
            self._flat = _flatten(self.trees)
        return self._flat

    def path_lengths(self, X) -> np.ndarray:
        """Per-point, per-tree path lengths, shape ``(n, t)``."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None]
        if X.shape[1] != self.dim:
            raise DimensionMismatch(f"forest was fit on {self.dim}-dim features, got {X.shape[1]}")
        dims, values, left, right, leaf_len, roots = self._compiled()
        node = np.broadcast_to(roots, (len(X), len(roots))).copy()
        rows = np.arange(len(X))[:, None]
        for _ in range(self.height_limit + 1):
            internal = dims[node] >= 0
            if not internal.any():
                break
            d = np.where(internal, dims[node], 0)
            go_left = X[rows, d] < values[node]
            node = np.where(internal, np.where(go_left, left[node], right[node]), node)
        return leaf_len[node]

    def expected_path_length(self, X) -> np.ndarray:
        h = self.path_lengths(X)
        total = np.zeros(len(h))
        # fixed left-to-right accumulation over trees
        for j in range(h.shape[1]):
            total += h[:, j]
        return total / h.shape[1]

    def scores(self, X) -> np.ndarray:
        norm = c_factor(self.psi_eff)
        eh = self.expected_path_length(X)
        if norm == 0.0:
            return np.full(len(eh), 0.5)
        return np.array([2.0 ** (-float(h) / norm) for h in eh])


def _flatten(trees: list[ITreeNode]):
    dims: list[int] = []
    values: list[float] = []
    left: list[int] = []
    right: list[int] = []
    leaf_len: list[float] = []
    roots: list[int] = []

    def emit(node: ITreeNode, depth: int) -> int:
        idx = len(dims)
        dims.append(-1)
        values.append(0.0)
        left.append(idx)
        right.append(idx)
        leaf_len.append(0.0)
        if isinstance(node, Leaf):
            leaf_len[idx] = depth + c_factor(max(node.size, 1))
        else:
            dims[idx] = node.split_dim
            values[idx] = node.split_value
            left[idx] = emit(node.left, depth + 1)
            right[idx] = emit(node.right, depth + 1)
        return idx

    for tree in trees:
        roots.append(emit(tree, 0))
    return (
        np.asarray(dims, dtype=np.int64),
        np.asarray(values, dtype=np.float64),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(leaf_len, dtype=np.float64),
        np.asarray(roots, dtype=np.int64),
    )


def height_limit_for(psi_eff: int) -> int:
    return int(math.ceil(math.log2(psi_eff))) if psi_eff > 1 else 0


def fit(features, t: int = 100, psi: int = 256, seed: int = 0, workers: int = 1) -> IsolationForestModel:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if len(X) == 0:
        raise EmptyTrainingSet("cannot fit an isolation forest on zero feature vectors")
    if t < 1:
        raise BadParameter(f"need at least one tree, got t={t}")
    if psi < 2:
        raise BadParameter(f"subsample size psi must be >= 2, got {psi}")
    psi_eff = min(psi, len(X))
    limit = height_limit_for(psi_eff)

    def grow(i: int) -> ITreeNode:
        rng = tree_generator(seed, i)
        idx = draw_subsample(rng, len(X), psi_eff)
        return build_tree(X[idx], limit, rng)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trees = list(pool.map(grow, range(t)))
    else:
        trees = [grow(i) for i in range(t)]
    return IsolationForestModel(trees, psi, psi_eff, limit, seed, X.shape[1])


def score(forest: IsolationForestModel, x) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    return float(forest.scores(x[None])[0])
