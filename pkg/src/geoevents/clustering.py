"""BIRCH clustering over tweet vectors with an adaptive radius threshold.

Leaf entries of the CF-tree are the final clusters; there is no global
refinement pass.  Points are inserted in the order given, so callers pass
vectors sorted by tweet timestamp.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .embedding import TweetVector

log = logging.getLogger(__name__)

RADIUS_SLACK = 1e-9
BRANCHING_FACTOR = 50
LEAF_CAPACITY = 50


class DimensionError(ValueError):
    pass


@dataclass
class CFEntry:
    """Clustering feature: count, linear sum and sum of squared norms."""

    n: int
    ls: np.ndarray
    ss: float

    @classmethod
    def from_point(cls, x) -> "CFEntry":
        x = np.asarray(x, dtype=np.float64)
        return cls(1, x.copy(), float(x @ x))

    @classmethod
    def from_points(cls, xs) -> "CFEntry":
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        return cls(len(xs), xs.sum(axis=0), float(np.einsum("ij,ij->", xs, xs)))

    @property
    def centroid(self) -> np.ndarray:
        return self.ls / self.n

    @property
    def radius_sq(self) -> float:
        c = self.centroid
        return self.ss / self.n - float(c @ c)

    @property
    def radius(self) -> float:
        return float(np.sqrt(max(self.radius_sq, 0.0)))

    def absorb(self, other: "CFEntry") -> None:
        self.n += other.n
        self.ls = self.ls + other.ls
        self.ss += other.ss


def cf_merge(a: CFEntry, b: CFEntry) -> CFEntry:
    if a.n < 1 or b.n < 1:
        raise ValueError("CF entries must hold at least one point")
    if a.ls.shape != b.ls.shape:
        raise DimensionError(f"dimension mismatch: {a.ls.shape} vs {b.ls.shape}")
    return CFEntry(a.n + b.n, a.ls + b.ls, a.ss + b.ss)


def merged_radius(a: CFEntry, b: CFEntry) -> float:
    n = a.n + b.n
    ls = a.ls + b.ls
    c = ls / n
    return float(np.sqrt(max((a.ss + b.ss) / n - float(c @ c), 0.0)))


class _LeafEntry:
    __slots__ = ("cf", "members")

    def __init__(self, cf: CFEntry, member: int):
        self.cf = cf
        self.members = [member]


class _Node:
    __slots__ = ("leaf", "entries", "children", "cf", "cents")

    def __init__(self, leaf: bool):
        self.leaf = leaf
        self.entries: list[_LeafEntry] = []   # leaf nodes
        self.children: list[_Node] = []       # internal nodes
        self.cf: CFEntry | None = None
        self.cents: np.ndarray | None = None  # cached item centroids, rebuilt lazily

    def items(self):
        return self.entries if self.leaf else self.children

    def recompute(self):
        self.cents = None
        cfs = [e.cf for e in self.items()]
        n = sum(c.n for c in cfs)
        self.cf = CFEntry(n, np.sum([c.ls for c in cfs], axis=0), float(sum(c.ss for c in cfs)))


def _closest(node: _Node, x: np.ndarray) -> int:
    if node.cents is None:
        node.cents = np.array([it.cf.centroid for it in node.items()])
    diff = node.cents - x
    return int(np.argmin(np.einsum("ij,ij->i", diff, diff)))


def _split_items(items):
    """Split by the farthest pair of centroids; each item goes to the nearer seed."""
    cents = np.array([it.cf.centroid for it in items])
    sq = np.einsum("ij,ij->i", cents, cents)
    d = sq[:, None] + sq[None, :] - 2 * cents @ cents.T
    i, j = np.unravel_index(int(np.argmax(d)), d.shape)
    a, b = [], []
    for k, it in enumerate(items):
        if k == i:
            a.append(it)
        elif k == j:
            b.append(it)
        elif d[k, i] <= d[k, j]:
            a.append(it)
        else:
            b.append(it)
    return a, b


class CFTree:
    def __init__(self, threshold: float, branching: int = BRANCHING_FACTOR,
                 leaf_capacity: int = LEAF_CAPACITY):
        if not threshold > 0:
            raise ValueError("threshold must be positive")
        self.threshold = float(threshold)
        self.branching = branching
        self.leaf_capacity = leaf_capacity
        self.root = _Node(leaf=True)
        self.dim: int | None = None
        self._leaf_entries: list[_LeafEntry] = []

    def insert(self, x: np.ndarray, member: int) -> None:
        x = np.asarray(x, dtype=np.float64)
        if self.dim is None:
            self.dim = x.shape[0]
        elif x.shape != (self.dim,):
            raise DimensionError(f"expected dimension {self.dim}, got {x.shape}")
        point = CFEntry.from_point(x)
        split = self._insert(self.root, x, point, member)
        if split is not None:
            new_root = _Node(leaf=False)
            new_root.children = list(split)
            new_root.recompute()
            self.root = new_root

    def _insert(self, node: _Node, x, point: CFEntry, member: int):
        if node.leaf:
            if node.entries:
                k = _closest(node, x)
                e = node.entries[k]
                if merged_radius(e.cf, point) <= self.threshold:
                    e.cf.absorb(point)
                    e.members.append(member)
                    node.cf.absorb(point)
                    node.cents[k] = e.cf.centroid
                    return None
            entry = _LeafEntry(CFEntry(point.n, point.ls.copy(), point.ss), member)
            self._leaf_entries.append(entry)
            node.entries.append(entry)
            if len(node.entries) > self.leaf_capacity:
                return self._split(node)
            if node.cf is None:
                node.recompute()
            else:
                node.cf.absorb(point)
                node.cents = np.vstack([node.cents, entry.cf.centroid])
            return None
        k = _closest(node, x)
        split = self._insert(node.children[k], x, point, member)
        if split is not None:
            node.children[k:k + 1] = list(split)
            if len(node.children) > self.branching:
                return self._split(node)
            node.recompute()
        else:
            node.cf.absorb(point)
            node.cents[k] = node.children[k].cf.centroid
        return None

    def _split(self, node: _Node):
        a_items, b_items = _split_items(node.items())
        out = []
        for items in (a_items, b_items):
            n = _Node(node.leaf)
            if node.leaf:
                n.entries = items
            else:
                n.children = items
            n.recompute()
            out.append(n)
        return out

    def clusters(self) -> list[_LeafEntry]:
        """Leaf entries ordered by creation, i.e. by first member."""
        return list(self._leaf_entries)


@dataclass
class ClusterAssignment:
    labels: dict[str, int]
    entries: list[CFEntry]
    members: list[list[str]]
    threshold: float

    @property
    def n_clusters(self) -> int:
        return len(self.entries)

    def sizes(self) -> list[int]:
        return [e.n for e in self.entries]


def _check_vectors(vectors: Sequence[TweetVector]) -> np.ndarray:
    if not vectors:
        return np.zeros((0, 0))
    dims = {np.shape(v.vector) for v in vectors}
    if len(dims) != 1:
        raise DimensionError(f"mixed vector dimensions: {sorted(dims)}")
    return np.array([v.vector for v in vectors], dtype=np.float64)


def birch_cluster(vectors: Sequence[TweetVector], threshold: float,
                  branching: int = BRANCHING_FACTOR,
                  leaf_capacity: int = LEAF_CAPACITY) -> ClusterAssignment:
    X = _check_vectors(vectors)
    tree = CFTree(threshold, branching, leaf_capacity)
    for i, x in enumerate(X):
        tree.insert(x, i)
    entries = tree.clusters()
    labels: dict[str, int] = {}
    members = []
    for label, e in enumerate(entries):
        ids = [vectors[i].tweet_id for i in e.members]
        members.append(ids)
        for tid in ids:
            labels[tid] = label
    return ClusterAssignment(labels, [e.cf for e in entries], members, float(threshold))


@dataclass
class ThresholdSearch:
    threshold: float
    assignment: ClusterAssignment
    converged: bool
    steps: int
    stop_reason: str


SMALL_CLUSTER_SIZE = 10
SMALL_FRACTION_LIMIT = 0.05
LARGEST_FRACTION_LIMIT = 0.5


def stop_reason(assignment: ClusterAssignment, total: int) -> str | None:
    sizes = assignment.sizes()
    small = sum(s for s in sizes if s < SMALL_CLUSTER_SIZE)
    if small / total < SMALL_FRACTION_LIMIT:
        return "small-clusters"
    if max(sizes) / total > LARGEST_FRACTION_LIMIT:
        return "largest-cluster"
    return None


def default_step(vectors: Sequence[TweetVector], seed: int = 0, sample: int = 200) -> float:
    """5% of the median pairwise distance over a seeded sample of at most ``sample`` points."""
    X = _check_vectors(vectors)
    if len(X) < 2:
        return 1e-3
    rng = np.random.default_rng(seed)
    if len(X) > sample:
        X = X[np.sort(rng.choice(len(X), sample, replace=False))]
    sq = np.einsum("ij,ij->i", X, X)
    d2 = sq[:, None] + sq[None, :] - 2 * X @ X.T
    iu = np.triu_indices(len(X), 1)
    med = float(np.median(np.sqrt(np.maximum(d2[iu], 0.0))))
    return 0.05 * med if med > 0 else 1e-3


def adaptive_threshold(vectors: Sequence[TweetVector], step: float | None = None,
                       cap: int = 100, seed: int = 0) -> ThresholdSearch:
    """Grow the radius threshold by ``step`` until a stop rule fires.

    Stops at the first threshold where fewer than 5% of items sit in
    clusters smaller than 10, or more than half the items share the largest
    cluster.  Each step re-clusters from scratch.
    """
    if not vectors:
        raise ValueError("adaptive_threshold needs at least one vector")
    if step is None:
        step = default_step(vectors, seed)
    if not step > 0:
        raise ValueError("step must be positive")
    total = len(vectors)
    assignment = None
    for k in range(1, cap + 1):
        threshold = step * k
        assignment = birch_cluster(vectors, threshold)
        reason = stop_reason(assignment, total)
        if reason is not None:
            return ThresholdSearch(threshold, assignment, True, k, reason)
    log.warning("threshold search did not converge within %d steps", cap)
    return ThresholdSearch(step * cap, assignment, False, cap, "cap")
