"""Point-region quad-tree over tweet coordinates.

Cells are half-open on their upper edges, ``[min, mid)`` / ``[mid, max]``,
except along the outer edge of the region, which is closed so every point
of the region has exactly one home.  Children are ordered
SW, SE, NW, NE (index = 2 * north + east).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .core_types import Bounds, Tweet


class PlacementError(ValueError):
    """A tweet lies outside the quad-tree region."""


@dataclass
class QuadTreeNode:
    bounds: Bounds
    depth: int
    children: list["QuadTreeNode"] = field(default_factory=list)
    tweet_ids: list[str] = field(default_factory=list)
    # set when an over-full leaf could not be split because all its points coincide
    degenerate: bool = False

    @property
    def is_leaf(self) -> bool:
        return not self.children


def _mid(bounds: Bounds) -> tuple[float, float]:
    return (bounds[0] + bounds[1]) / 2.0, (bounds[2] + bounds[3]) / 2.0


def quadrant_index(bounds: Bounds, lat: float, lon: float) -> int:
    mlat, mlon = _mid(bounds)
    return 2 * (lat >= mlat) + (lon >= mlon)


def child_bounds(bounds: Bounds, index: int) -> Bounds:
    lat0, lat1, lon0, lon1 = bounds
    mlat, mlon = _mid(bounds)
    north, east = divmod(index, 2)
    return (mlat if north else lat0, lat1 if north else mlat,
            mlon if east else lon0, lon1 if east else mlon)


def in_region(region: Bounds, lat: float, lon: float) -> bool:
    return region[0] <= lat <= region[1] and region[2] <= lon <= region[3]


class QuadTree:
    """Quad-tree built by sequential insertion.

    A leaf holding ``split_threshold`` tweets splits on the next insertion
    unless it is at ``max_depth`` or all of its points coincide.
    """

    def __init__(self, region: Bounds, max_depth: int = 30, split_threshold: int = 50):
        if max_depth < 0 or split_threshold < 1:
            raise ValueError("max_depth must be >= 0 and split_threshold >= 1")
        self.region = tuple(float(v) for v in region)
        self.max_depth = max_depth
        self.split_threshold = split_threshold
        self.root = QuadTreeNode(self.region, 0)
        self._coords: dict[str, tuple[float, float]] = {}

    def _check(self, tweet: Tweet):
        if not in_region(self.region, tweet.lat, tweet.lon):
            raise PlacementError(f"tweet {tweet.id} at ({tweet.lat}, {tweet.lon}) "
                                 f"outside region {self.region}")

    def insert(self, tweet: Tweet) -> None:
        self._check(tweet)
        if tweet.id in self._coords:
            raise ValueError(f"duplicate tweet id {tweet.id}")
        self._coords[tweet.id] = (tweet.lat, tweet.lon)
        node = self.root
        while not node.is_leaf:
            node = node.children[quadrant_index(node.bounds, tweet.lat, tweet.lon)]
        node.tweet_ids.append(tweet.id)
        if len(node.tweet_ids) > self.split_threshold and node.depth < self.max_depth:
            self._split(node)

    def _split(self, node: QuadTreeNode) -> None:
        # iterative: a split may leave every point in one child, which then splits again
        stack = [node]
        while stack:
            n = stack.pop()
            coords = {self._coords[i] for i in n.tweet_ids}
            if len(coords) == 1:
                n.degenerate = True
                continue
            n.degenerate = False
            n.children = [QuadTreeNode(child_bounds(n.bounds, k), n.depth + 1) for k in range(4)]
            for tid in n.tweet_ids:
                lat, lon = self._coords[tid]
                n.children[quadrant_index(n.bounds, lat, lon)].tweet_ids.append(tid)
            n.tweet_ids = []
            for c in n.children:
                if len(c.tweet_ids) > self.split_threshold and c.depth < self.max_depth:
                    stack.append(c)

    def leaves(self) -> list[QuadTreeNode]:
        out, stack = [], [self.root]
        while stack:
            n = stack.pop()
            if n.is_leaf:
                out.append(n)
            else:
                stack.extend(reversed(n.children))
        return out

    def nodes(self) -> Iterable[QuadTreeNode]:
        stack = [self.root]
        while stack:
            n = stack.pop()
            yield n
            stack.extend(reversed(n.children))

    @property
    def depth(self) -> int:
        return max(n.depth for n in self.nodes())

    def path(self, lat: float, lon: float) -> list[QuadTreeNode]:
        """Nodes from the root down to the leaf whose cell holds (lat, lon)."""
        if not in_region(self.region, lat, lon):
            raise PlacementError(f"point ({lat}, {lon}) outside region {self.region}")
        node = self.root
        out = [node]
        while not node.is_leaf:
            node = node.children[quadrant_index(node.bounds, lat, lon)]
            out.append(node)
        return out

    def dump(self) -> str:
        lines = []

        def rec(n: QuadTreeNode):
            count = sum(len(x.tweet_ids) for x in _subtree(n))
            b = ", ".join(f"{v:.6f}" for v in n.bounds)
            flag = " degenerate" if n.degenerate else ""
            lines.append(f"{'  ' * n.depth}depth={n.depth} bounds=({b}) count={count}{flag}")
            for c in n.children:
                rec(c)

        rec(self.root)
        return "\n".join(lines)


def _subtree(node: QuadTreeNode):
    stack = [node]
    while stack:
        n = stack.pop()
        yield n
        stack.extend(n.children)


def build(tweets: Sequence[Tweet], region: Bounds, max_depth: int = 30,
          split_threshold: int = 50) -> QuadTree:
    tree = QuadTree(region, max_depth, split_threshold)
    for t in tweets:
        tree._check(t)
    for t in tweets:
        tree.insert(t)
    return tree


def locate(tree: QuadTree, tweet: Tweet, level: int) -> Bounds:
    """Bounds of the level-``level`` cell on the tweet's path, clamped to the deepest node."""
    if level < 0:
        raise ValueError("level must be >= 0")
    try:
        nodes = tree.path(tweet.lat, tweet.lon)
    except PlacementError as exc:
        raise PlacementError(f"tweet {tweet.id}: {exc}") from None
    return nodes[min(level, len(nodes) - 1)].bounds


def cell_key(tree: QuadTree, tweet: Tweet, level: int) -> tuple[str, Bounds]:
    """Quadrant-digit path and bounds of the tweet's cell at ``level`` (clamped)."""
    try:
        nodes = tree.path(tweet.lat, tweet.lon)
    except PlacementError as exc:
        raise PlacementError(f"tweet {tweet.id}: {exc}") from None
    nodes = nodes[:level + 1]
    code = "".join(str(quadrant_index(a.bounds, tweet.lat, tweet.lon)) for a in nodes[:-1])
    return code, nodes[-1].bounds


def partition_cluster_by_level(tree: QuadTree, tweets: Sequence[Tweet],
                               level: int) -> list[tuple[Bounds, list[Tweet]]]:
    """Group ``tweets`` by the quad-tree cell they fall into at ``level``.

    Groups come back ordered by quadrant path, members in input order.
    """
    groups: dict[str, tuple[Bounds, list[Tweet]]] = {}
    for t in tweets:
        code, bounds = cell_key(tree, t, level)
        groups.setdefault(code, (bounds, []))[1].append(t)
    return [groups[k] for k in sorted(groups)]
