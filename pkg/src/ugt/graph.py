"""Immutable undirected graphs, dataset loaders and neighbourhood queries."""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, ParseError


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected simple graph in compressed adjacency (CSR) form.

    ``targets[offsets[v]:offsets[v+1]]`` holds the neighbours of ``v`` in
    ascending order. Instances are never mutated after construction.
    """

    n_nodes: int
    offsets: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "offsets", _frozen(np.asarray(self.offsets, dtype=np.int64)))
        object.__setattr__(self, "targets", _frozen(np.asarray(self.targets, dtype=np.int64)))
        if len(self.offsets) != self.n_nodes + 1:
            raise DataError("offsets must have length n_nodes + 1")
        if self.n_nodes and self.offsets[-1] != len(self.targets):
            raise DataError("offsets[n_nodes] must equal len(targets)")

    @classmethod
    def from_edges(cls, n_nodes: int, edges: Iterable[Sequence[int]]) -> "Graph":
        """Build a graph, symmetrising and dropping duplicates and self-loops."""
        e = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
        if e.size == 0:
            return cls(n_nodes, np.zeros(n_nodes + 1, dtype=np.int64), np.zeros(0, dtype=np.int64))
        e = e.reshape(-1, 2)
        if e.min() < 0 or e.max() >= n_nodes:
            raise DataError(f"edge endpoint out of range [0, {n_nodes})")
        e = e[e[:, 0] != e[:, 1]]
        both = np.concatenate([e, e[:, ::-1]], axis=0)
        both = np.unique(both, axis=0)  # sorted by (src, dst)
        counts = np.bincount(both[:, 0], minlength=n_nodes)
        offsets = np.zeros(n_nodes + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        return cls(n_nodes, offsets, both[:, 1])

    @classmethod
    def from_adjacency(cls, adj: np.ndarray) -> "Graph":
        adj = np.asarray(adj)
        src, dst = np.nonzero(adj)
        return cls.from_edges(adj.shape[0], np.stack([src, dst], axis=1))

    @property
    def n_edges(self) -> int:
        return len(self.targets) // 2

    def neighbors(self, v: int) -> np.ndarray:
        return self.targets[self.offsets[v]:self.offsets[v + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.offsets)

    def degree(self, v: int) -> int:
        return int(self.offsets[v + 1] - self.offsets[v])

    def edges(self) -> np.ndarray:
        """Undirected edge list as an ``(m, 2)`` array with ``u < v``."""
        src = np.repeat(np.arange(self.n_nodes), self.degrees())
        keep = src < self.targets
        return np.stack([src[keep], self.targets[keep]], axis=1)

    def adjacency(self, dtype=np.float64) -> np.ndarray:
        a = np.zeros((self.n_nodes, self.n_nodes), dtype=dtype)
        src = np.repeat(np.arange(self.n_nodes), self.degrees())
        a[src, self.targets] = 1
        return a

    def relabel(self, perm: Sequence[int]) -> "Graph":
        """Return the graph with node ``v`` renamed to ``perm[v]``."""
        perm = np.asarray(perm, dtype=np.int64)
        e = self.edges()
        return Graph.from_edges(self.n_nodes, perm[e] if len(e) else e)

    def has_edge(self, u: int, v: int) -> bool:
        nb = self.neighbors(u)
        i = np.searchsorted(nb, v)
        return bool(i < len(nb) and nb[i] == v)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return (self.n_nodes == other.n_nodes
                and np.array_equal(self.offsets, other.offsets)
                and np.array_equal(self.targets, other.targets))

    def __hash__(self):
        return hash((self.n_nodes, self.targets.tobytes()))

    def __repr__(self):
        return f"Graph(n_nodes={self.n_nodes}, n_edges={self.n_edges})"


@dataclass(frozen=True)
class NodeFeatures:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise DataError("feature matrix must be 2-D")
        if not np.all(np.isfinite(m)):
            raise DataError("feature matrix contains non-finite entries")
        object.__setattr__(self, "matrix", _frozen(m))

    @property
    def d0(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class LabelSet:
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        lab = np.asarray(self.labels, dtype=np.int64)
        if np.any((lab < -1) | (lab >= self.n_classes)):
            raise DataError("labels must lie in {-1, 0..C-1}")
        object.__setattr__(self, "labels", _frozen(lab))

    @property
    def labeled(self) -> np.ndarray:
        return np.flatnonzero(self.labels >= 0)


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


@dataclass(frozen=True)
class DatasetBundle:
    graph: Graph
    features: NodeFeatures
    labels: LabelSet | None = None
    splits: list = field(default_factory=list)
    name: str = "dataset"


# --------------------------------------------------------------------------
# Loaders


def load_edge_list(path, directed_hint: bool = False) -> Graph:
    """Read whitespace-separated ``u v`` pairs.

    Ids are taken as 1-based when the smallest observed id is 1, otherwise as
    0-based. Lines starting with ``#`` are ignored. ``directed_hint`` is
    accepted for interface compatibility; edges are always symmetrised.
    """
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 2:
                raise ParseError(f"expected two node ids, got {line!r}", lineno, path)
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise ParseError(f"non-integer node id in {line!r}", lineno, path) from None
            if u < 0 or v < 0:
                raise ParseError("negative node id", lineno, path)
            pairs.append((u, v))
    if not pairs:
        raise DataError(f"{path}: edge list is empty")
    e = np.asarray(pairs, dtype=np.int64)
    if e.min() == 1:
        e -= 1
    return Graph.from_edges(int(e.max()) + 1, e)


def _node_id(cell: str, g: Graph, lineno: int, path) -> int:
    try:
        v = int(cell)
    except ValueError:
        raise ParseError(f"non-integer node id {cell!r}", lineno, path) from None
    if v < 0 or v >= g.n_nodes:
        raise ParseError(f"node id {v} out of range for {g.n_nodes} nodes", lineno, path)
    return v


def load_features(path, g: Graph) -> NodeFeatures:
    """CSV ``node_id, f1..fd``; an optional header row is skipped. Missing rows are zero."""
    rows: dict[int, list[float]] = {}
    width = None
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, cells in enumerate(csv.reader(fh), start=1):
            cells = [c.strip() for c in cells]
            if not cells or not any(cells) or cells[0].startswith("#"):
                continue
            if lineno == 1 and not _is_number(cells[0]):
                continue
            v = _node_id(cells[0], g, lineno, path)
            try:
                vals = [float(c) for c in cells[1:]]
            except ValueError:
                raise ParseError("non-numeric feature cell", lineno, path) from None
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise ParseError(f"expected {width} features, got {len(vals)}", lineno, path)
            rows[v] = vals
    if width is None:
        raise DataError(f"{path}: no feature rows")
    m = np.zeros((g.n_nodes, width))
    for v, vals in rows.items():
        m[v] = vals
    return NodeFeatures(m)


def load_labels(path, g: Graph) -> LabelSet:
    """Two-column ``node_id class`` file (tab, comma or space separated). Missing → -1."""
    lab = np.full(g.n_nodes, -1, dtype=np.int64)
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 2:
                raise ParseError(f"expected 2 columns, got {len(parts)}", lineno, path)
            if lineno == 1 and not _is_number(parts[0]):
                continue
            v = _node_id(parts[0], g, lineno, path)
            try:
                lab[v] = int(parts[1])
            except ValueError:
                raise ParseError(f"non-integer class {parts[1]!r}", lineno, path) from None
            if lab[v] < 0:
                raise ParseError("class ids must be non-negative", lineno, path)
    n_classes = int(lab.max()) + 1 if (lab >= 0).any() else 0
    return LabelSet(lab, n_classes)


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def degree_onehot(g: Graph, max_degree: int = 64) -> NodeFeatures:
    """One-hot degree features; degrees above ``max_degree`` share the last bucket."""
    deg = np.minimum(g.degrees(), max_degree)
    m = np.zeros((g.n_nodes, max_degree + 1))
    m[np.arange(g.n_nodes), deg] = 1.0
    return NodeFeatures(m)


def random_splits(labels: LabelSet, n_splits: int = 10, ratios=(0.8, 0.1, 0.1),
                  seed: int = 0, max_tries: int = 1000) -> list[Split]:
    """Seeded uniform train/val/test splits over labelled nodes.

    A split whose training part misses a class is redrawn.
    """
    idx = labels.labeled
    present = np.unique(labels.labels[idx])
    rng = np.random.default_rng(seed)
    n = len(idx)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    out = []
    for _ in range(n_splits):
        for _attempt in range(max_tries):
            p = rng.permutation(idx)
            tr, va, te = p[:n_train], p[n_train:n_train + n_val], p[n_train + n_val:]
            if np.array_equal(np.unique(labels.labels[tr]), present):
                break
        else:
            raise DataError("could not draw a split containing every class")
        out.append(Split(np.sort(tr), np.sort(va), np.sort(te)))
    return out


def load_dataset(edges, features=None, labels=None, *, name: str | None = None,
                 max_degree: int = 64, n_splits: int = 10, seed: int = 0) -> DatasetBundle:
    g = load_edge_list(edges)
    feats = load_features(features, g) if features else degree_onehot(g, max_degree)
    labs = load_labels(labels, g) if labels else None
    splits = random_splits(labs, n_splits, seed=seed) if labs is not None and n_splits else []
    return DatasetBundle(g, feats, labs, splits, name or Path(edges).stem)


# --------------------------------------------------------------------------
# Neighbourhood queries


def bfs_distances(g: Graph, v: int, max_depth: int | None = None) -> np.ndarray:
    """Hop distances from ``v`` (-1 = unreachable or beyond ``max_depth``)."""
    dist = np.full(g.n_nodes, -1, dtype=np.int64)
    dist[v] = 0
    queue = deque([v])
    offsets, targets = g.offsets, g.targets
    while queue:
        u = queue.popleft()
        du = dist[u]
        if max_depth is not None and du >= max_depth:
            continue
        for w in targets[offsets[u]:offsets[u + 1]]:
            if dist[w] < 0:
                dist[w] = du + 1
                queue.append(w)
    return dist


def hop_shells(g: Graph, v: int, k: int) -> list[np.ndarray]:
    """Nodes at exactly distance 1..k from ``v``, one sorted array per hop."""
    dist = bfs_distances(g, v, k)
    return [np.flatnonzero(dist == h) for h in range(1, k + 1)]


def khop_neighbors(g: Graph, v: int, k: int) -> np.ndarray:
    """Sorted ids of all ``u != v`` within ``k`` hops of ``v``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    dist = bfs_distances(g, v, k)
    return np.flatnonzero(dist > 0)


def all_pairs_hops(g: Graph, max_depth: int | None = None) -> np.ndarray:
    """Dense matrix of BFS hop distances (-1 where unreachable/beyond depth)."""
    return np.stack([bfs_distances(g, v, max_depth) for v in range(g.n_nodes)])
