"""Small deterministic graphs used by tests, the CLI and sanity runs."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import DataError
from .graph import DatasetBundle, Graph, LabelSet, bfs_distances, degree_onehot, load_dataset, random_splits

BRAZIL_FILES = ("brazil-airports.edgelist", "labels-brazil-airports.txt")


def path_graph(n: int = 3) -> Graph:
    return Graph.from_edges(n, [(i, i + 1) for i in range(n - 1)])


def cycle_graph(n: int) -> Graph:
    return Graph.from_edges(n, [(i, (i + 1) % n) for i in range(n)])


def complete_graph(n: int) -> Graph:
    return Graph.from_edges(n, [(i, j) for i in range(n) for j in range(i + 1, n)])


def two_triangles() -> Graph:
    return Graph.from_edges(6, [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)])


def triangles_with_bridge() -> Graph:
    """Two triangles plus the edge 2-3; cutting that edge gives conductance 1/7."""
    return Graph.from_edges(6, [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5), (2, 3)])


def planted_partition(sizes=(15, 15), p_in: float = 0.4, p_out: float = 0.03,
                      seed: int = 0) -> tuple[Graph, np.ndarray]:
    """Stochastic block model, redrawn until connected."""
    rng = np.random.default_rng(seed)
    block = np.repeat(np.arange(len(sizes)), sizes)
    n = len(block)
    iu, ju = np.triu_indices(n, 1)
    prob = np.where(block[iu] == block[ju], p_in, p_out)
    while True:
        keep = rng.random(len(iu)) < prob
        g = Graph.from_edges(n, np.stack([iu[keep], ju[keep]], axis=1))
        if np.all(bfs_distances(g, 0) >= 0):
            return g, block


def _bundle(g: Graph, labels: np.ndarray | None, name: str, seed: int = 0) -> DatasetBundle:
    feats = degree_onehot(g, int(g.degrees().max(initial=0)))
    if labels is None:
        return DatasetBundle(g, feats, None, [], name)
    ls = LabelSet(np.asarray(labels, dtype=np.int64), int(np.max(labels)) + 1)
    return DatasetBundle(g, feats, ls, random_splits(ls, 10, seed=seed), name)


def two_community_bundle(seed: int = 0) -> DatasetBundle:
    """30 nodes in two planted communities of 15."""
    g, block = planted_partition(seed=seed)
    return _bundle(g, block, "two-community", seed)


def two_clique_bundle(sizes=(5, 7), seed: int = 0) -> DatasetBundle:
    """Disjoint cliques of different sizes; the label is the clique id."""
    a, b = sizes
    edges = [(i, j) for i in range(a) for j in range(i + 1, a)]
    edges += [(a + i, a + j) for i in range(b) for j in range(i + 1, b)]
    g = Graph.from_edges(a + b, edges)
    return _bundle(g, np.repeat([0, 1], sizes), "two-clique", seed)


def p3_bundle() -> DatasetBundle:
    return _bundle(path_graph(3), None, "p3")


def brazil_bundle(root=None, seed: int = 0) -> DatasetBundle:
    """Brazil air-traffic network (131 airports, 4 activity classes), read from disk.

    The files are not redistributed with the package. ``root`` defaults to
    ``$UGT_BRAZIL_DIR`` and must hold the struc2vec-format edge list and label
    file named in ``BRAZIL_FILES``. Features are one-hot degrees.
    """
    root = Path(root or os.environ.get("UGT_BRAZIL_DIR", "data/brazil"))
    edges, labels = (root / f for f in BRAZIL_FILES)
    missing = [str(p) for p in (edges, labels) if not p.exists()]
    if missing:
        raise DataError("Brazil air-traffic data not found: " + ", ".join(missing)
                        + " (set UGT_BRAZIL_DIR)")
    return load_dataset(edges, labels=labels, seed=seed, name="brazil")


BUILTIN = {
    "brazil": brazil_bundle,
    "p3": p3_bundle,
    "two-clique": two_clique_bundle,
    "two-community": two_community_bundle,
    "two-triangles": lambda: _bundle(two_triangles(), np.array([0, 0, 0, 1, 1, 1]), "two-triangles"),
}


def builtin_bundle(name: str) -> DatasetBundle:
    try:
        return BUILTIN[name]()
    except KeyError:
        raise KeyError(f"unknown built-in dataset {name!r}; choose from {sorted(BUILTIN)}") from None
