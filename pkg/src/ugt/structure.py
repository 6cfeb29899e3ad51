"""Structural role features: degree sequences, DTW similarity, virtual edges,
context sets and per-node structural identity vectors."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .graph import Graph, bfs_distances

RATIO_COST = 0
ABS_COST = 1

TAG_KHOP = 1
TAG_VIRTUAL = 2
TAG_BOTH = 3


# --------------------------------------------------------------------------
# Degree sequences and DTW


def degree_sequences(g: Graph, k: int) -> list[list[np.ndarray]]:
    """Per node, ascending degree sequences for hops 0..k (hop 0 is ``[deg(v)]``)."""
    deg = g.degrees()
    out = []
    for v in range(g.n_nodes):
        dist = bfs_distances(g, v, k)
        seqs = [np.array([deg[v]], dtype=np.float64)]
        for h in range(1, k + 1):
            seqs.append(np.sort(deg[dist == h]).astype(np.float64))
        out.append(seqs)
    return out


@numba.njit(cache=True)
def _dtw(a, b, cost_kind):
    n, m = a.shape[0], b.shape[0]
    prev = np.full(m + 1, np.inf)
    cur = np.full(m + 1, np.inf)
    prev[0] = 0.0
    for i in range(1, n + 1):
        cur[0] = np.inf
        x = a[i - 1]
        for j in range(1, m + 1):
            y = b[j - 1]
            if cost_kind == 0:
                hi = max(max(x, y), 1.0)
                lo = max(min(x, y), 1.0)
                c = hi / lo - 1.0
            else:
                c = abs(x - y)
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = c + best
        prev, cur = cur, prev
    return prev[m]


def _cost_kind(cost: str) -> int:
    if cost == "ratio":
        return RATIO_COST
    if cost == "abs":
        return ABS_COST
    raise ValueError(f"unknown DTW cost {cost!r}")


def dtw_distance(a, b, cost: str = "ratio") -> float:
    """Minimal warping-path cost between two degree sequences.

    ``cost="ratio"`` uses ``max(x,y)/min(x,y) - 1`` with degrees clamped to at
    least 1; ``cost="abs"`` uses ``|x - y|``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("dtw_distance needs non-empty sequences")
    return float(_dtw(a, b, _cost_kind(cost)))


_EMPTY_STANDIN = np.zeros(1)


def structural_distance(seq_i: list[np.ndarray], seq_j: list[np.ndarray], k_dtw: int,
                        cost: str = "ratio") -> float:
    """Sum over hops 0..k_dtw of DTW between hop sequences.

    An empty shell facing a non-empty one is compared as ``[0]``; two empty
    shells contribute nothing.
    """
    kind = _cost_kind(cost)
    total = 0.0
    for h in range(min(k_dtw, len(seq_i) - 1, len(seq_j) - 1) + 1):
        a, b = seq_i[h], seq_j[h]
        if a.size == 0 and b.size == 0:
            continue
        total += _dtw(a if a.size else _EMPTY_STANDIN, b if b.size else _EMPTY_STANDIN, kind)
    return total


def structural_distance_scalar(g: Graph, vi: int, vj: int, k_dtw: int, cost: str = "ratio",
                               seqs=None) -> float:
    if seqs is None:
        seqs = degree_sequences(g, k_dtw)
    return structural_distance(seqs[vi], seqs[vj], k_dtw, cost)


def similarity_score(s_k: float, d_i: float, d_j: float, boost: bool = True) -> float:
    """``exp(-sqrt(s_k))``, plus ``exp(-1/sqrt(d_i + d_j))`` when ``boost``."""
    s = math.exp(-math.sqrt(s_k))
    if boost:
        s += math.exp(-1.0 / math.sqrt(d_i + d_j))
    return s


# --------------------------------------------------------------------------
# Virtual edges


@dataclass(frozen=True)
class VirtualEdgeSet:
    """Symmetric virtual adjacency: ``peers[v]`` sorted, ``scores[v]`` aligned."""

    peers: list
    scores: list
    k_dtw: int
    top_m: int
    n_buckets: float

    @property
    def n_nodes(self) -> int:
        return len(self.peers)

    @property
    def n_edges(self) -> int:
        return sum(len(p) for p in self.peers) // 2

    def pairs(self) -> np.ndarray:
        rows = [(v, int(u)) for v, p in enumerate(self.peers) for u in p if v < u]
        return np.asarray(rows, dtype=np.int64).reshape(-1, 2)

    def pair_scores(self) -> np.ndarray:
        vals = [float(s) for v, (p, sc) in enumerate(zip(self.peers, self.scores))
                for u, s in zip(p, sc) if v < u]
        return np.asarray(vals, dtype=np.float64)


def degree_buckets(deg: np.ndarray, n_buckets) -> np.ndarray:
    """Logarithmic degree bucket per node; a single bucket when ``n_buckets`` is infinite."""
    if n_buckets is None or math.isinf(n_buckets):
        return np.zeros(len(deg), dtype=np.int64)
    n_buckets = int(n_buckets)
    top = math.log1p(max(int(deg.max(initial=0)), 1))
    b = np.floor(n_buckets * np.log1p(deg) / top).astype(np.int64)
    return np.minimum(b, n_buckets - 1)


def candidate_pairs(g: Graph, n_buckets) -> list[np.ndarray]:
    """Per node, non-adjacent non-self peers within one degree bucket."""
    deg = g.degrees()
    exact = n_buckets is None or math.isinf(n_buckets)
    buckets = degree_buckets(deg, n_buckets)
    out = []
    for v in range(g.n_nodes):
        if exact:
            mask = np.ones(g.n_nodes, dtype=bool)
        else:
            mask = np.abs(buckets - buckets[v]) <= 1
        mask[v] = False
        mask[g.neighbors(v)] = False
        mask &= deg > 0
        out.append(np.flatnonzero(mask) if deg[v] > 0 else np.zeros(0, dtype=np.int64))
    return out


def build_virtual_edges(g: Graph, k_dtw: int = 2, top_m: int = 3, n_buckets=16,
                        threshold: float | None = None, boost: bool = True,
                        cost: str = "ratio", seqs=None) -> VirtualEdgeSet:
    """Connect each node to its ``top_m`` most structurally similar non-neighbours.

    Scores are symmetric, so each unordered pair is scored once. An edge is
    kept when either endpoint selects it. Ties in score go to the lower id.
    ``n_buckets=None``/``inf`` scores all pairs.
    """
    if top_m < 0:
        raise ValueError("top_m must be >= 0")
    n = g.n_nodes
    if top_m == 0 or n < 2:
        return VirtualEdgeSet([np.zeros(0, dtype=np.int64)] * n, [np.zeros(0)] * n,
                              k_dtw, top_m, float("inf") if n_buckets is None else n_buckets)
    if seqs is None:
        seqs = degree_sequences(g, k_dtw)
    deg = g.degrees()
    cands = candidate_pairs(g, n_buckets)
    cache: dict[tuple[int, int], float] = {}
    chosen: list[set] = [set() for _ in range(n)]
    for v in range(n):
        scored = []
        for u in cands[v]:
            u = int(u)
            key = (v, u) if v < u else (u, v)
            s = cache.get(key)
            if s is None:
                s_k = structural_distance(seqs[v], seqs[u], k_dtw, cost)
                s = similarity_score(s_k, deg[v], deg[u], boost)
                cache[key] = s
            if threshold is None or s >= threshold:
                scored.append((-s, u))
        scored.sort()
        for _, u in scored[:top_m]:
            chosen[v].add(u)
            chosen[u].add(v)
    peers, scores = [], []
    for v in range(n):
        p = np.array(sorted(chosen[v]), dtype=np.int64)
        peers.append(p)
        scores.append(np.array([cache[(min(v, u), max(v, u))] for u in p], dtype=np.float64))
    return VirtualEdgeSet(peers, scores, k_dtw, top_m,
                          float("inf") if n_buckets is None else n_buckets)


# --------------------------------------------------------------------------
# Context sets


@dataclass(frozen=True)
class ContextSet:
    """Per node: sorted context ids with provenance tags (1 khop, 2 virtual, 3 both)."""

    neighbors: list
    tags: list

    @property
    def n_nodes(self) -> int:
        return len(self.neighbors)

    def mask(self, self_fallback: bool = True) -> np.ndarray:
        """Dense boolean attention support; empty rows fall back to the node itself."""
        n = self.n_nodes
        m = np.zeros((n, n), dtype=bool)
        for v, nb in enumerate(self.neighbors):
            m[v, nb] = True
            if self_fallback and len(nb) == 0:
                m[v, v] = True
        return m

    def to_csr(self):
        offsets = np.zeros(self.n_nodes + 1, dtype=np.int64)
        offsets[1:] = np.cumsum([len(nb) for nb in self.neighbors])
        nbrs = np.concatenate(self.neighbors) if self.n_nodes else np.zeros(0, np.int64)
        tags = np.concatenate(self.tags) if self.n_nodes else np.zeros(0, np.int64)
        return offsets, nbrs.astype(np.int64), tags.astype(np.int64)

    @classmethod
    def from_csr(cls, offsets, nbrs, tags) -> "ContextSet":
        n = len(offsets) - 1
        return cls([np.asarray(nbrs[offsets[v]:offsets[v + 1]], dtype=np.int64) for v in range(n)],
                   [np.asarray(tags[offsets[v]:offsets[v + 1]], dtype=np.int64) for v in range(n)])


def build_context(g: Graph, virtual: VirtualEdgeSet | None, k_hop: int) -> ContextSet:
    """Union of k-hop neighbours and virtual peers, tagged by provenance."""
    neighbors, tags = [], []
    for v in range(g.n_nodes):
        dist = bfs_distances(g, v, k_hop)
        t = np.zeros(g.n_nodes, dtype=np.int64)
        t[dist > 0] |= TAG_KHOP
        if virtual is not None and len(virtual.peers[v]):
            t[virtual.peers[v]] |= TAG_VIRTUAL
        nb = np.flatnonzero(t)
        neighbors.append(nb)
        tags.append(t[nb])
    return ContextSet(neighbors, tags)


# --------------------------------------------------------------------------
# Structural identity


def structural_identity(g: Graph, v: int, k_id: int) -> np.ndarray:
    """``[deg; (min, max, mean, std) of shell degrees for hops 1..k_id]``.

    Population standard deviation; empty shells give zeros.
    """
    deg = g.degrees()
    dist = bfs_distances(g, v, k_id)
    out = np.zeros(1 + 4 * k_id)
    out[0] = deg[v]
    for h in range(1, k_id + 1):
        d = deg[dist == h]
        if d.size:
            out[4 * h - 3:4 * h + 1] = d.min(), d.max(), d.mean(), d.std()
    return out


def identity_matrix(g: Graph, k_id: int) -> np.ndarray:
    if g.n_nodes == 0:
        return np.zeros((0, 1 + 4 * k_id))
    return np.stack([structural_identity(g, v, k_id) for v in range(g.n_nodes)])


def pairwise_identity_distance(I_i, I_j, eps: float = 1e-6, per_component: bool = False,
                               cap: float = 1e6):
    """Inverse identity distance ``1 / (||I_i - I_j||_2 + eps)``, capped at ``cap``.

    With ``per_component`` each coordinate is inverted separately and a vector
    is returned.
    """
    I_i = np.asarray(I_i, dtype=np.float64)
    I_j = np.asarray(I_j, dtype=np.float64)
    if I_i.shape != I_j.shape:
        raise ValueError("identities must have equal length")
    if per_component:
        return np.minimum(1.0 / (np.abs(I_i - I_j) + eps), cap)
    return float(min(1.0 / (np.linalg.norm(I_i - I_j) + eps), cap))


def identity_distance_matrix(identities: np.ndarray, eps: float = 1e-6,
                             per_component: bool = False, cap: float = 1e6) -> np.ndarray:
    """All-pairs version: ``(n, n)`` or ``(n, n, q)`` when ``per_component``."""
    diff = identities[:, None, :] - identities[None, :, :]
    if per_component:
        return np.minimum(1.0 / (np.abs(diff) + eps), cap)
    return np.minimum(1.0 / (np.sqrt((diff ** 2).sum(-1)) + eps), cap)
