"""Partition quality metrics, accuracy, and k-means clustering."""

from __future__ import annotations

import numpy as np

from .graph import Graph


def _labels(partition, n: int) -> np.ndarray:
    p = np.asarray(partition)
    if p.shape != (n,):
        raise ValueError(f"partition must assign all {n} nodes")
    _, inv = np.unique(p, return_inverse=True)
    return inv


def modularity_Q(g: Graph, partition) -> float:
    """Newman modularity of a hard partition; 0 for an edgeless graph."""
    lab = _labels(partition, g.n_nodes)
    two_m = float(2 * g.n_edges)
    if two_m == 0:
        return 0.0
    deg = g.degrees().astype(np.float64)
    e = g.edges()
    k = lab.max() + 1 if len(lab) else 0
    intra = np.bincount(lab[e[:, 0]][lab[e[:, 0]] == lab[e[:, 1]]], minlength=k).astype(float)
    vol = np.bincount(lab, weights=deg, minlength=k)
    return float(np.sum(2.0 * intra / two_m - (vol / two_m) ** 2))


def conductance_per_cluster(g: Graph, partition) -> np.ndarray:
    """``cut(S) / min(vol(S), 2m - vol(S))`` per cluster; 0 when the denominator is 0."""
    lab = _labels(partition, g.n_nodes)
    k = lab.max() + 1 if len(lab) else 0
    deg = g.degrees().astype(np.float64)
    two_m = deg.sum()
    e = g.edges()
    crossing = lab[e[:, 0]] != lab[e[:, 1]]
    cut = (np.bincount(lab[e[crossing, 0]], minlength=k)
           + np.bincount(lab[e[crossing, 1]], minlength=k)).astype(float)
    vol = np.bincount(lab, weights=deg, minlength=k)
    denom = np.minimum(vol, two_m - vol)
    return np.divide(cut, denom, out=np.zeros(k), where=denom > 0)


def conductance_C(g: Graph, partition) -> float:
    """Cluster-size-weighted average conductance."""
    lab = _labels(partition, g.n_nodes)
    if g.n_nodes == 0:
        return 0.0
    per = conductance_per_cluster(g, lab)
    sizes = np.bincount(lab, minlength=len(per))
    return float(np.sum(per * sizes) / g.n_nodes)


def accuracy(pred, truth, mask=None) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    idx = np.arange(len(truth)) if mask is None else np.asarray(mask)
    if idx.dtype == bool:
        idx = np.flatnonzero(idx)
    if len(idx) == 0:
        raise ValueError("accuracy over an empty mask")
    return float(np.mean(pred[idx] == truth[idx]))


# --------------------------------------------------------------------------
# k-means


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        tot = d2.sum()
        i = rng.choice(n, p=d2 / tot) if tot > 0 else rng.integers(n)
        centers.append(x[i])
        d2 = np.minimum(d2, ((x - x[i]) ** 2).sum(1))
    return np.array(centers)


def _lloyd(x, centers, rng, max_iter, tol):
    for _ in range(max_iter):
        dist = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        lab = dist.argmin(1)
        new = centers.copy()
        for c in range(len(centers)):
            members = x[lab == c]
            if len(members):
                new[c] = members.mean(0)
            else:
                # re-seed an empty cluster at the point farthest from its centre
                far = dist[np.arange(len(x)), lab].argmax()
                new[c] = x[far]
        shift = np.abs(new - centers).max()
        centers = new
        if shift <= tol:
            break
    dist = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    lab = dist.argmin(1)
    return lab, centers, float(dist[np.arange(len(x)), lab].sum())


def kmeans(x: np.ndarray, k: int, n_init: int = 50, max_iter: int = 300, tol: float = 1e-10,
           seed: int = 0) -> tuple[np.ndarray, np.ndarray, float]:
    """Lloyd's algorithm with k-means++ seeding; best inertia of ``n_init`` restarts."""
    x = np.asarray(x, dtype=np.float64)
    if not 1 <= k <= len(x):
        raise ValueError(f"k={k} must lie in [1, {len(x)}]")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        lab, cen, inertia = _lloyd(x, kmeans_pp_init(x, k, rng), rng, max_iter, tol)
        if best is None or inertia < best[2] - 1e-12:
            best = (lab, cen, inertia)
    return best
