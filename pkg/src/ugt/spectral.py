"""Laplacian positional encodings and random-walk transition stacks."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .graph import Graph

JACOBI_MAX_N = 400


def laplacian(g: Graph, normalized: bool = True) -> np.ndarray:
    """``I - D^-1/2 A D^-1/2`` (isolated nodes get a zero row) or ``D - A``."""
    a = g.adjacency()
    deg = a.sum(1)
    if not normalized:
        return np.diag(deg) - a
    inv = np.zeros_like(deg)
    nz = deg > 0
    inv[nz] = 1.0 / np.sqrt(deg[nz])
    lap = -inv[:, None] * a * inv[None, :]
    lap[np.diag_indices_from(lap)] += nz.astype(np.float64)
    return lap


@numba.njit(cache=True)
def _jacobi(a, tol, max_sweeps):
    n = a.shape[0]
    a = a.copy()
    v = np.eye(n)
    scale = 0.0
    for i in range(n):
        for j in range(n):
            scale += a[i, j] * a[i, j]
    scale = max(np.sqrt(scale), 1e-300)
    for _sweep in range(max_sweeps):
        off = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                off += a[i, j] * a[i, j]
        if np.sqrt(2.0 * off) <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta >= 0:
                    t = 1.0 / (theta + np.sqrt(1.0 + theta * theta))
                else:
                    t = -1.0 / (-theta + np.sqrt(1.0 + theta * theta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                for k in range(n):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq
    w = np.empty(n)
    for i in range(n):
        w[i] = a[i, i]
    return w, v


def jacobi_eigh(m: np.ndarray, tol: float = 1e-15, max_sweeps: int = 100):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix, ascending order."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape[0] == 0:
        return np.zeros(0), np.zeros((0, 0))
    w, v = _jacobi(np.ascontiguousarray(m), tol, max_sweeps)
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def canonical_signs(vecs: np.ndarray, rule: str = "index", tol: float = 1e-8) -> np.ndarray:
    """Fix the sign of each column.

    ``"index"``: first coordinate with magnitude above ``tol`` is positive.
    ``"moment"``: positive third moment, falling back to ``"index"`` when the
    moment vanishes; unlike ``"index"`` this does not depend on node order.
    """
    out = vecs.copy()
    for c in range(out.shape[1]):
        col = out[:, c]
        s = 0.0
        if rule == "moment":
            m3 = float(np.sum(col ** 3))
            if abs(m3) > tol:
                s = np.sign(m3)
        elif rule != "index":
            raise ValueError(f"unknown sign rule {rule!r}")
        if s == 0.0:
            nz = np.flatnonzero(np.abs(col) > tol)
            s = np.sign(col[nz[0]]) if len(nz) else 1.0
        out[:, c] = s * col
    return out


@dataclass(frozen=True)
class LaplacianPE:
    matrix: np.ndarray       # n × k_pe
    eigenvalues: np.ndarray  # ascending, length k_pe


def laplacian_pe(g: Graph, k_pe: int, normalized: bool = True, method: str = "auto",
                 sign_rule: str = "index", zero_tol: float = 1e-8) -> LaplacianPE:
    """Eigenvectors of the ``k_pe`` smallest non-zero Laplacian eigenvalues.

    ``method`` is ``"jacobi"``, ``"lapack"`` or ``"auto"`` (Jacobi up to
    ``JACOBI_MAX_N`` nodes). If the graph has fewer non-zero eigenvalues than
    ``k_pe`` (many components), the remaining columns are zero.
    """
    n = g.n_nodes
    if k_pe >= n:
        raise ValueError(f"k_pe={k_pe} must be smaller than n_nodes={n}")
    lap = laplacian(g, normalized)
    if method == "auto":
        method = "jacobi" if n <= JACOBI_MAX_N else "lapack"
    if method == "jacobi":
        w, v = jacobi_eigh(lap)
    elif method == "lapack":
        w, v = np.linalg.eigh(lap)
    else:
        raise ValueError(f"unknown eigensolver {method!r}")
    keep = np.flatnonzero(w > zero_tol)[:k_pe]
    vecs = canonical_signs(v[:, keep], sign_rule)
    vals = w[keep]
    if len(keep) < k_pe:
        vecs = np.concatenate([vecs, np.zeros((n, k_pe - len(keep)))], axis=1)
        vals = np.concatenate([vals, np.zeros(k_pe - len(keep))])
    return LaplacianPE(vecs, vals)


def flip_pattern(k: int, rng: np.random.Generator) -> np.ndarray:
    return np.where(rng.random(k) < 0.5, -1.0, 1.0)


def sign_flip(pe, rng) -> np.ndarray:
    """Multiply each PE column independently by ±1 with probability 1/2."""
    mat = pe.matrix if isinstance(pe, LaplacianPE) else np.asarray(pe)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return mat * flip_pattern(mat.shape[1], rng)[None, :]


# --------------------------------------------------------------------------
# Transition probabilities


@dataclass(frozen=True)
class TransitionStack:
    mats: np.ndarray  # (p, n, n); mats[s-1] is the s-step matrix

    @property
    def p(self) -> int:
        return self.mats.shape[0]

    def pair_features(self) -> np.ndarray:
        """``(n, n, p)`` view: transition probabilities for steps 1..p per pair."""
        return np.moveaxis(self.mats, 0, -1)


def transition_matrix(g: Graph) -> np.ndarray:
    a = g.adjacency()
    deg = a.sum(1, keepdims=True)
    return np.divide(a, deg, out=np.zeros_like(a), where=deg > 0)


def transition_stack(g: Graph, p: int) -> TransitionStack:
    """Row-normalised adjacency and its powers up to ``p``."""
    if p < 1:
        raise ValueError("p must be >= 1")
    a1 = transition_matrix(g)
    mats = [a1]
    for _ in range(p - 1):
        mats.append(mats[-1] @ a1)
    return TransitionStack(np.stack(mats))


@dataclass(frozen=True)
class LogTargetStack:
    mats: np.ndarray
    neg_count: int


def log_scale_targets(stack: TransitionStack, neg_count: int, floor: float = 0.0,
                      normalize: str = "column") -> LogTargetStack:
    """Shifted log transition targets, clipped below ``floor`` to zero.

    ``log(A_ij / sum_t A_tj) - log(neg_count / n)`` with ``normalize="column"``;
    ``"row"`` divides by the row sum instead. Zero entries and zero columns
    map to 0.
    """
    if neg_count < 1:
        raise ValueError("neg_count must be >= 1")
    if normalize not in ("column", "row"):
        raise ValueError(f"unknown normalisation {normalize!r}")
    n = stack.mats.shape[-1]
    shift = np.log(neg_count / n)
    out = np.zeros_like(stack.mats)
    for s, a in enumerate(stack.mats):
        tot = a.sum(0, keepdims=True) if normalize == "column" else a.sum(1, keepdims=True)
        pos = (a > 0) & (tot > 0)
        ratio = np.divide(a, tot, out=np.ones_like(a), where=pos)
        val = np.where(pos, np.log(ratio) - shift, 0.0)
        val[val < floor] = 0.0
        out[s] = val
    return LogTargetStack(out, neg_count)
