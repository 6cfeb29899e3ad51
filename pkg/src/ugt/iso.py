"""Graph-isomorphism expressivity harness: graph6 I/O, fingerprints, pair counting."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import autograd as ag
from .errors import DataError, ParseError
from .graph import Graph, degree_onehot
from .model import UGTConfig, forward, init_encoder, prepare_inputs, preprocess

# --------------------------------------------------------------------------
# graph6


def _n_to_bytes(n: int) -> bytes:
    if n < 63:
        return bytes([n + 63])
    if n < 258048:
        return bytes([126, 63 + (n >> 12), 63 + ((n >> 6) & 63), 63 + (n & 63)])
    raise ValueError("graph6 supports at most 258047 nodes")


def encode_graph6(g: Graph) -> str:
    """Upper triangle, column by column, packed six bits per printable byte."""
    n = g.n_nodes
    adj = g.adjacency() > 0
    bits = [adj[i, j] for j in range(1, n) for i in range(j)]
    bits += [False] * (-len(bits) % 6)
    body = bytes(63 + int("".join("1" if b else "0" for b in bits[k:k + 6]), 2)
                 for k in range(0, len(bits), 6))
    return (_n_to_bytes(n) + body).decode("ascii")


def decode_graph6(s: str, line: int | None = None, path=None) -> Graph:
    s = s.strip()
    if s.startswith(">>graph6<<"):
        s = s[10:]
    data = s.encode("ascii", errors="replace")
    if not data:
        raise ParseError("empty graph6 string", line, path)
    for b in data:
        if not 63 <= b <= 126:
            raise ParseError(f"invalid graph6 byte {b!r}", line, path)
    if data[0] == 126:
        if len(data) < 4 or data[1] == 126:
            raise ParseError("unsupported graph6 size prefix", line, path)
        n = ((data[1] - 63) << 12) | ((data[2] - 63) << 6) | (data[3] - 63)
        body = data[4:]
    else:
        n, body = data[0] - 63, data[1:]
    n_bits = n * (n - 1) // 2
    if len(body) != (n_bits + 5) // 6:
        raise ParseError(f"graph6 body has {len(body)} bytes, expected {(n_bits + 5) // 6}", line, path)
    bits = np.unpackbits(np.frombuffer(bytes(b - 63 for b in body), dtype=np.uint8)[:, None], axis=1)
    bits = bits[:, 2:].ravel()[:n_bits]
    cols = np.concatenate([np.full(j, j) for j in range(1, n)]) if n > 1 else np.zeros(0, int)
    rows = np.concatenate([np.arange(j) for j in range(1, n)]) if n > 1 else np.zeros(0, int)
    on = bits.astype(bool)
    return Graph.from_edges(n, np.stack([rows[on], cols[on]], axis=1))


@dataclass
class GraphCorpus:
    graphs: list
    name: str

    def __len__(self):
        return len(self.graphs)

    def duplicated(self) -> "GraphCorpus":
        return GraphCorpus([g for g in self.graphs for _ in range(2)], self.name + "-dup")

    def to_graph6(self) -> str:
        return "".join(encode_graph6(g) + "\n" for g in self.graphs)


def parse_graph6(path, name: str | None = None) -> GraphCorpus:
    """One graph per non-blank line; a bad line raises :class:`ParseError` with its number."""
    path = Path(path)
    graphs = []
    for i, raw in enumerate(path.read_text(encoding="ascii", errors="replace").splitlines(), 1):
        if raw.strip():
            graphs.append(decode_graph6(raw, i, path))
    return GraphCorpus(graphs, name or path.stem)


# --------------------------------------------------------------------------
# Fixtures


def decalin() -> Graph:
    """Two hexagons sharing the edge 0-1."""
    ring_a = [0, 2, 3, 4, 5, 1]
    ring_b = [0, 6, 7, 8, 9, 1]
    edges = [(ring[i], ring[i + 1]) for ring in (ring_a, ring_b) for i in range(5)] + [(0, 1)]
    return Graph.from_edges(10, edges)


def bicyclopentyl() -> Graph:
    """Two pentagons joined by the bridge 0-5."""
    edges = [(i, (i + 1) % 5) for i in range(5)] + [(5 + i, 5 + (i + 1) % 5) for i in range(5)]
    return Graph.from_edges(10, edges + [(0, 5)])


def rook_graph(m: int = 4) -> Graph:
    """Line graph of K_{m,m}: cells of an m×m board, adjacent when sharing a row or column."""
    edges = [(r * m + c, r2 * m + c2) for r in range(m) for c in range(m)
             for r2 in range(m) for c2 in range(m)
             if (r, c) < (r2, c2) and (r == r2 or c == c2)]
    return Graph.from_edges(m * m, edges)


def shrikhande() -> Graph:
    """Cayley graph of Z4×Z4 with connection set {±(1,0), ±(0,1), ±(1,1)}."""
    gens = [(1, 0), (3, 0), (0, 1), (0, 3), (1, 1), (3, 3)]
    edges = {tuple(sorted((a * 4 + b, ((a + x) % 4) * 4 + (b + y) % 4)))
             for a in range(4) for b in range(4) for x, y in gens}
    return Graph.from_edges(16, sorted(edges))


def sr16622() -> GraphCorpus:
    return GraphCorpus([shrikhande(), rook_graph(4)], "sr16622")


def bundled_names() -> list[str]:
    return sorted(p.name[:-3] for p in (resources.files("ugt") / "data").iterdir() if p.name.endswith(".g6"))


def bundled_corpus(name: str) -> GraphCorpus:
    """Corpora shipped under ``ugt/data``.

    ``sr25-partial`` holds five pairwise non-isomorphic SRG(25,12,5,6); the full
    fifteen-graph family is not shipped and must be supplied as a graph6 file.
    """
    if name not in bundled_names():
        raise DataError(f"no bundled corpus {name!r}; available: {', '.join(bundled_names())}")
    ref = resources.files("ugt") / "data" / f"{name}.g6"
    with resources.as_file(ref) as p:
        return parse_graph6(p, name)


def molecule_pair() -> GraphCorpus:
    return GraphCorpus([decalin(), bicyclopentyl()], "decalin-bicyclopentyl")


# --------------------------------------------------------------------------
# 1-WL colour refinement (labelling oracle)


def wl_equivalent(a: Graph, b: Graph) -> bool:
    """Whether 1-WL fails to separate ``a`` and ``b`` (run jointly on the disjoint union)."""
    if a.n_nodes != b.n_nodes:
        return False
    n = a.n_nodes
    edges = np.concatenate([a.edges(), b.edges() + n]) if a.n_edges + b.n_edges else np.zeros((0, 2), int)
    u = Graph.from_edges(2 * n, edges)
    colors = np.zeros(2 * n, dtype=np.int64)
    for _ in range(2 * n):
        sig = [(int(colors[v]), tuple(sorted(int(colors[w]) for w in u.neighbors(v)))) for v in range(2 * n)]
        palette = {s: i for i, s in enumerate(sorted(set(sig)))}
        new = np.array([palette[s] for s in sig])
        stable = len(palette) == len(np.unique(colors))
        colors = new
        if stable:
            break
    return sorted(colors[:n].tolist()) == sorted(colors[n:].tolist())


# --------------------------------------------------------------------------
# Fingerprints and pair counting


def iso_config(cfg: UGTConfig | None = None, **overrides) -> UGTConfig:
    """Force the settings the harness relies on: dense attention, order-free PE signs."""
    cfg = cfg or UGTConfig()
    return replace(cfg, attention="dense", sign_rule="moment", dropout=0.0, **overrides)


def _fingerprint(g: Graph, cfg: UGTConfig, seed: int) -> np.ndarray:
    x = degree_onehot(g, cfg.max_degree).matrix
    params = init_encoder(cfg, x.shape[1], np.random.default_rng(seed))
    inp = prepare_inputs(preprocess(g, cfg), x, cfg)
    z = forward(inp, params, cfg, training=False).data
    return np.concatenate([z.sum(0), np.sort(np.linalg.norm(z, axis=1))])


def embed_graph(g: Graph, cfg: UGTConfig, seed: int = 0) -> np.ndarray:
    """Sum-pooled embeddings followed by the sorted per-node embedding norms.

    Weights are a seeded, untrained initialisation; inputs are one-hot degrees
    capped at ``cfg.max_degree`` so every graph shares one input width.
    """
    with ag.default_dtype(np.float64):
        return _fingerprint(g, iso_config(cfg), seed)


def relative_linf(a: np.ndarray, b: np.ndarray, floor: float = 1e-9) -> float:
    if a.shape != b.shape:
        return np.inf
    scale = max(float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)), floor)
    return float(np.abs(a - b).max(initial=0.0)) / scale


@dataclass
class DistinguishReport:
    corpus: str
    n_graphs: int
    n_comparisons: int
    n_undistinguished: int
    tolerance: float
    seed: int
    pairs: list
    n_candidate_pairs: int
    meta: dict

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _sweep_buckets(fps: list[np.ndarray], tolerance: float, floor: float) -> list[list[int]]:
    """Groups that can contain every pair within ``tolerance``.

    Fingerprints are split by length, sorted on their first coordinate and
    cut wherever the gap exceeds ``tolerance * max scale``; no qualifying pair
    can straddle a cut since its first coordinates differ by at most that.
    """
    by_len: dict[int, list[int]] = {}
    for i, f in enumerate(fps):
        by_len.setdefault(len(f), []).append(i)
    buckets = []
    for idx in by_len.values():
        if not fps[idx[0]].size:
            buckets.append(idx)
            continue
        scale = max(max(float(np.abs(fps[i]).max()) for i in idx), floor)
        key = np.array([fps[i][0] for i in idx])
        order = np.argsort(key, kind="stable")
        gap = tolerance * scale
        cur = [idx[order[0]]]
        for a, b in zip(order[:-1], order[1:]):
            if key[b] - key[a] > gap:
                buckets.append(cur)
                cur = []
            cur.append(idx[b])
        buckets.append(cur)
    return buckets


def undistinguished_pairs(fps: list[np.ndarray], tolerance: float = 1e-6, floor: float = 1e-9,
                          exhaustive: bool = False, threads: int = 1) -> tuple[list, int]:
    """Pairs ``(i, j)`` whose fingerprints agree within relative L∞ ``tolerance``."""
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    n = len(fps)
    buckets = [list(range(n))] if exhaustive else _sweep_buckets(fps, tolerance, floor)

    def scan(bucket):
        b = sorted(bucket)
        return [(i, j) for x, i in enumerate(b) for j in b[x + 1:]
                if relative_linf(fps[i], fps[j], floor) < tolerance], len(b) * (len(b) - 1) // 2

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(scan, buckets))
    else:
        results = [scan(b) for b in buckets]
    pairs = sorted(p for r in results for p in r[0])
    return pairs, sum(r[1] for r in results)


def embed_corpus(corpus: GraphCorpus, cfg: UGTConfig, seed: int = 0, threads: int = 1) -> list[np.ndarray]:
    cfg = iso_config(cfg)
    with ag.default_dtype(np.float64):
        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                return list(pool.map(lambda g: _fingerprint(g, cfg, seed), corpus.graphs))
        return [_fingerprint(g, cfg, seed) for g in corpus.graphs]


def count_undistinguished(corpus: GraphCorpus, cfg: UGTConfig, tolerance: float = 1e-6,
                          seed: int = 0, threads: int = 1, exhaustive: bool = False) -> DistinguishReport:
    cfg = iso_config(cfg)
    fps = embed_corpus(corpus, cfg, seed, threads)
    pairs, n_cand = undistinguished_pairs(fps, tolerance, exhaustive=exhaustive, threads=threads)
    n = len(corpus)
    digest = hashlib.sha256(corpus.to_graph6().encode()).hexdigest()[:16]
    return DistinguishReport(
        corpus=corpus.name, n_graphs=n, n_comparisons=n * (n - 1) // 2,
        n_undistinguished=len(pairs), tolerance=tolerance, seed=seed,
        pairs=[list(p) for p in pairs], n_candidate_pairs=n_cand,
        meta={"protocol": "untrained seeded weights, dense attention, float64, "
                          "moment-canonicalised PE signs, no sign flipping",
              "config": cfg.to_dict(), "corpus_sha256": digest, "floor": 1e-9},
    )
