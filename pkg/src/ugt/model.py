"""The unified graph transformer: input encoding, structure-biased attention,
transformer layers with identity injection, and task heads."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autograd as ag
from .autograd import ParamStore, Tensor, xavier_uniform
from .checkpoint import load_sidecar, save_sidecar
from .errors import ConfigError
from .graph import Graph
from .spectral import LaplacianPE, TransitionStack, laplacian_pe, transition_stack
from .structure import (ContextSet, VirtualEdgeSet, build_context, build_virtual_edges,
                        identity_distance_matrix, identity_matrix)

ATTENTION_MODES = ("sparse", "dense")


@dataclass
class UGTConfig:
    """Architecture and preprocessing hyperparameters.

    The ``use_*`` flags switch off individual components for ablations:
    virtual edges, identity injection, Laplacian PE, the identity-distance
    bias ``D`` and the transition bias ``M``.
    """

    n_layers: int = 2
    n_heads: int = 4
    hidden: int = 32
    k_pe: int = 8
    k_id: int = 2
    k_hop: int = 2
    k_dtw: int = 2
    p_steps: int = 3
    top_m: int = 3
    n_buckets: float | None = 16
    use_virtual: bool = True
    use_identity: bool = True
    use_pe: bool = True
    use_D: bool = True
    use_M: bool = True
    dropout: float = 0.0
    attention: str = "sparse"
    dist_eps: float = 1.0
    dist_per_component: bool = False
    boost_score: bool = True
    dtw_cost: str = "ratio"
    laplacian: str = "normalized"
    sign_rule: str = "index"
    identity_transform: str = "log1p"
    max_degree: int = 64

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.hidden % self.n_heads:
            raise ConfigError(f"hidden={self.hidden} not divisible by n_heads={self.n_heads}")
        for name in ("k_pe", "k_id", "k_hop", "k_dtw", "p_steps", "n_heads", "hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_layers < 0 or self.top_m < 0:
            raise ConfigError("n_layers and top_m must be non-negative")
        if self.attention not in ATTENTION_MODES:
            raise ConfigError(f"attention must be one of {ATTENTION_MODES}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.identity_transform not in ("raw", "log1p"):
            raise ConfigError("identity_transform must be 'raw' or 'log1p'")
        if self.laplacian not in ("normalized", "combinatorial"):
            raise ConfigError("laplacian must be 'normalized' or 'combinatorial'")
        if self.dtw_cost not in ("ratio", "abs"):
            raise ConfigError("dtw_cost must be 'ratio' or 'abs'")
        if self.sign_rule not in ("index", "moment"):
            raise ConfigError("sign_rule must be 'index' or 'moment'")

    @property
    def d_k(self) -> int:
        return self.hidden // self.n_heads

    @property
    def id_dim(self) -> int:
        return 1 + 4 * self.k_id

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["n_buckets"] is not None and math.isinf(d["n_buckets"]):
            d["n_buckets"] = None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UGTConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------
# Preprocessing


@dataclass
class Sidecar:
    """Everything the model needs that depends only on graph structure."""

    identities: np.ndarray
    virtual: VirtualEdgeSet
    context: ContextSet
    pe: LaplacianPE
    stack: TransitionStack


def preprocess(g: Graph, cfg: UGTConfig) -> Sidecar:
    top_m = cfg.top_m if cfg.use_virtual else 0
    k_seq = max(cfg.k_dtw, 1)
    virtual = build_virtual_edges(g, k_dtw=k_seq, top_m=top_m, n_buckets=cfg.n_buckets,
                                  boost=cfg.boost_score, cost=cfg.dtw_cost)
    context = build_context(g, virtual, cfg.k_hop)
    k_pe = min(cfg.k_pe, max(g.n_nodes - 1, 0))
    if k_pe >= 1:
        pe = laplacian_pe(g, k_pe, normalized=cfg.laplacian == "normalized",
                          sign_rule=cfg.sign_rule)
        mat = np.zeros((g.n_nodes, cfg.k_pe))
        mat[:, :k_pe] = pe.matrix
        vals = np.zeros(cfg.k_pe)
        vals[:k_pe] = pe.eigenvalues
        pe = LaplacianPE(mat, vals)
    else:
        pe = LaplacianPE(np.zeros((g.n_nodes, cfg.k_pe)), np.zeros(cfg.k_pe))
    return Sidecar(identity_matrix(g, cfg.k_id), virtual, context, pe,
                   transition_stack(g, cfg.p_steps))


def sidecar_summary(sc: Sidecar) -> dict:
    return {
        "n_nodes": int(sc.identities.shape[0]),
        "n_identities": int(sc.identities.shape[0]),
        "identity_dim": int(sc.identities.shape[1]),
        "n_virtual_edges": int(sc.virtual.n_edges),
        "top_m": int(sc.virtual.top_m),
        "k_dtw": int(sc.virtual.k_dtw),
        "context_sizes": [int(len(nb)) for nb in sc.context.neighbors],
        "pe_eigenvalues": [float(v) for v in sc.pe.eigenvalues],
        "p_steps": int(sc.stack.p),
    }


def save_sidecar_file(path, sc: Sidecar, cfg: UGTConfig, extra: dict | None = None) -> None:
    """Persist preprocessing results (floats stored as float32)."""
    def csr(rows, dtype):
        off = np.zeros(len(rows) + 1, dtype=np.int64)
        off[1:] = np.cumsum([len(r) for r in rows])
        flat = np.concatenate(rows).astype(dtype) if len(rows) else np.zeros(0, dtype)
        return off, flat

    v_off, v_peers = csr(sc.virtual.peers, np.int64)
    _, v_scores = csr(sc.virtual.scores, np.float64)
    c_off, c_nbrs, c_tags = sc.context.to_csr()
    arrays = {"identities": sc.identities, "virtual.offsets": v_off, "virtual.peers": v_peers,
              "virtual.scores": v_scores, "context.offsets": c_off, "context.neighbors": c_nbrs,
              "context.tags": c_tags, "pe.matrix": sc.pe.matrix, "pe.eigenvalues": sc.pe.eigenvalues,
              "stack": sc.stack.mats}
    n_buckets = sc.virtual.n_buckets
    meta = {"config": cfg.to_dict(), "summary": sidecar_summary(sc),
            "virtual": {"k_dtw": sc.virtual.k_dtw, "top_m": sc.virtual.top_m,
                        "n_buckets": None if n_buckets is None or math.isinf(n_buckets) else n_buckets},
            **(extra or {})}
    save_sidecar(path, arrays, meta)


def load_sidecar_file(path) -> tuple[Sidecar, dict]:
    a, meta = load_sidecar(path)
    f8 = lambda k: a[k].astype(np.float64)  # noqa: E731
    vo, co = a["virtual.offsets"], a["context.offsets"]
    n = len(vo) - 1
    vm = meta["virtual"]
    virtual = VirtualEdgeSet([a["virtual.peers"][vo[i]:vo[i + 1]].astype(np.int64) for i in range(n)],
                             [f8("virtual.scores")[vo[i]:vo[i + 1]] for i in range(n)],
                             vm["k_dtw"], vm["top_m"],
                             math.inf if vm["n_buckets"] is None else vm["n_buckets"])
    context = ContextSet.from_csr(co, a["context.neighbors"], a["context.tags"])
    sc = Sidecar(f8("identities"), virtual, context,
                 LaplacianPE(f8("pe.matrix"), f8("pe.eigenvalues")), TransitionStack(f8("stack")))
    return sc, meta


@dataclass
class ModelInputs:
    """Dense arrays fed to :func:`forward`, derived from a sidecar and features."""

    x: np.ndarray            # n × d0
    pe: np.ndarray           # n × k_pe
    mask: np.ndarray         # n × n bool, attention support
    dist: np.ndarray         # (n·n) × q, identity-distance bias input
    trans: np.ndarray        # (n·n) × p, transition bias input
    identity: np.ndarray     # n × (1 + 4 k_id), transformed identity
    n: int = field(init=False)

    def __post_init__(self):
        self.n = self.x.shape[0]

    def with_pe(self, pe: np.ndarray) -> "ModelInputs":
        return ModelInputs(self.x, pe, self.mask, self.dist, self.trans, self.identity)


def prepare_inputs(sc: Sidecar, features: np.ndarray, cfg: UGTConfig) -> ModelInputs:
    dtype = ag.get_default_dtype()
    n = features.shape[0]
    if cfg.attention == "dense":
        mask = np.ones((n, n), dtype=bool)
    else:
        mask = sc.context.mask(self_fallback=True)
    dist = identity_distance_matrix(sc.identities, eps=cfg.dist_eps,
                                    per_component=cfg.dist_per_component)
    dist = dist.reshape(n * n, -1)
    trans = sc.stack.pair_features().reshape(n * n, -1)
    ident = sc.identities if cfg.identity_transform == "raw" else np.log1p(sc.identities)
    return ModelInputs(np.asarray(features, dtype=dtype), np.asarray(sc.pe.matrix, dtype=dtype),
                       mask, dist.astype(dtype), trans.astype(dtype), ident.astype(dtype))


# --------------------------------------------------------------------------
# Parameters


def init_encoder(cfg: UGTConfig, d0: int, rng: np.random.Generator,
                 params: ParamStore | None = None) -> ParamStore:
    """Xavier-uniform weights, zero biases, unit LayerNorm gains."""
    ps = params if params is not None else ParamStore()
    d, H, dt = cfg.hidden, cfg.n_heads, ag.get_default_dtype()
    q = cfg.id_dim if cfg.dist_per_component else 1
    ps.add("enc.W0", xavier_uniform((d0, d), rng))
    ps.add("enc.b0", np.zeros(d, dt))
    ps.add("enc.W1", xavier_uniform((cfg.k_pe, d), rng))
    ps.add("enc.b1", np.zeros(d, dt))
    for l in range(cfg.n_layers):
        p = f"layer{l}."
        for w in ("Wq", "Wk", "Wv", "Wo"):
            ps.add(p + w, xavier_uniform((d, d), rng))
        ps.add(p + "Dw", xavier_uniform((q, H), rng))
        ps.add(p + "Mw", xavier_uniform((cfg.p_steps, H), rng))
        ps.add(p + "Wid", xavier_uniform((cfg.id_dim, d), rng))
        ps.add(p + "bid", np.zeros(d, dt))
        ps.add(p + "ln1.g", np.ones(d, dt))
        ps.add(p + "ln1.b", np.zeros(d, dt))
        ps.add(p + "Wf1", xavier_uniform((d, 2 * d), rng))
        ps.add(p + "Wf2", xavier_uniform((2 * d, d), rng))
        ps.add(p + "ln2.g", np.ones(d, dt))
        ps.add(p + "ln2.b", np.zeros(d, dt))
    return ps


def _init_mlp(ps: ParamStore, prefix: str, d_in: int, d_hid: int, d_out: int, rng) -> ParamStore:
    dt = ag.get_default_dtype()
    ps.add(prefix + "Wa", xavier_uniform((d_in, d_hid), rng))
    ps.add(prefix + "ba", np.zeros(d_hid, dt))
    ps.add(prefix + "Wb", xavier_uniform((d_hid, d_out), rng))
    ps.add(prefix + "bb", np.zeros(d_out, dt))
    return ps


def init_classify_head(ps: ParamStore, cfg: UGTConfig, n_classes: int, rng) -> ParamStore:
    return _init_mlp(ps, "cls.", cfg.hidden, cfg.hidden, n_classes, rng)


def init_reconstruct_head(ps: ParamStore, cfg: UGTConfig, d0: int, rng) -> ParamStore:
    return _init_mlp(ps, "rec.", cfg.hidden, cfg.hidden, d0, rng)


def init_graph_head(ps: ParamStore, cfg: UGTConfig, n_classes: int, rng) -> ParamStore:
    return _init_mlp(ps, "gcls.", cfg.hidden, cfg.hidden, n_classes, rng)


def init_cluster_head(ps: ParamStore, cfg: UGTConfig, n_clusters: int, rng) -> ParamStore:
    ps.add("clu.W", xavier_uniform((cfg.hidden, n_clusters), rng))
    ps.add("clu.b", np.zeros(n_clusters, ag.get_default_dtype()))
    return ps


# --------------------------------------------------------------------------
# Forward pass


def input_encoding(x, pe, params: ParamStore, cfg: UGTConfig) -> Tensor:
    """``h0 = x W0 + b0 (+ pe W1 + b1 when use_pe)``."""
    h = ag.add(ag.matmul(x, params["enc.W0"]), params["enc.b0"])
    if cfg.use_pe:
        h = ag.add(h, ag.add(ag.matmul(pe, params["enc.W1"]), params["enc.b1"]))
    return h


def _split_heads(t: Tensor, n: int, H: int, dk: int) -> Tensor:
    return ag.transpose(ag.reshape(t, (n, H, dk)), (1, 0, 2))


def attention_scores(h: Tensor, inp: ModelInputs, params: ParamStore, cfg: UGTConfig,
                     layer: int) -> Tensor:
    """Softmax-normalised attention ``(H, n, n)``, zero outside the context mask."""
    n, H, dk = inp.n, cfg.n_heads, cfg.d_k
    p = f"layer{layer}."
    q = _split_heads(ag.matmul(h, params[p + "Wq"]), n, H, dk)
    k = _split_heads(ag.matmul(h, params[p + "Wk"]), n, H, dk)
    logits = ag.mul(ag.matmul(q, ag.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dk))
    if cfg.use_D:
        bias = ag.matmul(inp.dist, params[p + "Dw"])
        logits = ag.add(logits, ag.reshape(ag.transpose(bias), (H, n, n)))
    if cfg.use_M:
        bias = ag.matmul(inp.trans, params[p + "Mw"])
        logits = ag.add(logits, ag.reshape(ag.transpose(bias), (H, n, n)))
    return ag.softmax(logits, axis=-1, mask=inp.mask[None, :, :])


def context_rows(alpha, context: ContextSet, head: int = 0) -> list[np.ndarray]:
    """Per-node attention weights restricted to the node's context entries."""
    a = alpha.data if isinstance(alpha, Tensor) else np.asarray(alpha)
    out = []
    for v, nb in enumerate(context.neighbors):
        out.append(a[head, v, nb] if len(nb) else a[head, v, [v]])
    return out


def layer_forward(h: Tensor, inp: ModelInputs, params: ParamStore, cfg: UGTConfig, layer: int,
                  training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    n, H, dk, d = inp.n, cfg.n_heads, cfg.d_k, cfg.hidden
    p = f"layer{layer}."
    alpha = attention_scores(h, inp, params, cfg, layer)
    v = _split_heads(ag.matmul(h, params[p + "Wv"]), n, H, dk)
    agg = ag.reshape(ag.transpose(ag.matmul(alpha, v), (1, 0, 2)), (n, d))
    att = ag.dropout(ag.matmul(agg, params[p + "Wo"]), cfg.dropout, rng, training)
    if cfg.use_identity:
        att = ag.add(att, ag.add(ag.matmul(inp.identity, params[p + "Wid"]), params[p + "bid"]))
    h1 = ag.layer_norm(ag.add(h, att), params[p + "ln1.g"], params[p + "ln1.b"])
    ff = ag.matmul(ag.relu(ag.matmul(h1, params[p + "Wf1"])), params[p + "Wf2"])
    ff = ag.dropout(ff, cfg.dropout, rng, training)
    return ag.layer_norm(ag.add(h1, ff), params[p + "ln2.g"], params[p + "ln2.b"])


def forward(inp: ModelInputs, params: ParamStore, cfg: UGTConfig, training: bool = False,
            rng: np.random.Generator | None = None) -> Tensor:
    """Node embeddings ``Z`` (n × hidden)."""
    h = input_encoding(inp.x, inp.pe, params, cfg)
    for l in range(cfg.n_layers):
        h = layer_forward(h, inp, params, cfg, l, training, rng)
    return h


# --------------------------------------------------------------------------
# Heads


def _mlp(z, params: ParamStore, prefix: str) -> Tensor:
    hid = ag.relu(ag.add(ag.matmul(z, params[prefix + "Wa"]), params[prefix + "ba"]))
    return ag.add(ag.matmul(hid, params[prefix + "Wb"]), params[prefix + "bb"])


def classify_head(z, params: ParamStore) -> Tensor:
    """Class logits ``W1 ReLU(W2 z)`` (with biases)."""
    return _mlp(z, params, "cls.")


def reconstruct_head(z, params: ParamStore) -> Tensor:
    return _mlp(z, params, "rec.")


def mean_pool(z) -> Tensor:
    return ag.mean(z, axis=0, keepdims=True)


def graph_pool_head(z, params: ParamStore | None = None) -> Tensor:
    """Average-pooled graph vector; passed through the graph MLP when its weights exist."""
    pooled = mean_pool(z)
    if params is not None and "gcls.Wa" in params:
        return _mlp(pooled, params, "gcls.")
    return pooled


def modularity_matrix(adj: np.ndarray) -> np.ndarray:
    deg = adj.sum(1)
    two_m = deg.sum()
    if two_m == 0:
        return np.zeros_like(adj)
    return adj - np.outer(deg, deg) / two_m


def modularity_loss(assign, adj: np.ndarray, collapse_weight: float = 1.0) -> Tensor:
    """``-tr(C^T B C)/2m + w * (sqrt(k)/n * ||sum_i C_i|| - 1)``."""
    assign = ag.as_tensor(assign)
    n, k = assign.shape
    two_m = float(adj.sum())
    b = ag.Tensor(modularity_matrix(adj), dtype=assign.data.dtype)
    q = ag.sum(ag.mul(assign, ag.matmul(b, assign)))
    loss = ag.mul(q, -1.0 / two_m if two_m > 0 else 0.0)
    if collapse_weight:
        sizes = ag.sum(assign, axis=0)
        reg = ag.sub(ag.mul(ag.sqrt(ag.add(ag.sum(ag.mul(sizes, sizes)), 1e-12)),
                            math.sqrt(k) / n), 1.0)
        loss = ag.add(loss, ag.mul(reg, collapse_weight))
    return loss


def cluster_head(z, params: ParamStore, g: Graph, collapse_weight: float = 1.0):
    """Soft assignment ``softmax(z W + b)`` and its modularity loss."""
    assign = ag.softmax(ag.add(ag.matmul(z, params["clu.W"]), params["clu.b"]), axis=-1)
    return assign, modularity_loss(assign, g.adjacency(), collapse_weight)
