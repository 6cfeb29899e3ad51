"""Self-supervised pretraining, fine-tuning loops and clustering."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import AdamState, ParamStore, Tape, adam_step
from .errors import ConfigError, DataError, NumericError
from .graph import DatasetBundle, Graph, degree_onehot
from .metrics import accuracy, conductance_C, conductance_per_cluster, kmeans, modularity_Q
from .model import (ModelInputs, _mlp, Sidecar, UGTConfig, classify_head, cluster_head, forward,
                    init_classify_head, init_cluster_head, init_encoder,
                    init_graph_head, init_reconstruct_head, prepare_inputs, preprocess,
                    reconstruct_head)
from .spectral import flip_pattern, log_scale_targets

log = logging.getLogger(__name__)


class TrainingDiverged(NumericError):
    """Loss became non-finite; ``params`` holds the last finite-loss state."""

    def __init__(self, message: str, params: ParamStore | None, epoch: int):
        super().__init__(message)
        self.params = params
        self.epoch = epoch


@dataclass
class PretrainConfig:
    alpha: float = 1.0
    beta: float = 0.5
    neg_count: int = 1
    epochs: int = 100
    lr: float = 5e-3
    seed: int = 0
    floor: float = 0.0
    target_norm: str = "column"
    per_step_proj: bool = False
    sign_flip: bool = True

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be non-negative")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.neg_count < 1:
            raise ConfigError("neg_count must be >= 1")


@dataclass
class FinetuneConfig:
    epochs: int = 200
    lr: float = 5e-3
    weight_decay: float = 5e-4
    patience: int = 50
    seed: int = 0
    n_splits: int = 10
    sign_flip: bool = True
    threads: int = 1


@dataclass
class ClusterConfig:
    n_clusters: int = 2
    epochs: int = 200
    lr: float = 1e-3
    collapse_weight: float = 1.0
    seed: int = 0
    n_init: int = 50
    train_encoder: bool = True


@dataclass
class MetricReport:
    task: str
    accuracy_mean: float | None = None
    accuracy_std: float | None = None
    per_split: list = field(default_factory=list)
    Q: float | None = None
    C: float | None = None
    conductance_per_cluster: list = field(default_factory=list)
    loss_trace: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PretrainResult:
    params: ParamStore
    trace: list
    best_trace: list
    best_epoch: int


# --------------------------------------------------------------------------
# Helpers


def _flipped(inp: ModelInputs, rng: np.random.Generator, enabled: bool) -> ModelInputs:
    if not enabled:
        return inp
    return inp.with_pe(inp.pe * flip_pattern(inp.pe.shape[1], rng)[None, :].astype(inp.pe.dtype))


def _step(params: ParamStore, state: AdamState, loss_fn):
    params.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    value = loss.item()
    if not math.isfinite(value):
        return value
    tape.backward(loss)
    adam_step(params, params.grads(), state)
    return value


def pretrain_loss(z, inp: ModelInputs, targets: np.ndarray, params: ParamStore,
                  alpha: float, beta: float, per_step_proj: bool = False):
    """``alpha * sum_p ||A'_p - cos(Z_p)||_F^2 + beta * mean_i ||x_i - x_hat_i||_2``."""
    total = None
    if alpha:
        shared = None if per_step_proj else ag.cosine_similarity_matrix(z)
        for s in range(targets.shape[0]):
            zs = ag.cosine_similarity_matrix(ag.matmul(z, params[f"pt.P{s}"])) if per_step_proj else shared
            term = ag.frobenius_sq(ag.sub(targets[s], zs))
            total = term if total is None else ag.add(total, term)
        total = ag.mul(total, alpha)
    if beta:
        xhat = reconstruct_head(z, params)
        rec = ag.mul(ag.mean(ag.row_norm(ag.sub(inp.x, xhat))), beta)
        total = rec if total is None else ag.add(total, rec)
    if total is None:
        total = ag.mul(ag.sum(z), 0.0)
    return total


# --------------------------------------------------------------------------
# Pretraining


def pretrain(bundle: DatasetBundle, sidecar: Sidecar, ucfg: UGTConfig, cfg: PretrainConfig,
             params: ParamStore | None = None) -> PretrainResult:
    """Minimise the transition-preservation + reconstruction objective.

    ``trace[e]`` is the loss at the start of epoch ``e`` and ``trace[epochs]``
    the loss after the last update. Returns the lowest-loss parameters seen.
    """
    rng = np.random.default_rng(cfg.seed)
    x = bundle.features.matrix
    inp = prepare_inputs(sidecar, x, ucfg)
    targets = log_scale_targets(sidecar.stack, cfg.neg_count, cfg.floor, cfg.target_norm).mats
    targets = targets.astype(ag.get_default_dtype())
    if params is None:
        params = init_encoder(ucfg, x.shape[1], rng)
    if "rec.Wa" not in params:
        init_reconstruct_head(params, ucfg, x.shape[1], rng)
    if cfg.per_step_proj:
        for s in range(targets.shape[0]):
            if f"pt.P{s}" not in params:
                params.add(f"pt.P{s}", ag.xavier_uniform((ucfg.hidden, ucfg.hidden), rng))
    state = AdamState(lr=cfg.lr)

    def loss_at(model_inp, training):
        z = forward(model_inp, params, ucfg, training=training, rng=rng)
        return pretrain_loss(z, model_inp, targets, params, cfg.alpha, cfg.beta, cfg.per_step_proj)

    trace, best_trace = [], []
    best, best_loss, best_epoch = params.copy(), math.inf, 0
    for epoch in range(cfg.epochs + 1):
        eval_loss = loss_at(inp, False).item()
        if not math.isfinite(eval_loss):
            raise TrainingDiverged(f"pretraining loss non-finite at epoch {epoch}", best, epoch)
        trace.append(eval_loss)
        if eval_loss < best_loss:
            best, best_loss, best_epoch = params.copy(), eval_loss, epoch
        best_trace.append(best_loss)
        if epoch == cfg.epochs:
            break
        step_inp = _flipped(inp, rng, cfg.sign_flip and ucfg.use_pe)
        value = _step(params, state, lambda: loss_at(step_inp, True))
        if not math.isfinite(value):
            raise TrainingDiverged(f"pretraining loss non-finite at epoch {epoch}", best, epoch)
    log.info("pretrain: loss %.4f -> %.4f (best %.4f @ %d)", trace[0], trace[-1], best_loss, best_epoch)
    return PretrainResult(best, trace, best_trace, best_epoch)


# --------------------------------------------------------------------------
# Node classification


def _encoder_params(ucfg: UGTConfig, d0: int, init: ParamStore | None, rng) -> ParamStore:
    if init is None:
        return init_encoder(ucfg, d0, rng)
    ps = ParamStore()
    for name, t in init.items():
        if name.startswith(("enc.", "layer")):
            ps.add(name, t.data.copy())
    return ps


def _train_node_split(bundle: DatasetBundle, inp: ModelInputs, ucfg: UGTConfig,
                      cfg: FinetuneConfig, init: ParamStore | None, split, seed: int):
    rng = np.random.default_rng(seed)
    labels = bundle.labels.labels
    n_classes = bundle.labels.n_classes
    params = _encoder_params(ucfg, inp.x.shape[1], init, rng)
    init_classify_head(params, ucfg, n_classes, rng)
    state = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)

    def logits_at(model_inp, training):
        return classify_head(forward(model_inp, params, ucfg, training, rng), params)

    best = (-1.0, math.inf)
    best_state, best_epoch, trace = params.state_dict(), 0, []
    val_rows = split.val if len(split.val) else split.train
    for epoch in range(cfg.epochs):
        step_inp = _flipped(inp, rng, cfg.sign_flip and ucfg.use_pe)
        value = _step(params, state,
                      lambda: ag.cross_entropy(logits_at(step_inp, True), labels, split.train))
        if not math.isfinite(value):
            raise TrainingDiverged(f"fine-tuning loss non-finite at epoch {epoch}", None, epoch)
        trace.append(value)
        logits = logits_at(inp, False)
        val_loss = ag.cross_entropy(logits, labels, val_rows).item()
        val_acc = accuracy(logits.data.argmax(1), labels, val_rows)
        if val_acc > best[0] or (val_acc == best[0] and val_loss < best[1]):
            best, best_state, best_epoch = (val_acc, val_loss), params.state_dict(), epoch
        elif epoch - best_epoch >= cfg.patience:
            break
    params.load_state_dict(best_state)
    pred = logits_at(inp, False).data.argmax(1)
    test_rows = split.test if len(split.test) else val_rows
    return accuracy(pred, labels, test_rows), best[0], best_epoch, trace, params


def finetune_node_classification(bundle: DatasetBundle, sidecar: Sidecar, ucfg: UGTConfig,
                                 cfg: FinetuneConfig, init: ParamStore | None = None,
                                 splits=None, return_params: bool = False):
    """Cross-entropy fine-tuning with early stopping on validation accuracy.

    Runs one model per split (``cfg.n_splits`` of them); ``init`` supplies
    pretrained encoder weights, otherwise the encoder starts from scratch.
    """
    if bundle.labels is None:
        raise DataError("node classification needs labels")
    splits = list(splits if splits is not None else bundle.splits)[:cfg.n_splits]
    if not splits:
        raise DataError("no train/val/test splits available")
    inp = prepare_inputs(sidecar, bundle.features.matrix, ucfg)
    jobs = [(i, s) for i, s in enumerate(splits)]

    def run(job):
        i, s = job
        return _train_node_split(bundle, inp, ucfg, cfg, init, s, cfg.seed + 1000 * i)

    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    accs = np.array([r[0] for r in results])
    report = MetricReport(
        task="node_classification",
        accuracy_mean=float(accs.mean()),
        accuracy_std=float(accs.std()),
        per_split=[{"split": i, "test_accuracy": r[0], "val_accuracy": r[1], "best_epoch": r[2]}
                   for i, r in enumerate(results)],
        loss_trace=results[0][3],
        meta={"pretrained": init is not None, "n_splits": len(splits)},
    )
    if return_params:
        return report, [r[4] for r in results]
    return report


# --------------------------------------------------------------------------
# Graph classification


@dataclass
class GraphBatch:
    inputs: ModelInputs
    pool: np.ndarray  # n_graphs × n_total averaging matrix


def batch_graphs(graphs: list[Graph], ucfg: UGTConfig, features: list[np.ndarray] | None = None,
                 max_degree: int | None = None) -> GraphBatch:
    """Disjoint union of graphs with attention kept inside each graph."""
    if max_degree is None:
        max_degree = min(ucfg.max_degree, max(int(g.degrees().max(initial=0)) for g in graphs))
    parts = []
    for i, g in enumerate(graphs):
        x = features[i] if features is not None else degree_onehot(g, max_degree).matrix
        parts.append(prepare_inputs(preprocess(g, ucfg), x, ucfg))
    sizes = [p.n for p in parts]
    n = sum(sizes)
    starts = np.concatenate([[0], np.cumsum(sizes)])
    dt = ag.get_default_dtype()
    mask = np.zeros((n, n), dtype=bool)
    q = parts[0].dist.shape[1]
    p = parts[0].trans.shape[1]
    dist = np.zeros((n, n, q), dtype=dt)
    trans = np.zeros((n, n, p), dtype=dt)
    pool = np.zeros((len(graphs), n), dtype=dt)
    for i, part in enumerate(parts):
        a, b = starts[i], starts[i + 1]
        m = b - a
        mask[a:b, a:b] = part.mask
        dist[a:b, a:b] = part.dist.reshape(m, m, q)
        trans[a:b, a:b] = part.trans.reshape(m, m, p)
        pool[i, a:b] = 1.0 / m
    inputs = ModelInputs(np.concatenate([pt.x for pt in parts]),
                         np.concatenate([pt.pe for pt in parts]),
                         mask, dist.reshape(n * n, q), trans.reshape(n * n, p),
                         np.concatenate([pt.identity for pt in parts]))
    return GraphBatch(inputs, pool)


def _graph_logits(batch: GraphBatch, params, ucfg, training, rng):
    z = forward(batch.inputs, params, ucfg, training, rng)
    return _mlp(ag.matmul(batch.pool, z), params, "gcls.")


def finetune_graph_classification(graphs: list[Graph], labels, ucfg: UGTConfig,
                                  cfg: FinetuneConfig, splits=None) -> MetricReport:
    """Mean-pooled graph embeddings through an MLP head, trained from scratch."""
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = int(labels.max()) + 1
    batch = batch_graphs(graphs, ucfg)
    idx = np.arange(len(graphs))
    if splits is None:
        if len(graphs) < 3:
            splits = [(idx, idx, idx)]
        else:
            rng = np.random.default_rng(cfg.seed)
            splits = []
            for _ in range(cfg.n_splits):
                p = rng.permutation(idx)
                a, b = int(round(0.8 * len(p))), int(round(0.9 * len(p)))
                splits.append((p[:a], p[a:b], p[b:]))
    accs, per, trace0 = [], [], []
    for i, (tr, va, te) in enumerate(splits):
        rng = np.random.default_rng(cfg.seed + 1000 * i)
        params = init_encoder(ucfg, batch.inputs.x.shape[1], rng)
        init_graph_head(params, ucfg, n_classes, rng)
        state = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
        va = va if len(va) else tr
        te = te if len(te) else va
        best, best_state, best_epoch, trace = (-1.0, math.inf), params.state_dict(), 0, []
        for epoch in range(cfg.epochs):
            step_b = GraphBatch(_flipped(batch.inputs, rng, cfg.sign_flip and ucfg.use_pe), batch.pool)
            value = _step(params, state, lambda: ag.cross_entropy(
                _graph_logits(step_b, params, ucfg, True, rng), labels, tr))
            trace.append(value)
            logits = _graph_logits(batch, params, ucfg, False, rng)
            vacc = accuracy(logits.data.argmax(1), labels, va)
            vloss = ag.cross_entropy(logits, labels, va).item()
            if vacc > best[0] or (vacc == best[0] and vloss < best[1]):
                best, best_state, best_epoch = (vacc, vloss), params.state_dict(), epoch
            elif epoch - best_epoch >= cfg.patience:
                break
        params.load_state_dict(best_state)
        pred = _graph_logits(batch, params, ucfg, False, rng).data.argmax(1)
        accs.append(accuracy(pred, labels, te))
        per.append({"split": i, "test_accuracy": accs[-1], "val_accuracy": best[0]})
        if i == 0:
            trace0 = trace
    accs = np.array(accs)
    return MetricReport("graph_classification", float(accs.mean()), float(accs.std()), per,
                        loss_trace=trace0, meta={"n_graphs": len(graphs)})


# --------------------------------------------------------------------------
# Clustering


def embed(bundle: DatasetBundle, sidecar: Sidecar, ucfg: UGTConfig, params: ParamStore) -> np.ndarray:
    inp = prepare_inputs(sidecar, bundle.features.matrix, ucfg)
    return forward(inp, params, ucfg, training=False).data


def cluster(bundle: DatasetBundle, sidecar: Sidecar, ucfg: UGTConfig, cfg: ClusterConfig,
            params: ParamStore | None = None, mode: str = "end2end") -> MetricReport:
    """Partition nodes either by training a modularity head or by k-means on embeddings."""
    if cfg.n_clusters < 1:
        raise ValueError("n_clusters must be >= 1")
    g = bundle.graph
    rng = np.random.default_rng(cfg.seed)
    inp = prepare_inputs(sidecar, bundle.features.matrix, ucfg)
    trace = []
    if mode == "kmeans":
        if params is None:
            params = init_encoder(ucfg, inp.x.shape[1], rng)
        z = forward(inp, params, ucfg).data
        part, _, _ = kmeans(z, cfg.n_clusters, n_init=cfg.n_init, seed=cfg.seed)
    elif mode == "end2end":
        if cfg.n_clusters < 2:
            part = np.zeros(g.n_nodes, dtype=np.int64)
        else:
            enc = _encoder_params(ucfg, inp.x.shape[1], params, rng)
            init_cluster_head(enc, ucfg, cfg.n_clusters, rng)
            state = AdamState(lr=cfg.lr)
            trainable = enc if cfg.train_encoder else _subset(enc, "clu.")

            def loss_fn():
                z = forward(inp, enc, ucfg, training=True, rng=rng)
                return cluster_head(z, enc, g, cfg.collapse_weight)[1]

            for _ in range(cfg.epochs):
                enc.zero_grad()
                with Tape() as tape:
                    loss = loss_fn()
                trace.append(loss.item())
                if not math.isfinite(trace[-1]):
                    raise TrainingDiverged("clustering loss non-finite", None, len(trace))
                tape.backward(loss)
                adam_step(trainable, trainable.grads(), state)
            assign, _ = cluster_head(forward(inp, enc, ucfg), enc, g, cfg.collapse_weight)
            part = assign.data.argmax(1)
    else:
        raise ValueError(f"unknown clustering mode {mode!r}")
    return MetricReport(
        task=f"cluster_{mode}",
        Q=modularity_Q(g, part),
        C=conductance_C(g, part),
        conductance_per_cluster=conductance_per_cluster(g, part).tolist(),
        loss_trace=trace,
        meta={"n_clusters": cfg.n_clusters, "partition": np.asarray(part).tolist()},
    )


def _subset(ps: ParamStore, prefix: str) -> ParamStore:
    out = ParamStore()
    out._params = {k: v for k, v in ps.items() if k.startswith(prefix)}
    return out
