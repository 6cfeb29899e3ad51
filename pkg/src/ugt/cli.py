"""``ugt`` command line: preprocess | pretrain | finetune | cluster | isotest | eval."""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import os
import platform
import sys
import time
from dataclasses import fields
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from . import autograd as ag
from .checkpoint import atomic_write, config_hash, load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, NumericError
from .fixtures import BUILTIN, builtin_bundle
from .graph import load_dataset
from .iso import (GraphCorpus, bundled_corpus, bundled_names, count_undistinguished, molecule_pair, parse_graph6,
                  sr16622)
from .metrics import accuracy
from .model import (UGTConfig, classify_head, forward, load_sidecar_file, prepare_inputs, preprocess,
                    save_sidecar_file, sidecar_summary)
from .training import (ClusterConfig, FinetuneConfig, MetricReport, PretrainConfig, cluster,
                       finetune_node_classification, pretrain, pretrain_loss)
from .spectral import log_scale_targets

log = logging.getLogger("ugt")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# --------------------------------------------------------------------------
# Run configuration

_JSON_TYPES = {int: "integer", float: "number", bool: "boolean", str: "string"}


def _section_schema(cls, extra: dict | None = None) -> dict:
    props = {}
    for f in fields(cls):
        if not f.init:
            continue
        t = f.type if isinstance(f.type, type) else eval(f.type, {"float": float, "int": int,
                                                                  "bool": bool, "str": str})
        js = _JSON_TYPES.get(t)
        props[f.name] = {"type": js} if js else {}
        if t is float:
            props[f.name] = {"type": ["number", "null"]}
    props.update(extra or {})
    return {"type": "object", "properties": props, "additionalProperties": False}


def _ugt_schema() -> dict:
    sch = _section_schema(UGTConfig)
    sch["properties"]["n_buckets"] = {"type": ["integer", "null"], "minimum": 1}
    sch["properties"]["attention"] = {"enum": ["sparse", "dense"]}
    return sch


RUN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "builtin": {"enum": sorted(BUILTIN)},
                "edges": {"type": "string"},
                "features": {"type": "string"},
                "labels": {"type": "string"},
                "name": {"type": "string"},
            },
        },
        "model": _ugt_schema(),
        "pretrain": _section_schema(PretrainConfig),
        "finetune": _section_schema(FinetuneConfig, {"init": {"enum": ["pretrained", "scratch"]}}),
        "cluster": _section_schema(ClusterConfig, {"mode": {"enum": ["end2end", "kmeans"]}}),
        "iso": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"corpus": {"type": "string"},
                           "tolerance": {"type": "number", "exclusiveMinimum": 0}},
        },
        "output_dir": {"type": "string"},
        "seed": {"type": "integer"},
        "dtype": {"enum": ["float32", "float64"]},
    },
}

DEFAULT_RUN = {
    "dataset": {"builtin": "two-clique"},
    "model": {},
    "pretrain": {},
    "finetune": {"init": "pretrained"},
    "cluster": {"mode": "end2end"},
    "iso": {"corpus": "sr16622", "tolerance": 1e-6},
    "output_dir": "runs/default",
    "seed": 0,
    "dtype": "float64",
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_run_config(path: str | None, overrides: dict) -> dict:
    """Defaults, then the config file, then CLI flags (flags win)."""
    user = {}
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise DataError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
    validate_run_config(user)
    if "dataset" in user:
        base = dict(DEFAULT_RUN, dataset={})
    else:
        base = DEFAULT_RUN
    cfg = _merge(_merge(base, user), {k: v for k, v in overrides.items() if k != "dataset"})
    if "dataset" in overrides:
        cfg["dataset"] = overrides["dataset"]
    validate_run_config(cfg)
    return cfg


def validate_run_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, RUN_SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {e.message}") from None


def _model_cfg(run: dict) -> UGTConfig:
    m = dict(run["model"])
    if m.get("n_buckets", 0) is None:
        m["n_buckets"] = float("inf")
    return UGTConfig.from_dict(m)


def _section(cls, run: dict, key: str, drop=("init", "mode")):
    d = {k: v for k, v in run[key].items() if k not in drop}
    d["seed"] = run["seed"]
    return cls(**d)


# --------------------------------------------------------------------------
# Run directory helpers


def _file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dataset(run: dict):
    ds = run["dataset"]
    if "builtin" in ds:
        return builtin_bundle(ds["builtin"]), {"builtin": ds["builtin"]}
    if "edges" not in ds:
        raise ConfigError("dataset needs either 'builtin' or 'edges'")
    bundle = load_dataset(ds["edges"], ds.get("features"), ds.get("labels"),
                          seed=run["seed"], name=ds.get("name"))
    hashes = {k: _file_hash(ds[k]) for k in ("edges", "features", "labels") if k in ds}
    return bundle, hashes


class RunDir:
    def __init__(self, run: dict, command: str):
        self.run = run
        self.command = command
        self.path = Path(run["output_dir"])
        self.path.mkdir(parents=True, exist_ok=True)
        self.t0 = time.time()
        self.inputs: dict = {}
        atomic_write(self.path / "config.json", json.dumps(run, indent=2, sort_keys=True) + "\n")

    def write_metrics(self, record: dict) -> str:
        text = json.dumps(record, sort_keys=True)
        with open(self.path / "metrics.jsonl", "a") as fh:
            fh.write(text + "\n")
        atomic_write(self.path / f"metrics-{self.command}.json", text + "\n")
        return text

    def write_trace(self, name: str, trace: list) -> None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        w.writerows((i, repr(float(v))) for i, v in enumerate(trace))
        atomic_write(self.path / f"traces-{name}.csv" if name else self.path / "traces.csv", buf.getvalue())
        if name:
            atomic_write(self.path / "traces.csv", buf.getvalue())

    def finish(self, summary: dict) -> None:
        manifest = {
            "command": self.command,
            "config_hash": config_hash(self.run),
            "inputs": self.inputs,
            "wall_clock_s": round(time.time() - self.t0, 3),
            "versions": {"ugt": __version__, "python": platform.python_version(),
                         "numpy": np.__version__},
            "metrics": summary,
        }
        atomic_write(self.path / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _sidecar(rd: RunDir, bundle, ucfg: UGTConfig):
    path = rd.path / "sidecar.bin"
    if path.exists():
        try:
            sc, meta = load_sidecar_file(path)
            if meta.get("config") == ucfg.to_dict() and meta.get("graph_hash") == _graph_hash(bundle):
                return sc
        except DataError as e:
            log.warning("ignoring unreadable sidecar: %s", e)
    sc = preprocess(bundle.graph, ucfg)
    save_sidecar_file(path, sc, ucfg, {"graph_hash": _graph_hash(bundle)})
    return load_sidecar_file(path)[0]


def _graph_hash(bundle) -> str:
    g = bundle.graph
    h = hashlib.sha256(np.int64(g.n_nodes).tobytes() + g.edges().astype("<i8").tobytes())
    return h.hexdigest()[:16]


def _params_of(arrays: dict) -> ag.ParamStore:
    ps = ag.ParamStore()
    for k in sorted(arrays):
        ps.add(k, arrays[k])
    return ps


# --------------------------------------------------------------------------
# Commands


def cmd_preprocess(run: dict) -> dict:
    rd = RunDir(run, "preprocess")
    bundle, rd.inputs = _dataset(run)
    ucfg = _model_cfg(run)
    sc = preprocess(bundle.graph, ucfg)
    save_sidecar_file(rd.path / "sidecar.bin", sc, ucfg, {"graph_hash": _graph_hash(bundle)})
    summary = sidecar_summary(sc)
    atomic_write(rd.path / "sidecar.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    rd.finish(summary)
    return summary


def cmd_pretrain(run: dict) -> dict:
    rd = RunDir(run, "pretrain")
    bundle, rd.inputs = _dataset(run)
    ucfg = _model_cfg(run)
    sc = _sidecar(rd, bundle, ucfg)
    pcfg = _section(PretrainConfig, run, "pretrain")
    res = pretrain(bundle, sc, ucfg, pcfg)
    save_checkpoint(rd.path / "ckpt-pretrain.ugt1", res.params.state_dict(), ucfg.to_dict(),
                    {"stage": "pretrain", "d0": int(bundle.features.matrix.shape[1])})
    rd.write_trace("pretrain", res.trace)
    record = {"task": "pretrain", "initial_loss": res.trace[0], "final_loss": res.trace[-1],
              "best_loss": res.best_trace[-1], "best_epoch": res.best_epoch,
              "epochs": pcfg.epochs, "alpha": pcfg.alpha, "beta": pcfg.beta,
              "neg_count": pcfg.neg_count, "seed": pcfg.seed}
    rd.write_metrics(record)
    rd.finish(record)
    return record


def _load_pretrained(rd: RunDir, ucfg: UGTConfig, bundle):
    path = rd.path / "ckpt-pretrain.ugt1"
    if not path.exists():
        raise DataError(f"no pretrained checkpoint at {path}; run 'pretrain' first or set finetune.init=scratch")
    arrays, _ = load_checkpoint(path, expected_config=ucfg.to_dict())
    width, d0 = arrays["enc.W0"].shape[0], bundle.features.matrix.shape[1]
    if width != d0:
        raise ConfigError(f"{path}: checkpoint expects {width} input features, dataset has {d0}")
    return _params_of(arrays)


def cmd_finetune(run: dict) -> dict:
    rd = RunDir(run, "finetune")
    bundle, rd.inputs = _dataset(run)
    ucfg = _model_cfg(run)
    sc = _sidecar(rd, bundle, ucfg)
    fcfg = _section(FinetuneConfig, run, "finetune")
    init = _load_pretrained(rd, ucfg, bundle) if run["finetune"].get("init") == "pretrained" else None
    report, params = finetune_node_classification(bundle, sc, ucfg, fcfg, init, return_params=True)
    save_checkpoint(rd.path / "ckpt-finetune.ugt1", params[0].state_dict(), ucfg.to_dict(),
                    {"stage": "finetune", "split": 0})
    rd.write_trace("finetune", report.loss_trace)
    record = report.to_dict()
    rd.write_metrics(record)
    rd.finish({k: record[k] for k in ("task", "accuracy_mean", "accuracy_std")})
    return record


def cmd_cluster(run: dict) -> dict:
    rd = RunDir(run, "cluster")
    bundle, rd.inputs = _dataset(run)
    ucfg = _model_cfg(run)
    sc = _sidecar(rd, bundle, ucfg)
    ccfg = _section(ClusterConfig, run, "cluster")
    init = None
    if (rd.path / "ckpt-pretrain.ugt1").exists():
        try:
            init = _load_pretrained(rd, ucfg, bundle)
        except ConfigError as e:
            log.warning("clustering from scratch: %s", e)
    report = cluster(bundle, sc, ucfg, ccfg, init, mode=run["cluster"].get("mode", "end2end"))
    rd.write_trace("cluster", report.loss_trace)
    record = report.to_dict()
    rd.write_metrics(record)
    rd.finish({k: record[k] for k in ("task", "Q", "C")})
    return record


def _corpus(spec: str) -> GraphCorpus:
    named = {"sr16622": sr16622, "decalin-bicyclopentyl": molecule_pair}
    if spec in named:
        return named[spec]()
    if not Path(spec).exists():
        if spec in bundled_names() or "/" not in spec and not spec.endswith(".g6"):
            return bundled_corpus(spec)
        raise DataError(f"corpus not found: {spec}")
    return parse_graph6(spec)


def cmd_isotest(run: dict, threads: int = 1) -> dict:
    ucfg = _model_cfg(run)
    corpus = _corpus(run["iso"]["corpus"])
    report = count_undistinguished(corpus, ucfg, run["iso"]["tolerance"], run["seed"], threads)
    return report.to_dict()


def cmd_eval(run: dict, checkpoint: str) -> dict:
    """Reload a checkpoint under the current model config and score it."""
    ucfg = _model_cfg(run)
    arrays, meta = load_checkpoint(checkpoint, expected_config=ucfg.to_dict())
    params = _params_of(arrays)
    bundle, _ = _dataset(run)
    out_dir = Path(run["output_dir"])
    sc = None
    if (out_dir / "sidecar.bin").exists():
        sc, smeta = load_sidecar_file(out_dir / "sidecar.bin")
        if smeta.get("config") != ucfg.to_dict() or smeta.get("graph_hash") != _graph_hash(bundle):
            sc = None
    if sc is None:
        sc = preprocess(bundle.graph, ucfg)
    inp = prepare_inputs(sc, bundle.features.matrix, ucfg)
    z = forward(inp, params, ucfg)
    record = {"task": "eval", "stage": meta.get("stage"), "config_hash": meta["config_hash"]}
    if "cls.Wa" in params:
        pred = classify_head(z, params).data.argmax(1)
        split = bundle.splits[meta.get("split", 0)] if bundle.splits else None
        rows = split.test if split is not None else bundle.labels.labeled
        record["test_accuracy"] = accuracy(pred, bundle.labels.labels, rows)
        record["labeled_accuracy"] = accuracy(pred, bundle.labels.labels, bundle.labels.labeled)
    if "rec.Wa" in params:
        p = _section(PretrainConfig, run, "pretrain")
        targets = log_scale_targets(sc.stack, p.neg_count, p.floor, p.target_norm).mats
        record["pretrain_loss"] = pretrain_loss(z, inp, targets, params, p.alpha, p.beta,
                                                p.per_step_proj).item()
    return record


# --------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file")
    common.add_argument("--out", help="output run directory")
    common.add_argument("--dataset", help="built-in dataset name")
    common.add_argument("--edges", help="edge-list file")
    common.add_argument("--features", help="node feature CSV")
    common.add_argument("--labels", help="node label file")
    common.add_argument("--seed", type=int)
    common.add_argument("--splits", type=int, help="number of train/val/test splits")
    common.add_argument("--alpha", type=float)
    common.add_argument("--beta", type=float)
    common.add_argument("--neg-count", type=int, dest="neg_count")
    common.add_argument("--epochs", type=int)
    common.add_argument("--threads", type=int, default=int(os.environ.get("UGT_THREADS", "1")))
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ugt", description=__doc__)
    p.add_argument("--version", action="version", version=f"ugt {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("preprocess", "pretrain", "finetune", "cluster"):
        sub.add_parser(name, parents=[common])
    iso = sub.add_parser("isotest", parents=[common])
    iso.add_argument("--corpus", help="graph6 file or built-in corpus (sr16622, "
                                      "decalin-bicyclopentyl, sr25-partial)")
    iso.add_argument("--tolerance", type=float)
    ev = sub.add_parser("eval", parents=[common])
    ev.add_argument("--checkpoint", required=True)
    return p


def _overrides(args) -> dict:
    o: dict = {}
    if args.out:
        o["output_dir"] = args.out
    if args.dataset:
        o["dataset"] = {"builtin": args.dataset}
    elif args.edges:
        o["dataset"] = {k: getattr(args, k) for k in ("edges", "features", "labels") if getattr(args, k)}
    if args.seed is not None:
        o["seed"] = args.seed
    for key, section, field_ in (("alpha", "pretrain", "alpha"), ("beta", "pretrain", "beta"),
                                 ("neg_count", "pretrain", "neg_count"),
                                 ("splits", "finetune", "n_splits")):
        if getattr(args, key) is not None:
            o.setdefault(section, {})[field_] = getattr(args, key)
    if args.epochs is not None:
        section = {"pretrain": "pretrain", "finetune": "finetune", "cluster": "cluster"}.get(args.command)
        if section:
            o.setdefault(section, {})["epochs"] = args.epochs
    if args.command in ("finetune",):
        o.setdefault("finetune", {})["threads"] = args.threads
    if args.command == "isotest":
        if args.corpus:
            o.setdefault("iso", {})["corpus"] = args.corpus
        if args.tolerance is not None:
            o.setdefault("iso", {})["tolerance"] = args.tolerance
    return o


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = load_run_config(args.config, _overrides(args))
        ag.set_default_dtype(np.float64 if run["dtype"] == "float64" else np.float32)
        if args.command == "preprocess":
            result = cmd_preprocess(run)
        elif args.command == "pretrain":
            result = cmd_pretrain(run)
        elif args.command == "finetune":
            result = cmd_finetune(run)
        elif args.command == "cluster":
            result = cmd_cluster(run)
        elif args.command == "isotest":
            result = cmd_isotest(run, args.threads)
        else:
            result = cmd_eval(run, args.checkpoint)
    except ConfigError as e:
        print(f"ugt: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as e:
        print(f"ugt: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"ugt: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
