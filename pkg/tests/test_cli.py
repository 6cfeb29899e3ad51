import json
import subprocess
import sys

import pytest

from ugt.checkpoint import load_checkpoint
from ugt.cli import EXIT_CONFIG, EXIT_DATA, load_run_config, main
from ugt.errors import ConfigError
from ugt.model import load_sidecar_file

FAST = ["--epochs", "40"]


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    return code, (json.loads(out) if code == 0 and out.strip() else None)


def write_config(tmp_path, cfg, name="run.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def test_preprocess_p3(tmp_path, capsys):
    cfg = write_config(tmp_path, {"model": {"top_m": 0}})
    code, summary = run(capsys, "preprocess", "--dataset", "p3", "--config", cfg, "--out", str(tmp_path))
    assert code == 0
    assert summary["n_nodes"] == 3 and summary["n_identities"] == 3 and summary["n_virtual_edges"] == 0
    for f in ("config.json", "manifest.json", "sidecar.bin", "sidecar.json"):
        assert (tmp_path / f).exists()
    sc, meta = load_sidecar_file(tmp_path / "sidecar.bin")
    assert sc.identities.shape[0] == 3 and "graph_hash" in meta


def test_pipeline_two_clique(tmp_path, capsys):
    out = str(tmp_path)
    assert run(capsys, "pretrain", "--dataset", "two-clique", "--out", out, *FAST)[0] == 0
    code, rec = run(capsys, "finetune", "--dataset", "two-clique", "--out", out, "--epochs", "100")
    assert code == 0 and rec["accuracy_mean"] == 1.0
    for ckpt in ("ckpt-pretrain.ugt1", "ckpt-finetune.ugt1"):
        code, ev = run(capsys, "eval", "--dataset", "two-clique", "--out", out, "--checkpoint", str(tmp_path / ckpt))
        assert code == 0 and ev["config_hash"] == load_checkpoint(tmp_path / ckpt)[1]["config_hash"]
    assert ev["test_accuracy"] == 1.0
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(x)["task"] for x in lines] == ["pretrain", "node_classification"]
    assert (tmp_path / "traces.csv").read_text().startswith("epoch,loss\n")
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["command"] == "finetune" and len(manifest["config_hash"]) == 16


def test_eval_with_mismatched_width_is_config_error(tmp_path, capsys):
    out = str(tmp_path)
    assert run(capsys, "pretrain", "--dataset", "two-clique", "--out", out, "--epochs", "2")[0] == 0
    cfg = write_config(tmp_path, {"model": {"hidden": 16}})
    code = main(["eval", "--config", cfg, "--dataset", "two-clique", "--out", out,
                 "--checkpoint", str(tmp_path / "ckpt-pretrain.ugt1")])
    assert code == EXIT_CONFIG
    assert "hash" in capsys.readouterr().err


def test_identical_runs_write_identical_metrics(tmp_path, capsys):
    texts = []
    for sub in ("a", "b"):
        out = str(tmp_path / sub)
        run(capsys, "pretrain", "--dataset", "two-community", "--out", out, "--epochs", "10")
        run(capsys, "finetune", "--dataset", "two-community", "--out", out, "--epochs", "20", "--splits", "3")
        texts.append([(tmp_path / sub / f).read_bytes() for f in ("metrics-pretrain.json", "metrics-finetune.json",
                                                                   "ckpt-pretrain.ugt1", "traces.csv")])
    assert texts[0] == texts[1]


def test_cluster_and_isotest(tmp_path, capsys):
    code, rec = run(capsys, "cluster", "--dataset", "two-triangles", "--out", str(tmp_path))
    assert code == 0 and rec["Q"] == pytest.approx(0.5)
    code, rep = run(capsys, "isotest", "--corpus", "decalin-bicyclopentyl", "--out", str(tmp_path / "iso"))
    assert code == 0 and rep["n_undistinguished"] == 0
    code, rep = run(capsys, "isotest", "--corpus", "sr25-partial", "--out", str(tmp_path / "iso"))
    assert code == 0 and rep["n_comparisons"] == 10


def test_user_dataset_files(tmp_path, capsys):
    # K4 and K6: labels follow the clique, which one-hot degree features already reveal
    (tmp_path / "e.txt").write_text("\n".join(f"{i} {j}" for i in range(4) for j in range(i + 1, 4)) + "\n"
                                    + "\n".join(f"{i} {j}" for i in range(4, 10) for j in range(i + 1, 10)) + "\n")
    (tmp_path / "l.txt").write_text("\n".join(f"{i} {int(i >= 4)}" for i in range(10)) + "\n")
    code, rec = run(capsys, "finetune", "--edges", str(tmp_path / "e.txt"), "--labels", str(tmp_path / "l.txt"),
                    "--out", str(tmp_path / "r"), "--epochs", "60", "--splits", "2",
                    "--config", write_config(tmp_path, {"finetune": {"init": "scratch"}}))
    assert code == 0 and rec["accuracy_mean"] == 1.0
    manifest = json.loads((tmp_path / "r" / "manifest.json").read_text())
    assert set(manifest["inputs"]) == {"edges", "labels"}


def test_error_exit_codes(tmp_path, capsys):
    bad = write_config(tmp_path, {"model": {"hidden": "wide"}})
    assert main(["preprocess", "--config", bad, "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["preprocess", "--edges", str(tmp_path / "missing.txt"), "--out", str(tmp_path)]) == EXIT_DATA
    (tmp_path / "bad.txt").write_text("0 1\n1 q\n")
    assert main(["preprocess", "--edges", str(tmp_path / "bad.txt"), "--out", str(tmp_path)]) == EXIT_DATA
    assert main(["finetune", "--dataset", "two-clique", "--out", str(tmp_path / "fresh")]) == EXIT_DATA
    assert main(["isotest", "--corpus", "nope", "--out", str(tmp_path)]) == EXIT_DATA


def test_flags_override_config(tmp_path):
    cfg = write_config(tmp_path, {"seed": 4, "pretrain": {"epochs": 7}})
    run_cfg = load_run_config(cfg, {"seed": 9})
    assert run_cfg["seed"] == 9 and run_cfg["pretrain"]["epochs"] == 7
    with pytest.raises(ConfigError):
        load_run_config(write_config(tmp_path, {"unknown": 1}, "u.json"), {})


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ugt", "preprocess", "--dataset", "p3", "--out", str(tmp_path)],
                          capture_output=True, text=True, check=True)
    assert json.loads(proc.stdout)["n_nodes"] == 3


def test_pretrained_checkpoint_from_other_dataset(tmp_path, capsys):
    out = str(tmp_path)
    assert run(capsys, "pretrain", "--dataset", "two-community", "--out", out, "--epochs", "2")[0] == 0
    code, rec = run(capsys, "cluster", "--dataset", "two-triangles", "--out", out)
    assert code == 0 and rec["Q"] == pytest.approx(0.5)
    code = main(["finetune", "--dataset", "two-clique", "--out", out, "--epochs", "2"])
    assert code == EXIT_CONFIG and "input features" in capsys.readouterr().err
