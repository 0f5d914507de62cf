import json
import os
import subprocess
import sys

import numpy as np
import pytest

from dcgl import cli


def run_cli(args, env=None):
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    code = run_cli(["synth", "--users", 20, "--items", 25, "--entities", 35,
                    "--seed", 3, "--out", out])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def train_dir(tmp_path_factory, synth_dir):
    out = tmp_path_factory.mktemp("train")
    code = run_cli([
        "train", "--interactions", synth_dir / "interactions.tsv",
        "--kg", synth_dir / "kg.tsv", "--embeddings", synth_dir / "semantic.emb",
        "--split", synth_dir / "split.txt", "--embed-dim", 8, "--kg-layers", 1,
        "--cf-layers", 1, "--max-epochs", 2, "--batch-size", 64,
        "--out", out, "--force",
    ])
    assert code == 0
    return out


def test_synth_outputs_exist(synth_dir):
    for name in ("interactions.tsv", "kg.tsv", "semantic.emb", "id_map.tsv",
                 "split.txt", "manifest.json"):
        assert (synth_dir / name).exists(), name


def test_synth_deterministic(tmp_path, synth_dir):
    out2 = tmp_path / "again"
    assert run_cli(["synth", "--users", 20, "--items", 25, "--entities", 35,
                    "--seed", 3, "--out", out2]) == 0
    for name in ("interactions.tsv", "kg.tsv", "semantic.emb", "split.txt", "id_map.tsv"):
        assert (synth_dir / name).read_bytes() == (out2 / name).read_bytes(), name


def test_synth_counts_match_flags(synth_dir):
    from dcgl.corpus import parse_interactions

    with open(synth_dir / "interactions.tsv", encoding="utf-8") as fh:
        graph = parse_interactions(fh)
    assert graph.num_users == 20
    assert graph.num_items == 25


def test_synth_refuses_nonempty_dir_without_force(synth_dir):
    assert run_cli(["synth", "--users", 5, "--items", 6, "--entities", 8,
                    "--out", synth_dir]) == cli.EXIT_CONFIG


def test_train_outputs_and_manifest(train_dir, synth_dir):
    assert (train_dir / "checkpoint.dcgl").exists()
    assert (train_dir / "config.txt").exists()
    history = (train_dir / "history.jsonl").read_text().splitlines()
    assert len(history) == 2  # one line per epoch
    manifest = json.loads((train_dir / "manifest.json").read_text())
    assert manifest["status"] == "complete"
    assert manifest["command"] == "train"
    assert str(synth_dir / "interactions.tsv") in manifest["inputs"]
    assert all(len(d) == 64 for d in manifest["inputs"].values())  # sha256 digests


def test_train_single_epoch_single_history_line(tmp_path, synth_dir):
    out = tmp_path / "one"
    assert run_cli([
        "train", "--interactions", synth_dir / "interactions.tsv",
        "--kg", synth_dir / "kg.tsv", "--embeddings", synth_dir / "semantic.emb",
        "--embed-dim", 8, "--kg-layers", 1, "--cf-layers", 1,
        "--max-epochs", 1, "--out", out,
    ]) == 0
    assert len((out / "history.jsonl").read_text().splitlines()) == 1


def test_train_rerun_identical_history(tmp_path, synth_dir, train_dir):
    out2 = tmp_path / "rerun"
    assert run_cli([
        "train", "--interactions", synth_dir / "interactions.tsv",
        "--kg", synth_dir / "kg.tsv", "--embeddings", synth_dir / "semantic.emb",
        "--split", synth_dir / "split.txt", "--embed-dim", 8, "--kg-layers", 1,
        "--cf-layers", 1, "--max-epochs", 2, "--batch-size", 64,
        "--out", out2,
    ]) == 0
    assert (out2 / "history.jsonl").read_bytes() == (train_dir / "history.jsonl").read_bytes()
    assert (out2 / "checkpoint.dcgl").read_bytes() == (train_dir / "checkpoint.dcgl").read_bytes()


def test_train_missing_embeddings_is_startup_error(tmp_path, synth_dir):
    out = tmp_path / "noemb"
    code = run_cli([
        "train", "--interactions", synth_dir / "interactions.tsv",
        "--kg", synth_dir / "kg.tsv", "--max-epochs", 1, "--out", out,
    ])
    assert code == cli.EXIT_DATA


def test_train_no_llm_runs_without_embeddings(tmp_path, synth_dir):
    out = tmp_path / "nollm"
    assert run_cli([
        "train", "--interactions", synth_dir / "interactions.tsv",
        "--kg", synth_dir / "kg.tsv", "--ablation", "no_llm",
        "--embed-dim", 8, "--kg-layers", 1, "--cf-layers", 1,
        "--max-epochs", 1, "--out", out,
    ]) == 0


def test_train_no_freq_history_constant_gates(tmp_path, synth_dir):
    out = tmp_path / "nofreq"
    assert run_cli([
        "train", "--interactions", synth_dir / "interactions.tsv",
        "--kg", synth_dir / "kg.tsv", "--embeddings", synth_dir / "semantic.emb",
        "--ablation", "no_freq", "--embed-dim", 8, "--kg-layers", 1,
        "--cf-layers", 1, "--max-epochs", 2, "--out", out,
    ]) == 0
    for line in (out / "history.jsonl").read_text().splitlines():
        record = json.loads(line)
        assert record["gate_user_mean"] == 0.5
        assert record["gate_item_mean"] == 0.5


def test_env_seed_overrides_config(tmp_path, synth_dir, monkeypatch):
    out = tmp_path / "envseed"
    monkeypatch.setenv("DCGL_SEED", "777")
    assert run_cli([
        "train", "--interactions", synth_dir / "interactions.tsv",
        "--kg", synth_dir / "kg.tsv", "--embeddings", synth_dir / "semantic.emb",
        "--seed", 1, "--embed-dim", 8, "--kg-layers", 1, "--cf-layers", 1,
        "--max-epochs", 1, "--out", out,
    ]) == 0
    config_text = (out / "config.txt").read_text()
    assert "seed=777" in config_text


def test_eval_outputs(tmp_path, synth_dir, train_dir):
    out = tmp_path / "eval"
    code = run_cli([
        "eval", "--checkpoint", train_dir / "checkpoint.dcgl",
        "--config", train_dir / "config.txt",
        "--interactions", synth_dir / "interactions.tsv",
        "--kg", synth_dir / "kg.tsv", "--embeddings", synth_dir / "semantic.emb",
        "--split", synth_dir / "split.txt", "--ks", "5,10", "--out", out,
    ])
    assert code == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert set(metrics["metrics"]) == {"5", "10"}
    assert "user" in metrics["groups"] and "item" in metrics["groups"]
    assert (out / "gates.tsv").read_text().startswith("kind\tid\tfreq\tphi\tgate")


def test_eval_default_ks_are_50_100(tmp_path, synth_dir, train_dir):
    out = tmp_path / "evaldefault"
    assert run_cli([
        "eval", "--checkpoint", train_dir / "checkpoint.dcgl",
        "--config", train_dir / "config.txt",
        "--interactions", synth_dir / "interactions.tsv",
        "--kg", synth_dir / "kg.tsv", "--embeddings", synth_dir / "semantic.emb",
        "--split", synth_dir / "split.txt", "--out", out,
    ]) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert set(metrics["metrics"]) == {"50", "100"}


def test_eval_deterministic(tmp_path, synth_dir, train_dir):
    outs = []
    for name in ("e1", "e2"):
        out = tmp_path / name
        assert run_cli([
            "eval", "--checkpoint", train_dir / "checkpoint.dcgl",
            "--config", train_dir / "config.txt",
            "--interactions", synth_dir / "interactions.tsv",
            "--kg", synth_dir / "kg.tsv", "--embeddings", synth_dir / "semantic.emb",
            "--split", synth_dir / "split.txt", "--out", out,
        ]) == 0
        outs.append((out / "metrics.json").read_bytes())
    assert outs[0] == outs[1]


def test_eval_config_mismatch_refused(tmp_path, synth_dir, train_dir):
    bad_config = tmp_path / "bad.txt"
    text = (train_dir / "config.txt").read_text().replace("seed=", "seed=9")
    bad_config.write_text(text)
    out = tmp_path / "evalbad"
    code = run_cli([
        "eval", "--checkpoint", train_dir / "checkpoint.dcgl",
        "--config", bad_config,
        "--interactions", synth_dir / "interactions.tsv",
        "--kg", synth_dir / "kg.tsv", "--embeddings", synth_dir / "semantic.emb",
        "--out", out,
    ])
    assert code == cli.EXIT_CONFIG


def test_eval_custom_groups(tmp_path, synth_dir, train_dir):
    out = tmp_path / "groups"
    assert run_cli([
        "eval", "--checkpoint", train_dir / "checkpoint.dcgl",
        "--config", train_dir / "config.txt",
        "--interactions", synth_dir / "interactions.tsv",
        "--kg", synth_dir / "kg.tsv", "--embeddings", synth_dir / "semantic.emb",
        "--split", synth_dir / "split.txt",
        "--groups", "user:0,18,36,72", "--ks", "5", "--out", out,
    ]) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    intervals = [row["interval"] for row in metrics["groups"]["user"]["5"]]
    assert intervals == ["[0,18)", "[18,36)", "[36,72)", "[72+)"]


def test_gradcheck_quick_pass(capsys):
    assert run_cli(["gradcheck", "--seed", "1", "--trials", "1"]) == 0
    out = capsys.readouterr().out
    assert "[pass]" in out and "FAIL" not in out


def test_bad_config_file_exit_code(tmp_path, synth_dir):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("unknown_key=1\n")
    out = tmp_path / "run"
    code = run_cli([
        "train", "--interactions", synth_dir / "interactions.tsv",
        "--kg", synth_dir / "kg.tsv", "--embeddings", synth_dir / "semantic.emb",
        "--config", cfg, "--max-epochs", 1, "--out", out,
    ])
    assert code == cli.EXIT_CONFIG


def test_missing_data_exit_code(tmp_path):
    out = tmp_path / "missing"
    code = run_cli([
        "train", "--interactions", "/nonexistent/x.tsv", "--kg", "/nonexistent/y.tsv",
        "--ablation", "no_llm", "--max-epochs", 1, "--out", out,
    ])
    assert code == cli.EXIT_DATA


def test_console_entrypoint_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "dcgl.cli", "gradcheck", "--trials", "0"],
        capture_output=True, text=True, timeout=120,
        env={**os.environ, "PYTHONPATH": os.pathsep.join(sys.path)},
    )
    assert proc.returncode == 0
