import csv
import json

import numpy as np
import pytest

from main import CHECKPOINT_FILE, DATASET_FILE, HELDOUT_FILE, main
from mlp_networks import init_theta, load_checkpoint, save_checkpoint

TINY_CONFIG = """\
# small enough for a unit test
d = 4
v_o = 3
v_p = 2
m_range = 2,3
n_range = 1,2
count = 6
heldout_count = 3
samples_infer = 5
samples_learn = 5
emd_iters = 10
iterations = 3
batch_size = 2
hidden = 5
sample_counts = 2,4
"""


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ("IWSL_OUTPUT_DIR", "IWSL_DATABASE_URL", "DATABASE_URL"):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG)
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def test_synth_writes_header_and_instances(tmp_path, config):
    out = tmp_path / "run"
    assert run("synth", "--config", config, "--out", out) == 0
    lines = (out / DATASET_FILE).read_text().splitlines()
    assert len(lines) == 6 + 1
    assert json.loads(lines[0])["record"] == "header"
    assert len((out / HELDOUT_FILE).read_text().splitlines()) == 3 + 1
    assert (out / "config_snapshot.txt").is_file()


def test_synth_count_flag_overrides_config(tmp_path, config):
    out = tmp_path / "run"
    assert run("synth", "--config", config, "--out", out, "--count", 4) == 0
    assert len((out / DATASET_FILE).read_text().splitlines()) == 4 + 1


def test_synth_is_byte_identical_across_runs(tmp_path, config):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("synth", "--config", config, "--out", a) == 0
    assert run("synth", "--config", config, "--out", b) == 0
    for name in (DATASET_FILE, HELDOUT_FILE, "config_snapshot.txt"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_synth_seed_changes_dataset(tmp_path, config):
    a, b = tmp_path / "a", tmp_path / "b"
    run("synth", "--config", config, "--out", a)
    run("synth", "--config", config, "--out", b, "--seed", 1)
    assert (a / DATASET_FILE).read_bytes() != (b / DATASET_FILE).read_bytes()


def test_negative_count_is_a_config_error(tmp_path, config):
    assert run("synth", "--config", config, "--out", tmp_path, "--count", -3) == 2


def test_usage_errors_exit_2(tmp_path):
    assert run("bogus") == 2
    assert run("synth", "--config", tmp_path / "absent.cfg", "--out", tmp_path) == 2


def test_train_without_dataset_exits_2(tmp_path, config):
    assert run("train", "--config", config, "--out", tmp_path / "empty") == 2


def test_environment_output_dir_wins(tmp_path, config, monkeypatch):
    monkeypatch.setenv("IWSL_OUTPUT_DIR", str(tmp_path / "from_env"))
    assert run("synth", "--config", config, "--out", tmp_path / "from_flag") == 0
    assert (tmp_path / "from_env" / DATASET_FILE).is_file()
    assert not (tmp_path / "from_flag").exists()


def test_train_eval_report(tmp_path, config, capsys):
    out = tmp_path / "run"
    assert run("synth", "--config", config, "--out", out) == 0
    assert run("train", "--config", config, "--out", out) == 0
    assert (out / CHECKPOINT_FILE).is_file()
    log = read_csv(out / "train_log.csv")
    assert len(log) == 3
    assert set(log[0]) >= {"config_hash", "loss", "tau"}

    assert run("eval", "--config", config, "--out", out) == 0
    metrics = read_csv(out / "metrics.csv")
    assert [row["readout"] for row in metrics] == ["posterior", "variational"]
    assert {"combined_recall_at_1", "combined_recall_at_2", "combined_recall_at_3"} <= set(metrics[0])
    mirror = json.loads((out / "metrics.json").read_text())
    assert mirror["config_hash"] == metrics[0]["config_hash"]
    assert "samples_infer = 5" in mirror["config_snapshot"]

    capsys.readouterr()
    assert run("report", "--config", config, "--out", out) == 0
    printed = capsys.readouterr().out
    assert "== train_log" in printed
    assert "== metrics" in printed


def test_eval_without_checkpoint_exits_2(tmp_path, config):
    out = tmp_path / "run"
    run("synth", "--config", config, "--out", out)
    assert run("eval", "--config", config, "--out", out) == 2


def test_results_ignore_worker_count(tmp_path, config):
    serial, pooled = tmp_path / "serial", tmp_path / "pooled"
    for out, workers in ((serial, 1), (pooled, 3)):
        assert run("synth", "--config", config, "--out", out, "--workers", workers) == 0
        assert run("train", "--config", config, "--out", out, "--workers", workers) == 0
        assert run("eval", "--config", config, "--out", out, "--workers", workers) == 0
    for name in (CHECKPOINT_FILE, "train_log.csv", "metrics.csv", "config_snapshot.txt"):
        assert (serial / name).read_bytes() == (pooled / name).read_bytes()


def test_ablate_samples_table(tmp_path, config):
    out = tmp_path / "run"
    run("synth", "--config", config, "--out", out)
    assert run("ablate-samples", "--config", config, "--out", out, "--samples", "16,1,4") == 0
    rows = read_csv(out / "ablation.csv")
    assert [int(row["samples"]) for row in rows] == [1, 4, 16]
    assert len({row["dataset_hash"] for row in rows}) == 1
    assert all(float(row["bound_se"]) >= 0.0 for row in rows)
    for smaller, larger in zip(rows, rows[1:]):
        assert float(larger["bound_mean"]) >= float(smaller["bound_mean"]) - float(larger["bound_se"])


def test_ablate_single_sample_count(tmp_path, config):
    out = tmp_path / "run"
    run("synth", "--config", config, "--out", out)
    assert run("ablate-samples", "--config", config, "--out", out, "--samples", "10") == 0
    assert [int(row["samples"]) for row in read_csv(out / "ablation.csv")] == [10]


def test_zero_step_training_matches_random_parameters(tmp_path, config):
    frozen = tmp_path / "frozen.cfg"
    frozen.write_text(TINY_CONFIG + "learning_rate = 0\n")
    out = tmp_path / "run"
    assert run("synth", "--config", frozen, "--out", out) == 0
    assert run("train", "--config", frozen, "--out", out) == 0
    assert run("eval", "--config", frozen, "--out", out) == 0
    trained = (out / "metrics.csv").read_bytes()

    _, tau = load_checkpoint(out / CHECKPOINT_FILE)
    save_checkpoint(tmp_path / "random.bin", init_theta(4, 3, 2, hidden_sizes=(5,), seed=0), tau)
    assert run("eval", "--config", frozen, "--out", out, "--checkpoint", tmp_path / "random.bin") == 0
    assert (out / "metrics.csv").read_bytes() == trained


def test_divergent_training_exits_3_and_keeps_checkpoint(tmp_path, config):
    divergent = tmp_path / "divergent.cfg"
    divergent.write_text(TINY_CONFIG.replace("iterations = 3", "iterations = 50") + "learning_rate = 1e308\n")
    out = tmp_path / "run"
    assert run("synth", "--config", divergent, "--out", out) == 0
    assert run("train", "--config", divergent, "--out", out) == 3
    theta, tau = load_checkpoint(out / CHECKPOINT_FILE)
    assert all(np.all(np.isfinite(p)) for p in theta.parameters())
    assert 0.3 <= tau <= 1.0


def test_registry_records_runs(tmp_path, config, monkeypatch, capsys):
    monkeypatch.setenv("IWSL_DATABASE_URL", f"sqlite:///{tmp_path / 'registry.db'}")
    out = tmp_path / "run"
    assert run("synth", "--config", config, "--out", out) == 0
    capsys.readouterr()
    assert run("report", "--config", config, "--out", out) == 0
    assert "synth config" in capsys.readouterr().out


@pytest.mark.slow
def test_audit_passes_and_fails_on_perturbation(tmp_path):
    assert run("audit", "--out", tmp_path / "clean") == 0
    rows = read_csv(tmp_path / "clean" / "audit.csv")
    assert len(rows) == 13
    assert run("audit", "--out", tmp_path / "perturbed", "--perturb-density", 1.0) == 1
