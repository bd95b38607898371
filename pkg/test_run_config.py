import pytest

from errors import ConfigError
from gumbel_sampler import DensityMode
from run_config import (OUTPUT_DIR_ENV, RunConfig, config_hash, config_snapshot, load_run_config,
                        parse_key_value_text)
from variational_inference import ReadoutMode


@pytest.fixture(autouse=True)
def no_output_env(monkeypatch):
    monkeypatch.delenv(OUTPUT_DIR_ENV, raising=False)


def test_parse_key_value_text():
    text = "# task\nv_o = 6\n\nhidden = 32, 16  # two layers\nreadout=variational\n"
    assert parse_key_value_text(text) == {"v_o": "6", "hidden": "32, 16", "readout": "variational"}


@pytest.mark.parametrize("text", ["v_o 6\n", "= 6\n", "v_o = 1\nv_o = 2\n"])
def test_parse_rejects_malformed_lines(text):
    with pytest.raises(ConfigError):
        parse_key_value_text(text)


def test_defaults_without_file():
    cfg = load_run_config()
    assert cfg.samples_infer == 50
    assert cfg.samples_learn == 5000
    assert (cfg.emd_iters, cfg.emd_gamma, cfg.emd_eps) == (300, 1.0, 1e-5)
    assert cfg.readout is ReadoutMode.POSTERIOR
    assert cfg.density is DensityMode.PAPER
    assert cfg.recall_ks == [1, 2, 3]


def test_file_values_are_typed(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("v_o = 6\nhidden = 32,16\nm_range = 2,3\nsample_counts = 10\nrecall_ks = 1,5\ndensity = exact\n")
    cfg = load_run_config(path)
    assert cfg.v_o == 6
    assert cfg.hidden == [32, 16]
    assert cfg.m_range == (2, 3)
    assert cfg.sample_counts == [10]
    assert cfg.recall_ks == [1, 5]
    assert cfg.density is DensityMode.EXACT


@pytest.mark.parametrize("value", ["paper", "surrogate"])
def test_density_paper_and_alias(tmp_path, value):
    path = tmp_path / "run.cfg"
    path.write_text(f"density = {value}\n")
    assert load_run_config(path).density is DensityMode.PAPER
    assert "density = paper" in config_snapshot(load_run_config(path))


def test_overrides_beat_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 3\nworkers = 2\n")
    cfg = load_run_config(path, {"seed": 9, "workers": None})
    assert cfg.seed == 9
    assert cfg.workers == 2


def test_environment_sets_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "elsewhere"))
    cfg = load_run_config(overrides={"output_dir": "ignored"})
    assert cfg.output_dir == str(tmp_path / "elsewhere")


@pytest.mark.parametrize("text", ["unknown_key = 1\n", "samples_infer = 0\n", "tau = 0.1\ntau_min = 0.3\n",
                                  "m_range = 3,1\n", "readout = argmax\n", "recall_ks = 0,2\n"])
def test_invalid_configs_raise_config_error(tmp_path, text):
    path = tmp_path / "run.cfg"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_run_config(path)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "absent.cfg")


def test_snapshot_is_sorted_and_skips_runner_keys():
    snapshot = config_snapshot(RunConfig(workers=4, output_dir="x", registry_url="sqlite://"))
    keys = [line.split(" = ")[0] for line in snapshot.strip().splitlines()]
    assert keys == sorted(keys)
    assert not {"workers", "output_dir", "registry_url"} & set(keys)
    assert "emd_eps = 1e-05" in snapshot
    assert "hidden = 64" in snapshot


def test_hash_ignores_runner_keys_but_not_results():
    base = config_hash(RunConfig())
    assert config_hash(RunConfig(workers=8, output_dir="elsewhere")) == base
    assert config_hash(RunConfig(seed=1)) != base


def test_projections_carry_values():
    cfg = RunConfig(tau=0.8, tau_min=0.2, beta=0.01, emd_iters=40, samples_infer=7, hidden=[8, 4])
    assert cfg.schedule().tau == 0.8
    assert cfg.emd_config().max_iters == 40
    assert cfg.inference_config().samples_infer == 7
    assert cfg.inference_config(tau=0.4).tau == 0.4
    assert cfg.learn_config().hidden == [8, 4]
    assert cfg.task_config().d == cfg.d
