import pytest

from aquila.config import SCHEMA, RunConfig
from aquila.errors import ConfigurationError


def write(tmp_path, text):
    path = tmp_path / "run.ini"
    path.write_text(text)
    return path


def test_defaults_are_the_toy_configuration():
    cfg = RunConfig.load()
    mc = cfg.model_config(37)
    assert mc.pyramid.resolution == 64 and mc.query_side == 4 and mc.pyramid.projected_dim == 32
    assert (mc.decoder.d_model, mc.decoder.n_layers, mc.decoder.n_heads) == (64, 4, 2)
    assert cfg.plan(1).steps == cfg.plan(2).steps == 2000
    assert cfg.plan(1).batch_size == 8


def test_file_values_and_overrides(tmp_path):
    path = write(tmp_path, "[decoder]\nn_layers = 2  # shallow\n[train.stage1]\nsteps = 7\n")
    cfg = RunConfig.load(path, ["train.stage1.steps=9", "data.seed=4"], env={})
    assert cfg["decoder"]["n_layers"] == 2
    assert cfg.plan(1).steps == 9
    assert cfg.seed == 4


def test_unknown_keys_and_sections_are_rejected(tmp_path):
    with pytest.raises(ConfigurationError):
        RunConfig.load(write(tmp_path, "[decoder]\nlayers = 2\n"))
    with pytest.raises(ConfigurationError):
        RunConfig.load(write(tmp_path, "[optimizer]\nlr = 1\n"))
    with pytest.raises(ConfigurationError):
        RunConfig.load(overrides=["decoder.n_layers"])


def test_bad_values_are_rejected(tmp_path):
    with pytest.raises(ConfigurationError):
        RunConfig.load(write(tmp_path, "[decoder]\nn_layers = many\n"))
    with pytest.raises(ConfigurationError):
        RunConfig.load(overrides=["pyramid.resolution=100"])
    with pytest.raises(ConfigurationError):
        RunConfig.load(overrides=["decoder.dtype=float16"])


def test_environment_seed_wins(tmp_path):
    cfg = RunConfig.load(write(tmp_path, "[data]\nseed = 3\n"), env={"AQ_SEED": "11"})
    assert cfg.seed == 11
    assert cfg.plan(2).seed == 13


def test_dump_round_trips(tmp_path):
    cfg = RunConfig.load(overrides=["decoder.sfi_layers=1,2", "sfi.fusion=concat"], env={})
    path = tmp_path / "echo.ini"
    cfg.save(path)
    again = RunConfig.load(path, env={})
    assert again.values == cfg.values
    assert set(again.values) == set(SCHEMA)


def test_missing_file_is_a_configuration_error(tmp_path):
    with pytest.raises(ConfigurationError):
        RunConfig.load(tmp_path / "absent.ini")
