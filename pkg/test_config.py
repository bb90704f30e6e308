import json

import pytest
from pydantic import ValidationError

from src.config import (
    DiffuseConfig,
    EncoderConfig,
    Measure,
    RunConfig,
    ScaleSchedule,
    Strategy,
    TrainConfig,
    load_run_config,
)
from src.errors import ConfigError


@pytest.fixture(autouse=True)
def clean_env(monkeypatch, tmp_path):
    monkeypatch.chdir(tmp_path)
    for name in ("MW_SEED", "MW_N_JOBS", "MW_LOG_LEVEL", "MW_RUNS_DIR"):
        monkeypatch.delenv(name, raising=False)


def test_defaults():
    cfg = load_run_config()
    assert cfg == RunConfig()
    enc = cfg.train.encoder
    assert (enc.measure, enc.strategy) == (Measure.BACC, Strategy.EFFICIENT)
    assert (enc.significance_s, enc.uniqueness_u) == (0.5, 0.4)
    assert (enc.diffuse.kernel_size, enc.diffuse.sigma) == (5, 2.0)
    assert cfg.train.init_size == (10, 20)
    assert cfg.train.stat.xi == 6.0
    assert (cfg.train.context, cfg.train.grow_support, cfg.train.incremental) == ((4, 4), 0.5, True)


def test_yaml_and_json(tmp_path):
    (tmp_path / "run.yaml").write_text("train:\n  seed: 9\n  encoder:\n    measure: zncc\n", encoding="utf-8")
    cfg = load_run_config(tmp_path / "run.yaml")
    assert cfg.seed == 9
    assert cfg.train.encoder.measure == Measure.ZNCC
    (tmp_path / "run.json").write_text(json.dumps({"schema": "mw/1", "out_dir": "elsewhere"}), encoding="utf-8")
    assert load_run_config(tmp_path / "run.json").out_dir == "elsewhere"


def test_environment_overrides(tmp_path, monkeypatch):
    monkeypatch.setenv("MW_SEED", "42")
    monkeypatch.setenv("MW_N_JOBS", "3")
    cfg = load_run_config()
    assert cfg.seed == 42
    assert cfg.train.encoder.n_jobs == 3
    assert load_run_config(use_env=False).seed == 0


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "missing.yaml")
    (tmp_path / "extra.yaml").write_text("train:\n  unknown: 1\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "extra.yaml")
    (tmp_path / "broken.yaml").write_text("train: [", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "broken.yaml")


def test_dotted_overrides():
    cfg = RunConfig().with_overrides(**{"train.epochs": 3, "train.encoder.strategy": "greedy", "train.seed": None})
    assert cfg.train.epochs == 3
    assert cfg.train.encoder.strategy == Strategy.GREEDY
    assert cfg.seed == 0
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(**{"train.encoder.significance_s": 2.0})


def test_model_validation():
    with pytest.raises(ValidationError):
        DiffuseConfig(kernel_size=4)
    with pytest.raises(ValidationError):
        EncoderConfig(flips=(5,))
    with pytest.raises(ValidationError):
        EncoderConfig(scales=())
    with pytest.raises(ValidationError):
        TrainConfig(context=(-1, 4))
    with pytest.raises(ValidationError):
        TrainConfig(grow_support=0.0)
    assert ScaleSchedule(widths=(20, 40)).widths == (20, 40)
