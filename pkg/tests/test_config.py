from pathlib import Path

import pytest

from fastretrain.config import TrainConfig, apply_setting, load_config, parse_config
from fastretrain.errors import ConfigError

CONFIGS = Path(__file__).parent.parent / "configs"


def test_defaults_are_valid():
    cfg = parse_config("")
    assert cfg == TrainConfig().validate()
    assert cfg.retrain_pullback == "after" and cfg.retrain_mu == 1.0


def test_parse_values_and_comments():
    cfg = parse_config(
        """
        # a comment line
        arch = cnn-s   # trailing comment
        epochs = 3
        hidden = 32,16
        data.kind = spirals
        data.image_shape = 1,12,12
        sgd.lr = 0:0.1,2:0.01
        retrain.reg_c = 4,2,1
        retrain.enabled = off
        retrain.pullback = before
        metrics.wall_clock = yes
        """
    )
    assert cfg.arch == "cnn-s" and cfg.epochs == 3 and cfg.hidden == (32, 16)
    assert cfg.data.kind == "spirals" and cfg.data.image_shape == (1, 12, 12)
    assert cfg.retrain_reg_c == (4.0, 2.0, 1.0)
    assert cfg.retrain_enabled is False and cfg.metrics_wall_clock is True
    assert cfg.retrain_pullback == "before"
    assert cfg.sgd().lr == ((0, 0.1), (2, 0.01))


@pytest.mark.parametrize(
    "text, match",
    [
        ("bogus = 1", "unknown config key"),
        ("data.bogus = 1", "unknown config key"),
        ("data = 1", "unknown config key"),
        ("epochs", "expected 'key = value'"),
        ("epochs = many", "bad value"),
        ("retrain.enabled = maybe", "bad value"),
        ("epochs = 0", "epochs"),
        ("arch = vgg", "arch"),
        ("retrain.mu = 0", "mu"),
        ("retrain.mu = 1.5", "mu"),
        ("retrain.reg_c = 0", "reg_c"),
        ("retrain.dropout_rate = 1", "dropout_rate"),
        ("retrain.pullback = sideways", "pullback"),
        ("sgd.lr = 0:-1", "sgd"),
        ("sgd.momentum = -0.5", "momentum"),
        ("ra_schedule = 0.2:1", "fraction 0"),
        ("data.kind = parquet", "data.kind"),
    ],
)
def test_invalid_configs(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_to_text_roundtrip():
    cfg = parse_config("arch = mlp\nhidden = 8\nretrain.reg_c = 2,3,4\ndata.train_limit = 50\nsgd.lr = 0:0.2,4:0.02\n")
    again = parse_config(cfg.to_text())
    assert again == cfg


def test_apply_setting_overrides():
    cfg = parse_config("")
    apply_setting(cfg, "data.noise", "0.5")
    apply_setting(cfg, "retrain.mp_batch_size", "64")
    assert cfg.data.noise == 0.5 and cfg.retrain_mp_batch_size == 64
    with pytest.raises(ConfigError):
        apply_setting(cfg, "nope", "1")


def test_relative_paths_resolve_against_config_dir(tmp_path):
    (tmp_path / "sub").mkdir()
    p = tmp_path / "sub" / "run.cfg"
    p.write_text("data.kind = csv\ndata.train_csv = ../train.csv\ndata.test_csv = /abs/test.csv\n")
    cfg = load_config(p)
    assert Path(cfg.data.train_csv).resolve() == (tmp_path / "train.csv").resolve()
    assert cfg.data.test_csv == "/abs/test.csv"


def test_missing_file_is_os_error(tmp_path):
    with pytest.raises(OSError):
        load_config(tmp_path / "absent.cfg")


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.cfg")), ids=lambda p: p.name)
def test_shipped_configs_parse(path):
    cfg = load_config(path)
    for name in ("train_images", "train_labels", "test_images", "test_labels"):
        value = getattr(cfg.data, name)
        assert not value or Path(value).exists()
