import pytest

from zsiot.config import (DEFAULTS, apply_overrides, config_hash, default_config, load_config, run_dir,
                          save_snapshot)
from zsiot.errors import ConfigError


def test_unknown_keys_are_all_listed(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("train:\n  epochz: 3\n  lr: 1\nbogus: 1\n")
    with pytest.raises(ConfigError) as e:
        load_config(p)
    for key in ("train.epochz", "train.lr", "bogus"):
        assert key in str(e.value)


def test_override_precedence(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("train:\n  epochs: 5\n")
    cfg = load_config(p, ["train.epochs=7", "iot.architecture=cnn", "augment.gen_hidden=[8, 8]"])
    assert cfg["train"]["epochs"] == 7 and cfg["iot"]["architecture"] == "cnn"
    assert cfg["augment"]["gen_hidden"] == [8, 8]
    assert load_config(p)["train"]["epochs"] == 5


def test_malformed_override():
    with pytest.raises(ConfigError):
        apply_overrides(DEFAULTS, ["train.epochs"])


def test_hash_is_stable_and_ignores_locations():
    a = load_config(dataset="synthetic-imu")
    b = load_config(dataset="synthetic-imu", overrides=["run_root=/elsewhere", "eval.workers=4"])
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(load_config(dataset="synthetic-imu", overrides=["seed=1"]))
    assert run_dir(a).name.startswith("synthetic-imu-") and run_dir(a).name.endswith("-s0")


def test_presets():
    mm = default_config("mmfi-mmwave")
    assert mm["detector"]["retention"] == 0.75 and mm["dataset"]["n_unseen"] == 5 and mm["dataset"]["folds"] == 5
    usc = default_config("usc-had")
    assert usc["detector"]["retention"] == 0.8 and usc["dataset"]["n_unseen"] == 3 and usc["dataset"]["folds"] == 4
    assert usc["text"]["n_ctx"] == 8 and usc["train"]["temperature"] == 0.2
    assert usc["train"]["learning_rate"] == 1e-3 and usc["train"]["momentum"] == 0.9
    assert usc["augment"]["xi"] == 10 and usc["detector"]["k_fraction"] == 0.08
    with pytest.raises(ConfigError):
        default_config("imagenet")


@pytest.mark.parametrize("override", ["train.temperature=0", "detector.retention=1.5", "detector.retention=0",
                                      "text.mode=both", "augment.xi=0", "dataset.folds=0"])
def test_validation(override):
    with pytest.raises(ConfigError):
        load_config(overrides=[override])


def test_snapshot_roundtrip(tmp_path):
    cfg = load_config(overrides=["train.epochs=3"])
    path = save_snapshot(cfg, tmp_path)
    assert load_config(path) == cfg
