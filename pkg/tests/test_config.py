from pathlib import Path

import pytest
from hydra import compose, initialize_config_dir
from omegaconf import OmegaConf

from lingrid.config import (
    RunManifest,
    apply_config_file,
    merge_strict,
    parse_config_lines,
    read_config_file,
    schema,
    validate_config,
    write_config_file,
)
from lingrid.errors import ConfigError

CONF_DIR = Path(__file__).resolve().parent.parent / "conf"


def with_values(**values):
    return merge_strict(OmegaConf.create(values))


def test_defaults_are_valid():
    validate_config(schema())


@pytest.mark.parametrize(
    "values, message",
    [
        ({"cmd": "fly"}, "unknown command"),
        ({"mode": "rank3"}, "unknown mode"),
        ({"modes": ["basel", "nope"]}, "unknown mode"),
        ({"lambda_t": -0.1}, "lambda_t"),
        ({"lambda_t_values": [0.1, -1.0]}, "lambda_t_values"),
        ({"n_test_ids": 1}, "n_test_ids"),
        ({"image_height": 60}, "divisible"),
        ({"pool_window": [16, 1]}, "pooling window"),
        ({"precision": "half"}, "precision"),
        ({"epochs": 0}, "epochs"),
        ({"momentum": 1.0}, "momentum"),
        ({"seeds": []}, "seeds"),
    ],
)
def test_invalid_values(values, message):
    with pytest.raises(ConfigError, match=message):
        validate_config(with_values(**values))


def test_parse_config_lines():
    cfg = parse_config_lines(["# comment", "", "lr=0.5  # inline", "modes=[basel,GDA]"])
    assert cfg.lr == 0.5
    assert list(cfg.modes) == ["basel", "GDA"]
    with pytest.raises(ConfigError, match="run.cfg:2"):
        parse_config_lines(["lr=0.5", "epochs 3"], "run.cfg")


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError):
        merge_strict(OmegaConf.create({"learning_rate": 0.1}))
    with pytest.raises(ConfigError):
        merge_strict(OmegaConf.create({"epochs": "many"}))


def test_config_file_round_trip(tmp_path):
    cfg = with_values(mode="GDA", lr=0.05, conv_widths=[4, 8, 8], checkpoint=None, plot=False)
    path = tmp_path / "config.cfg"
    write_config_file(cfg, path)
    assert "plot=false" in path.read_text().splitlines()
    assert read_config_file(path) == cfg


def test_missing_config_file():
    with pytest.raises(ConfigError, match="not found"):
        read_config_file("no/such/config.cfg")


def test_command_line_beats_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("lr=0.5\nepochs=3\n")
    cfg = with_values(config_file=str(path), epochs=9)
    merged = apply_config_file(cfg, ["epochs=7"])
    assert merged.lr == 0.5
    assert merged.epochs == 7
    assert apply_config_file(with_values(epochs=9)).epochs == 9


def test_config_file_with_unknown_key(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("speed=3\n")
    with pytest.raises(ConfigError):
        apply_config_file(with_values(config_file=str(path)))


def test_manifest(tmp_path):
    manifest = RunManifest(
        config={"mode": "GDA"},
        dataset_hash="abc",
        metrics={"top1": 0.5},
        wall_clock_s=1.25,
        seed=3,
        mode="GDA",
    )
    manifest.save(tmp_path / "manifest.json")
    loaded = RunManifest.load(tmp_path / "manifest.json")
    assert loaded == manifest
    assert "wall_clock_s" not in loaded.reproducible_part()
    loaded.wall_clock_s = 9.0
    assert loaded.reproducible_part() == manifest.reproducible_part()


def test_compose_reads_seeds_from_the_environment(monkeypatch):
    monkeypatch.setenv("LINGRID_SEED", "5")
    monkeypatch.setenv("LINGRID_RUN_DIR", "runs/env")
    with initialize_config_dir(config_dir=str(CONF_DIR), version_base=None):
        cfg = compose(config_name="config", overrides=["cmd=gradcheck"])
    assert cfg.seed == 5
    assert cfg.data_seed == 0
    assert cfg.run_dir == "runs/env"
    validate_config(cfg)
