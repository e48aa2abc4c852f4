import json
from pathlib import Path

import pytest

from turbotrain.config import ConfigError, RunConfig, dump_config, load_config
from turbotrain.model import ModelConfig

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def _cfg(tmp_path, text):
    p = tmp_path / "c.yaml"
    p.write_text(text)
    return p


def test_defaults_without_file():
    cfg = load_config()
    assert cfg.balance == (2000, 1000) and cfg.strategy == "turbotrain"
    assert cfg.model_config() == ModelConfig()


@pytest.mark.parametrize("name", ["desk.yaml", "smoke.yaml"])
def test_shipped_configs_load(name):
    load_config(CONFIGS / name)


def test_desk_config_settings():
    cfg = load_config(CONFIGS / "desk.yaml")
    t = cfg.train_config()
    assert (t.epochs, t.batch_size, t.optimizer.lr, t.balance, t.symmetric) == (40, 2, 0.002, (20, 10), True)
    assert (cfg.pretrain.epochs, cfg.pretrain.batch_size, cfg.pretrain.mask_ratio) == (15, 4, 0.7)
    assert cfg.compare.seeds == (0, 1, 2) and (cfg.compare.n_train, cfg.compare.n_test) == (64, 16)


def test_json_accepted(tmp_path):
    cfg = load_config(_cfg(tmp_path, json.dumps({"seed": 4, "train": {"epochs": 2}})))
    assert cfg.seed == 4 and cfg.train.epochs == 2


def test_overrides_win(tmp_path):
    p = _cfg(tmp_path, "seed: 1\nstrategy: one-time\nbalance: [4, 2]\npaths: {out: a}\n")
    cfg = load_config(p, {"seed": 8, "strategy": "pretrain-only", "balance": (0, 1), "out": "b", "count": 3,
                          "ckpt": None})
    assert (cfg.seed, cfg.strategy, cfg.balance, cfg.paths.out, cfg.gen.count) == (8, "pretrain-only", (0, 1), "b", 3)


def test_partial_voxel_section_keeps_model_grid(tmp_path):
    cfg = load_config(_cfg(tmp_path, "voxel: {bev_cell: 3.2}\n"))
    spec = cfg.model_config().spec
    assert spec.bev_cell == 3.2 and spec.x_range == ModelConfig().spec.x_range


@pytest.mark.parametrize("text, fragment", [
    ("pretrain: {mask_ratio: 1.5}\n", "mask_ratio"),
    ("pretrian: {}\n", "pretrian"),
    ("train: {epohcs: 3}\n", "epohcs"),
    ("train: {epochs: 2.5}\n", "integer"),
    ("train: {epochs: true}\n", "integer"),
    ("seed: seven\n", "integer"),
    ("balance: [0, 0]\n", "invalid schedule"),
    ("train: {optimizer: {lr: fast}}\n", "number"),
    ("train: {optimizer: {lr: .nan}}\n", "finite"),
    ("balance: [1, 2, 3]\n", "2 values"),
    ("strategy: manual\n", "manual"),
    ("compare: {strategies: [turbotrain]}\n", "two strategies"),
    ("compare: {seeds: []}\n", "seed"),
    ("compare: {train_fraction: 0.0}\n", "train_fraction"),
    ("scenario: {t_fut: 4}\n", "horizon"),
    ("model: {spec: {}}\n", "voxel"),
    ("train: {balance: [1, 1]}\n", "top level"),
    ("train: {optimizer: 0.1}\n", "mapping"),
    ("- 1\n- 2\n", "mapping"),
])
def test_invalid_configs_rejected(tmp_path, text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        load_config(_cfg(tmp_path, text))


def test_missing_file_names_path(tmp_path):
    with pytest.raises(ConfigError, match="nope.yaml"):
        load_config(tmp_path / "nope.yaml")


def test_dump_round_trips(tmp_path):
    cfg = load_config(CONFIGS / "desk.yaml", {"seed": 5})
    again = load_config(_cfg(tmp_path, dump_config(cfg)))
    assert dump_config(again) == dump_config(cfg)
    assert again == cfg


def test_exponent_literals_read_as_numbers(tmp_path):
    assert load_config(_cfg(tmp_path, "train: {optimizer: {eps: 1e-6}}\n")).train.optimizer.eps == 1e-6


def test_empty_file_is_defaults(tmp_path):
    assert load_config(_cfg(tmp_path, "")) == RunConfig()
