import pytest

from unidiff.config import ConfigError, RunConfig, dump_kv, load_kv, parse_kv


def test_parse_kv_comments_and_whitespace():
    assert parse_kv("# hi\n size = micro-B  # inline\n\nseed=3\n") == {"size": "micro-B", "seed": "3"}
    with pytest.raises(ConfigError):
        parse_kv("size micro-B")


def test_round_trip(tmp_path):
    cfg = RunConfig(size="micro-L", seed=9, lr_II=3e-4)
    dump_kv(cfg.to_kv(), tmp_path / "c.txt")
    assert RunConfig.load(tmp_path / "c.txt") == cfg
    assert load_kv(tmp_path / "c.txt")["seed"] == "9"


def test_missing_and_unknown_keys_are_named():
    with pytest.raises(ConfigError, match="'seed'"):
        RunConfig.from_kv({"size": "micro-B"})
    with pytest.raises(ConfigError, match="'size'"):
        RunConfig.from_kv({"seed": "1"})
    with pytest.raises(ConfigError, match="'learning_rate'"):
        RunConfig.from_kv({"size": "micro-B", "seed": "1", "learning_rate": "1"})
    with pytest.raises(ConfigError, match="batch"):
        RunConfig.from_kv({"size": "micro-B", "seed": "1", "batch": "many"})
    with pytest.raises(ConfigError):
        RunConfig.from_kv({"size": "micro-B", "seed": "1", "timestep_sampling": "cosine"})


def test_defaults():
    cfg = RunConfig.from_kv({"size": "micro-XL", "seed": "0"})
    assert (cfg.batch, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.grad_clip) == (64, 0.01, 0.9, 0.95, 1.0)
    assert (cfg.drop_text, cfg.drop_image, cfg.drop_both) == (0.05, 0.05, 0.05)
    assert cfg.timestep_sampling == "uniform"
