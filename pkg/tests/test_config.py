import pytest

from sbl.config import RunConfig, load_config, parse_config_text
from sbl.errors import ConfigError, UsageError


def test_dotted_and_bare_keys():
    cfg = RunConfig().apply(["train.variant=TM", "warmup=7", "dropout = 0.2", "noise_std=0"])
    assert cfg.train.variant == "TM" and cfg.train.warmup == 7
    assert cfg.model.dropout == 0.2 and cfg.data.noise_std == 0.0


def test_ambiguous_and_unknown_keys():
    with pytest.raises(UsageError, match="ambiguous"):
        RunConfig().set("seed", "1")
    with pytest.raises(UsageError):
        RunConfig().set("train.nope", "1")
    with pytest.raises(UsageError):
        RunConfig().apply(["variant"])


def test_bad_value_type():
    with pytest.raises(ConfigError):
        RunConfig().set("train.max_steps", "many")


def test_text_roundtrip():
    cfg = RunConfig().apply(["train.seed=3", "data.languages=X,Y"])
    again = parse_config_text(cfg.to_text())
    assert again == cfg and again.data.language_names == ("X", "Y")


def test_file_then_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\ntrain.max_steps = 10\ntrain.seed = 4\n")
    cfg = load_config(path, ["train.seed=5"])
    assert cfg.train.max_steps == 10 and cfg.train.seed == 5
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")
    path.write_text("no equals here\n")
    with pytest.raises(ConfigError, match=":1:"):
        load_config(path)


def test_copy_is_independent():
    cfg = RunConfig()
    other = cfg.copy()
    other.train.seed = 9
    assert cfg.train.seed == 0


def test_language_names_need_two():
    cfg = RunConfig().apply(["data.languages=A"])
    with pytest.raises(ConfigError):
        _ = cfg.data.language_names
