import pytest

from bodyrefine.config import DEFAULTS, Config, ConfigError, parse_assignment, read_config_file


def test_defaults():
    cfg = Config()
    assert cfg["joint.weight"] == 10.0
    assert cfg["anchor.iters"] == 3 and isinstance(cfg["anchor.iters"], int)
    assert cfg["stages.vertex.enabled"] is True
    assert cfg.to_dict() == DEFAULTS


@pytest.mark.parametrize("raw,expected", [("false", False), ("0", False), ("yes", True), ("On", True)])
def test_bool_coercion(raw, expected):
    assert Config({"stages.anchor.enabled": raw})["stages.anchor.enabled"] is expected


def test_bad_values_and_keys():
    with pytest.raises(ConfigError):
        Config({"anchor.iters": "three"})
    with pytest.raises(ConfigError):
        Config({"stages.anchor.enabled": "maybe"})
    with pytest.raises(ConfigError):
        Config({"anchor.itres": 3})
    with pytest.raises(ConfigError):
        parse_assignment("anchor.iters")


def test_file_and_override(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nanchor.iters = 5   # trailing\n\nshading.albedo=0.5\n")
    cfg = Config.from_file(p)
    assert cfg["anchor.iters"] == 5 and cfg["shading.albedo"] == 0.5
    assert cfg.override({"anchor.iters": "1"})["anchor.iters"] == 1
    assert cfg["anchor.iters"] == 5


def test_file_error_names_line(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("anchor.iters = 2\nnot.a.key = 1\n")
    with pytest.raises(ConfigError, match=":2:"):
        read_config_file(p)
