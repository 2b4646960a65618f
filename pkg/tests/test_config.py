import pytest

from rrlab.attacks import AttackConfig
from rrlab.config import RunConfig, apply, load_config, parse_pairs
from rrlab.errors import ConfigError, ParseError


def test_defaults_round_trip_through_text(tmp_path):
    cfg = RunConfig()
    p = tmp_path / "c.txt"
    p.write_text(cfg.text())
    assert load_config(p) == cfg


def test_every_field_is_nameable_and_round_trips(tmp_path):
    cfg = load_config(overrides=[
        "framework=trades", "lambda=0.5", "rcon_mode=aphi-only", "milestones=3,4", "epochs=5",
        "widths=16", "aux_hidden=3", "rr_on_clean=yes", "attack.norm=l2", "attack.eps=0.5",
        "attack.box=0,1", "eval_attack.steps=20", "data.generator=moons", "data.n=300"])
    assert cfg.train.lam == 0.5 and cfg.train.milestones == (3, 4) and cfg.train.widths == (16,)
    assert cfg.train.rr_on_clean is True and cfg.train.attack.box == (0.0, 1.0)
    assert cfg.train.eval_attack == AttackConfig(norm="l2", eps=0.5, alpha=0.025, steps=20, box=(0.0, 1.0))
    p = tmp_path / "c.txt"
    p.write_text(cfg.text())
    assert load_config(p) == cfg


def test_comments_and_blank_lines():
    pairs = parse_pairs("# header\n\nepochs = 3  # short\n lr=0.5\n")
    assert [(k, v) for k, v, _ in pairs] == [("epochs", "3"), ("lr", "0.5")]


def test_file_then_overrides(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("epochs = 50\nmilestones = 10\n")
    assert load_config(p, ["epochs=12"]).train.epochs == 12


@pytest.mark.parametrize("pairs", [[("learning_rate", "0.1")], [("attack.radius", "1")],
                                   [("model.width", "3")], [("epochs", "many")],
                                   [("rr_on_clean", "maybe")], [("lam", "-1")],
                                   [("attack.box", "a,b")], [("attack", "x")]])
def test_bad_keys_and_values(pairs):
    with pytest.raises(ConfigError):
        apply(RunConfig(), pairs)


def test_parse_error_reports_line(tmp_path):
    with pytest.raises(ParseError, match=":2:"):
        parse_pairs("epochs = 1\nno equals sign\n", "f.txt")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.txt")
    with pytest.raises(ConfigError):
        load_config(overrides=["epochs"])


def test_data_config_builds_each_generator():
    for gen, n in (("blobs", 40), ("moons", 30), ("rings", 30)):
        ds = load_config(overrides=[f"data.generator={gen}", "data.n=30", "data.n_per_class=10",
                                    "data.n_classes=4"]).data.build()
        assert len(ds) == n
    with pytest.raises(ConfigError):
        load_config(overrides=["data.generator=csv"]).data.build()
