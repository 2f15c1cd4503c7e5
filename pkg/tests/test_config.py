import pytest

from aoept.config import RunConfig, override, parse_config, parse_text, serialize
from aoept.errors import ConfigError


def test_empty_file_gives_defaults(tmp_path):
    (tmp_path / "c.ini").write_text("")
    cfg = parse_config(tmp_path / "c.ini")
    assert cfg == RunConfig()
    assert cfg.depth == 3
    assert cfg.train_config().N == 3


def test_values_are_parsed_by_section():
    cfg = parse_text("[missing]\nkind = both\neta_test = 30\ntable_seeds = 4, 5, 6\n[train]\nN = 2\n")
    assert (cfg.kind, cfg.eta_test, cfg.table_seeds, cfg.depth) == ("both", 30.0, (4, 5, 6), 2)


@pytest.mark.parametrize("text,line,needle", [
    ("[missing]\n\neta_test = 170\n", 3, "out of range"),
    ("[train]\nlearning_rate = 1\n", 2, "unknown key"),
    ("[data]\nlr = 0.1\n", 2, "belongs in [train]"),
    ("[nope]\n", 1, "unknown section"),
    ("[train\n", 1, "malformed"),
    ("lr = 0.1\n", 1, "before any section"),
    ("[train]\nlr\n", 2, "key = value"),
    ("[train]\nlr = 0.1\nlr = 0.2\n", 3, "duplicate"),
    ("[train]\nepochs = many\n", 2, "cannot parse"),
])
def test_errors_name_the_line(text, line, needle):
    with pytest.raises(ConfigError) as exc:
        parse_text(text)
    assert exc.value.line == line
    assert needle in str(exc.value) and f"line {line}" in str(exc.value)


def test_cross_field_checks():
    with pytest.raises(ConfigError, match="divisible"):
        parse_text("[backbone]\nheads = 5\n")
    with pytest.raises(ConfigError, match="exceeds"):
        parse_text("[train]\nN = 9\n")
    with pytest.raises(ConfigError, match="kind"):
        parse_text("[missing]\nkind = audio\n")


def test_serialize_round_trips():
    cfg = override(RunConfig(), rho=0.37, kind="both", eta_train=12.5, N=2)
    assert parse_text(serialize(cfg)) == cfg
    assert parse_text(serialize(RunConfig())) == RunConfig()


def test_override_validates_and_seeds_propagate():
    with pytest.raises(ConfigError):
        override(RunConfig(), eta_test=150)
    assert override(RunConfig(), method=None) == RunConfig()
    cfg = RunConfig().with_seed(7)
    assert (cfg.data_seed, cfg.backbone_seed, cfg.prompt_seed) == (7, 7, 7)
    assert cfg.gen_config().seed == 7 and cfg.train_config().seed == 7


def test_missing_file_is_reported(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        parse_config(tmp_path / "absent.ini")
