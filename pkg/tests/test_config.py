import pytest

from subexperts.config import DEFAULT_TRAIN, SEED_ENV, parse_config, parse_config_text, with_override
from subexperts.errors import ConfigError

HEADLINE = """
[backbone]
n_layers = 4

[adapter]
kind = mose
n_experts = 2
top_k = 2
c = 0.30
r = 2
alpha = 8
exclude = 0-1
"""


def test_minimal_file_fills_defaults(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[adapter]\nkind = mose\n")
    cfg = parse_config(path, env={})
    assert cfg.trainer == DEFAULT_TRAIN
    assert (cfg.adapter.n_experts, cfg.adapter.top_k, cfg.adapter.c) == (2, 2, 0.3)
    assert cfg.suite.n_tasks == 5 and cfg.backbone.d_model == 64
    assert "lambda_pull = " in cfg.to_text()


def test_empty_text_is_valid():
    assert parse_config_text("", env={}).adapter.kind == "mose"


@pytest.mark.parametrize("text,path", [
    ("[adapter]\nc = 1.5\n", "adapter.c"),
    ("[adapter]\nc = 0\n", "adapter.c"),
    ("[adapter]\ntop_k = 3\n", "adapter.top_k"),
    ("[adapter]\nrank = 2\n", "adapter.rank"),
    ("[trainer]\nepochs = many\n", "trainer.epochs"),
    ("[trainer]\nmode = online\n", "trainer.mode"),
    ("[backbone]\nn_heads = 5\n", "backbone.n_heads"),
    ("[adapter]\nexclude = 0-2\n", "adapter.exclude"),
    ("[suite]\nseq_len = 40\n", "suite.seq_len"),
])
def test_errors_name_the_key(text, path):
    with pytest.raises(ConfigError) as info:
        parse_config_text(text, env={})
    assert info.value.path == path and path in str(info.value)


def test_unknown_section_and_syntax():
    with pytest.raises(ConfigError, match="optimiser"):
        parse_config_text("[optimiser]\nlr = 1\n", env={})
    with pytest.raises(ConfigError):
        parse_config_text("lr = 1\n", env={})


def test_headline_configuration():
    cfg = parse_config_text(HEADLINE, env={})
    a = cfg.adapter
    assert (a.kind, a.n_experts, a.top_k, a.c, a.r, a.alpha, a.exclude) == ("mose", 2, 2, 0.3, 2, 8.0, (0, 1))
    assert a.beta == 4.0
    assert a.layers(4) == [2, 3] and a.skipped(4) == [0, 1]


def test_seed_environment_override():
    assert parse_config_text("[trainer]\nseed = 3\n", env={}).trainer.seed == 3
    assert parse_config_text("[trainer]\nseed = 3\n", env={SEED_ENV: "11"}).trainer.seed == 11
    with pytest.raises(ConfigError, match="trainer.seed"):
        parse_config_text("", env={SEED_ENV: "x"})


def test_text_roundtrip_and_digest():
    cfg = parse_config_text(HEADLINE, env={})
    again = parse_config_text(cfg.to_text(), env={})
    assert again == cfg and again.digest() == cfg.digest()
    assert parse_config_text("", env={}).digest() != cfg.digest()


def test_with_override():
    text = with_override(HEADLINE, "adapter.c", "0.5")
    assert parse_config_text(text, env={}).adapter.c == 0.5
    text = with_override(text, "trainer.epochs", "2")
    assert parse_config_text(text, env={}).trainer.epochs == 2
    with pytest.raises(ConfigError, match="adapter.sparsity"):
        with_override(HEADLINE, "adapter.sparsity", "0.5")
