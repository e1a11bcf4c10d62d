import pytest

from aptlm.config import Config, load_config, parse_config, smoke_config
from aptlm.errors import ConfigError


def test_parse_types_and_comments():
    cfg = parse_config("seed=3  # comment\n\n# only a comment\ntau=0.5\ntrain_nlar=no\nout_dir=runs/x\n", env={})
    assert (cfg.seed, cfg.tau, cfg.train_nlar, cfg.out_dir) == (3, 0.5, False, "runs/x")


def test_dumps_round_trip(tmp_path):
    cfg = smoke_config(out_dir=str(tmp_path), seed=5, encoder_trainable=True)
    (tmp_path / "c.txt").write_text(cfg.dumps())
    assert load_config(tmp_path / "c.txt", env={}) == cfg


def test_seed_from_environment():
    assert parse_config("seed=1", env={"APT_SEED": "42"}).seed == 42
    with pytest.raises(ConfigError):
        parse_config("", env={"APT_SEED": "x"})


@pytest.mark.parametrize("text", [
    "seed",
    "bogus=1",
    "seed=1.5",
    "train_nlar=maybe",
    "aligner_arch=rnn",
    "pooling=max",
    "lm_width=10\nlm_heads=4",
    "stage0_steps=50\nwarmup_steps=50",
    "lm_steps=10\nlm_warmup=10",
    "lm_corpus_mix=FSC=x",
    "tau=0",
])
def test_rejects(text):
    with pytest.raises(ConfigError):
        parse_config(text, env={})


def test_helpers():
    cfg = Config()
    assert cfg.stage_tasks(0) == ("AT", "AAC")
    assert cfg.corpus_mix() == {"FSC": 6, "QSED": 6}
    assert cfg.replace(seed=9).seed == 9 and cfg.seed == 0
