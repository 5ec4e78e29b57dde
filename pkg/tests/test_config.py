import pytest

from noveltylearn.config import PipelineConfig, flag_specs
from noveltylearn.errors import ConfigError


def test_defaults_match_reported_settings():
    cfg = PipelineConfig()
    assert cfg.lda.K == 20 and cfg.lda.iterations == 1000
    assert cfg.sessions.max_gap_minutes == 60 and cfg.sessions.train_fraction == 0.8
    assert cfg.agent.gamma == 0.9 and cfg.agent.lr_exponent == 0.65
    assert cfg.lda.hyper_doc is None and cfg.lda.hyper_word == 0.01
    cfg.validate()


def test_ini_round_trip_is_lossless(tmp_path):
    cfg = PipelineConfig()
    cfg.lda.K = 7
    cfg.lda.hyper_doc = 0.3
    cfg.lda.k_candidates = [2, 3]
    cfg.agent.gamma = 0.1 + 0.2  # not exactly representable as a short decimal
    cfg.ingest.strict = True
    cfg.paths.input = "data/log.tsv"
    cfg.save(tmp_path / "c.ini")
    back = PipelineConfig.load(tmp_path / "c.ini", env={})
    assert back == cfg
    assert PipelineConfig.from_ini(PipelineConfig().to_ini()) == PipelineConfig()


def test_env_overrides_file(tmp_path):
    (tmp_path / "c.ini").write_text("[lda]\nK = 7\n")
    cfg = PipelineConfig.load(tmp_path / "c.ini", env={"NOVELTY_LDA_K": "3", "NOVELTY_AGENT_GAMMA": "0.5", "OTHER": "x"})
    assert cfg.lda.K == 3 and cfg.agent.gamma == 0.5


def test_partial_file_keeps_defaults(tmp_path):
    (tmp_path / "c.ini").write_text("[sessions]\nmax_gap_minutes = 30\n")
    cfg = PipelineConfig.load(tmp_path / "c.ini", env={})
    assert cfg.sessions.max_gap_minutes == 30.0 and cfg.lda.K == 20


@pytest.mark.parametrize(
    "text",
    ["[nope]\nx = 1\n", "[lda]\nnope = 1\n", "[lda]\nK = many\n", "[ingest]\nstrict = maybe\n"],
)
def test_bad_files(text):
    with pytest.raises(ConfigError):
        PipelineConfig.from_ini(text)


@pytest.mark.parametrize(
    "section,key,value",
    [("lda", "K", "0"), ("lda", "iterations", "0"), ("lda", "hyper_word", "0"), ("sessions", "granularity", "week"),
     ("sessions", "train_fraction", "1"), ("agent", "gamma", "1.5"), ("synth", "n_tastes", "1")],
)
def test_validation(section, key, value):
    cfg = PipelineConfig()
    cfg.set(section, key, value)
    with pytest.raises(ConfigError):
        cfg.validate()


def test_every_key_has_a_flag():
    flags = {f for f, _, _ in flag_specs(PipelineConfig())}
    assert {"--lda-K", "--agent-lr-counter", "--sessions-max-gap-minutes", "--paths-workdir"} <= flags
