"""Pipeline configuration: an INI file, environment overrides, CLI overrides.

Sections map one-to-one onto the dataclasses below.  Any key can be
overridden from the environment as ``NOVELTY_<SECTION>_<KEY>`` (upper case),
e.g. ``NOVELTY_LDA_K=5``, and from the command line as ``--<section>-<key>``.
Defaults are the settings reported for the last.fm experiment where one
exists (20 tastes, 1000 sweeps, one-hour sessions, gamma 0.9, learning-rate
exponent 0.65, 80/20 chronological split).
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import os
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .agent import AgentParams
from .errors import ConfigError, NoveltyError
from .synth import SynthConfig

ENV_PREFIX = "NOVELTY_"


@dataclass
class PathsConfig:
    input: str = ""  # TSV log; empty means "generate a synthetic one"
    workdir: str = "artifacts"


@dataclass
class IngestConfig:
    strict: bool = False
    min_count: int = 10


@dataclass
class SessionConfig:
    max_gap_minutes: float = 60.0
    granularity: str = "user"
    train_fraction: float = 0.8
    min_sessions: int = 5


@dataclass
class LdaConfig:
    K: int = 20
    iterations: int = 1000
    hyper_doc: typing.Optional[float] = None  # None means 50 / K
    hyper_word: float = 0.01
    seed: int = 0
    n_samples: int = 1
    lag: int = 10
    restarts: int = 4  # independent chains; the most likely one is kept
    fold_in_iterations: int = 50
    heldout_fraction: float = 0.2
    k_candidates: list[int] = field(default_factory=lambda: [1, 5, 10, 20, 30, 40])
    iteration_candidates: list[int] = field(default_factory=lambda: [10, 100, 1000])
    elbow_tolerance: float = 0.02
    auto_k: bool = False


@dataclass
class EvalConfig:
    zero_division: float = 1.0


@dataclass
class ChurnConfig:
    year_days: int = 365
    similarity: str = "cosine"
    dataset_end: str = ""  # ISO-8601; empty means the latest event in the log


@dataclass
class RunConfig:
    threads: int = 1
    force: bool = False


@dataclass
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    ingest: IngestConfig = field(default_factory=IngestConfig)
    sessions: SessionConfig = field(default_factory=SessionConfig)
    lda: LdaConfig = field(default_factory=LdaConfig)
    agent: AgentParams = field(default_factory=AgentParams)
    eval: EvalConfig = field(default_factory=EvalConfig)
    churn: ChurnConfig = field(default_factory=ChurnConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def sections(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    # -- (de)serialisation -------------------------------------------------

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str  # keep key case (K)
        for name, sec in self.sections().items():
            cp[name] = {f.name: _format(getattr(sec, f.name)) for f in fields(sec)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_ini(), encoding="utf-8")

    @classmethod
    def from_ini(cls, text: str) -> "PipelineConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp.read_string(text)
        cfg = cls()
        secs = cfg.sections()
        for name in cp.sections():
            if name not in secs:
                raise ConfigError(f"unknown config section [{name}]")
            for key, raw in cp[name].items():
                cfg.set(name, key, raw)
        return cfg

    @classmethod
    def load(cls, path: str | Path | None = None, env: Mapping[str, str] | None = None) -> "PipelineConfig":
        cfg = cls.from_ini(Path(path).read_text(encoding="utf-8")) if path else cls()
        cfg.apply_env(os.environ if env is None else env)
        return cfg

    def apply_env(self, env: Mapping[str, str]) -> None:
        for name, sec in self.sections().items():
            for f in fields(sec):
                key = f"{ENV_PREFIX}{name}_{f.name}".upper()
                if key in env:
                    self.set(name, f.name, env[key])

    def set(self, section: str, key: str, raw: str) -> None:
        sec = self.sections().get(section)
        if sec is None:
            raise ConfigError(f"unknown config section {section!r}")
        hints = typing.get_type_hints(type(sec))
        if key not in hints:
            raise ConfigError(f"unknown config key {section}.{key}")
        try:
            setattr(sec, key, _parse(raw, hints[key]))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{section}.{key}: cannot parse {raw!r}: {exc}") from exc

    def validate(self) -> None:
        if self.lda.K < 1:
            raise ConfigError("lda.K must be >= 1")
        if self.lda.iterations < 1:
            raise ConfigError("lda.iterations must be >= 1")
        if (self.lda.hyper_doc is not None and self.lda.hyper_doc <= 0) or self.lda.hyper_word <= 0:
            raise ConfigError("Dirichlet hyperparameters must be positive")
        if self.lda.restarts < 1:
            raise ConfigError("lda.restarts must be >= 1")
        if self.ingest.min_count < 1:
            raise ConfigError("ingest.min_count must be >= 1")
        if self.sessions.max_gap_minutes <= 0:
            raise ConfigError("sessions.max_gap_minutes must be positive")
        if self.sessions.granularity not in ("user", "session"):
            raise ConfigError("sessions.granularity must be 'user' or 'session'")
        if not 0 < self.sessions.train_fraction < 1:
            raise ConfigError("sessions.train_fraction must lie in (0, 1)")
        if self.churn.similarity not in ("cosine", "one_minus_tv"):
            raise ConfigError("churn.similarity must be 'cosine' or 'one_minus_tv'")
        if self.run.threads < 1:
            raise ConfigError("run.threads must be >= 1")
        try:
            self.agent.validate()
            self.synth.validate()
        except NoveltyError as exc:
            raise ConfigError(str(exc)) from exc


def _format(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ",".join(_format(v) for v in value)
    return str(value)


def _parse(raw: str, tp: Any) -> Any:
    raw = raw.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union and type(None) in args:
        if raw == "":
            return None
        tp = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(tp), typing.get_args(tp)
    if origin is list:
        return [_parse(x, args[0]) for x in raw.split(",") if x.strip()]
    if tp is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError("expected a boolean")
    if tp is int:
        return int(raw)
    if tp is float:
        return float(raw)
    return raw


def flag_specs(cfg: PipelineConfig) -> list[tuple[str, str, str]]:
    """(flag, section, key) for every config key, e.g. ('--lda-K', 'lda', 'K')."""
    out = []
    for name, sec in cfg.sections().items():
        for f in fields(sec):
            out.append((f"--{name}-{f.name.replace('_', '-')}", name, f.name))
    return out


def as_dict(cfg: PipelineConfig) -> dict:
    return dataclasses.asdict(cfg)
