"""INI run configuration.

Sections map onto the library's config objects::

    [run]    seed, mode
    [model]  ModelConfig fields
    [train]  TrainConfig fields except seed (taken from [run])
    [task]   seq_len, num_pairs, count, heldout
    [paths]  tasks, states, checkpoint, out

Precedence, lowest first: built-in defaults, the config file, ``--set
section.key=value`` overrides, then dedicated command-line flags.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field

from .errors import InvalidArgumentError
from .states import RetrievalConfig
from .train import ModelConfig, TrainConfig


class ConfigError(InvalidArgumentError):
    def __init__(self, message: str, key: str):
        super().__init__(message)
        self.key = key


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    mode: str = "ot"


@dataclass(frozen=True)
class TaskSection:
    seq_len: int = 128
    num_pairs: int = 4
    count: int = 1000
    heldout: int = 500


@dataclass(frozen=True)
class PathSection:
    tasks: str = ""
    states: str = ""
    checkpoint: str = ""
    out: str = "out"


@dataclass(frozen=True)
class _TrainSection:
    learning_rate: float = 1e-4
    grad_clip_norm: float = 20.0
    steps: int = 2000
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8


SECTIONS = {
    "run": RunSection,
    "model": ModelConfig,
    "train": _TrainSection,
    "task": TaskSection,
    "paths": PathSection,
}


def _convert(raw: str, hint, key: str):
    text = raw.strip()
    args = typing.get_args(hint)
    if type(None) in args:
        if text.lower() in ("", "none"):
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text, 0)
        if hint is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {hint.__name__}", key) from None


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train_section: _TrainSection = field(default_factory=_TrainSection)
    task: TaskSection = field(default_factory=TaskSection)
    paths: PathSection = field(default_factory=PathSection)

    @property
    def seed(self) -> int:
        return self.run.seed

    @property
    def train(self) -> TrainConfig:
        return TrainConfig(seed=self.run.seed, **dataclasses.asdict(self.train_section))

    @property
    def retrieval(self) -> RetrievalConfig:
        return RetrievalConfig(self.task.seq_len, self.model.vocab_size, self.task.num_pairs)

    def section(self, name: str):
        return self.train_section if name == "train" else getattr(self, name)

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(self.section(name)) for name in SECTIONS}

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for name, values in self.to_dict().items():
            parser[name] = {k: _format(v) for k, v in values.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def validate(self) -> None:
        if self.run.mode not in ("ot", "window"):
            raise ConfigError(f"mode must be 'ot' or 'window', got {self.run.mode!r}", "run.mode")
        try:
            self.train.validate()
        except InvalidArgumentError as exc:
            raise ConfigError(str(exc), "train") from None
        try:
            self.retrieval.validate()
        except InvalidArgumentError as exc:
            raise ConfigError(str(exc), "task") from None
        m = self.model
        for key in ("vocab_size", "num_layers", "hidden_dim", "gate_dim", "proj_dim", "mlp_hidden",
                    "sinkhorn_iters", "ratio", "segment_len"):
            if getattr(m, key) < 1:
                raise ConfigError(f"{key} must be positive", f"model.{key}")
        if m.segment_len % m.ratio:
            raise ConfigError("segment_len must be divisible by ratio", "model.segment_len")
        if not m.epsilon > 0:
            raise ConfigError("epsilon must be positive", "model.epsilon")
        if not m.tau > 0:
            raise ConfigError("tau must be positive", "model.tau")


def _apply(values: dict[str, dict[str, str]]) -> RunConfig:
    built = {}
    for name, cls in SECTIONS.items():
        hints = typing.get_type_hints(cls)
        known = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.get(name, {}).items():
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in section [{name}]", f"{name}.{key}")
            kwargs[key] = _convert(raw, hints[key], f"{name}.{key}")
        built[name] = cls(**kwargs)
    return RunConfig(built["run"], built["model"], built["train"], built["task"], built["paths"])


def load_config(text: str | None = None, overrides: typing.Sequence[str] = ()) -> RunConfig:
    """Parse INI ``text`` then apply ``section.key=value`` overrides."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if text:
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc.message.splitlines()[0]}", "config") from None
    values: dict[str, dict[str, str]] = {}
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]", name)
        values[name] = dict(parser[name])
    for item in overrides:
        key, sep, raw = item.partition("=")
        section, dot, option = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not section.key=value", key.strip() or item)
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]", key.strip())
        values.setdefault(section, {})[option] = raw
    cfg = _apply(values)
    cfg.validate()
    return cfg
