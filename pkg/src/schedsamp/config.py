"""Run configuration: dataclass sections addressed by dotted keys.

Files are a TOML subset (``[section]`` headers or dotted keys, with string,
number and boolean values), e.g.::

    [schedule]
    kind = "linear"
    c = 0.000333
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .mixing import MixStrategy
from .scheduling import TeacherForcingSchedule


@dataclass
class ModelSection:
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 64
    d_ff: int = 128
    max_len: int = 32
    dropout_rate: float = 0.1
    share_embeddings: bool = True
    share_decoder_out_embedding: bool = True


@dataclass
class MixSection:
    strategy: str = "softmax"
    alpha: float = 1.0
    k: int = 5
    backprop_through_first: bool = False


@dataclass
class ScheduleSection:
    kind: str = "linear"
    epsilon: float = 0.3
    k: float = 1.0
    c: float = 1.0 / 3000
    pure_tf_steps: int = 0


@dataclass
class OptimSection:
    warmup_steps: int = 400
    lr_scale: float = 2.0
    beta1: float = 0.9
    beta2: float = 0.998
    eps: float = 1e-9
    clip_norm: float = 5.0


@dataclass
class TrainSection:
    mode: str = "scheduled"
    max_steps: int = 3000
    validation_interval: int = 250
    batch_size: int = 32
    eval_batch_size: int = 100
    seed: int = 1


@dataclass
class TaskSection:
    kind: str = "copy"
    vocab_size: int = 16
    min_len: int = 4
    max_len: int = 12
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    seed: int = 0


@dataclass
class DataSection:
    """Corpus files; when ``train_src`` is empty the synthetic task is used."""

    train_src: str = ""
    train_tgt: str = ""
    dev_src: str = ""
    dev_tgt: str = ""
    test_src: str = ""
    test_tgt: str = ""
    min_freq: int = 1
    shared_vocab: bool = True


SECTIONS = {
    "model": ModelSection,
    "mix": MixSection,
    "schedule": ScheduleSection,
    "optim": OptimSection,
    "train": TrainSection,
    "task": TaskSection,
    "data": DataSection,
}


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    mix: MixSection = field(default_factory=MixSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    optim: OptimSection = field(default_factory=OptimSection)
    train: TrainSection = field(default_factory=TrainSection)
    task: TaskSection = field(default_factory=TaskSection)
    data: DataSection = field(default_factory=DataSection)

    def __post_init__(self):
        if self.train.mode not in ("baseline", "scheduled"):
            raise ConfigError(f"train.mode must be baseline or scheduled, got {self.train.mode!r}")
        if self.train.max_steps < 0 or self.train.validation_interval < 1 or self.train.batch_size < 1:
            raise ConfigError("train.max_steps >= 0, validation_interval >= 1 and batch_size >= 1 required")
        # build once to surface domain errors at load time
        self.strategy()
        self.tf_schedule()

    def strategy(self) -> MixStrategy:
        return MixStrategy(self.mix.strategy, float(self.mix.alpha), int(self.mix.k))

    def tf_schedule(self) -> TeacherForcingSchedule:
        s = self.schedule
        return TeacherForcingSchedule(s.kind, float(s.epsilon), float(s.k), float(s.c), int(s.pure_tf_steps))

    # -- flat dotted views ----------------------------------------------------
    def to_flat(self) -> dict:
        return {f"{name}.{f.name}": getattr(getattr(self, name), f.name)
                for name in SECTIONS for f in dataclasses.fields(SECTIONS[name])}

    @classmethod
    def from_flat(cls, flat: dict) -> RunConfig:
        values: dict[str, dict] = {name: {} for name in SECTIONS}
        for key, value in flat.items():
            section, _, name = key.partition(".")
            if section not in SECTIONS or name not in {f.name for f in dataclasses.fields(SECTIONS[section])}:
                raise ConfigError(f"unknown config key {key!r}")
            values[section][name] = _coerce(key, SECTIONS[section], name, value)
        return cls(**{name: SECTIONS[name](**values[name]) for name in SECTIONS})

    def with_overrides(self, overrides: dict) -> RunConfig:
        flat = self.to_flat()
        flat.update(overrides)
        return RunConfig.from_flat(flat)

    def dumps(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for f in dataclasses.fields(SECTIONS[name]):
                lines.append(f"{f.name} = {_format_value(getattr(getattr(self, name), f.name))}")
            lines.append("")
        return "\n".join(lines)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


def _coerce(key, section_cls, name, value):
    kind = {f.name: f.type for f in dataclasses.fields(section_cls)}[name]
    try:
        if kind == "bool":
            if isinstance(value, str):
                if value.lower() not in ("true", "false"):
                    raise ValueError(value)
                return value.lower() == "true"
            return bool(value)
        if kind == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {kind}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    return '"' + str(value).replace("\\", "\\\\").replace('"', '\\"') + '"'


def _flatten(tree: dict, prefix: str = "") -> dict:
    flat = {}
    for key, value in tree.items():
        full = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, full + "."))
        else:
            flat[full] = value
    return flat


def parse_config_text(text: str) -> dict:
    try:
        return _flatten(tomllib.loads(text))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error: {exc}") from None


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    flat = {}
    if path is not None:
        flat = parse_config_text(Path(path).read_text(encoding="utf-8"))
    config = RunConfig.from_flat(flat)
    return config.with_overrides(overrides) if overrides else config


def parse_override(item: str) -> tuple[str, object]:
    """``key=value`` with a TOML literal value; bare words are strings."""
    key, sep, raw = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {item!r} is not key=value")
    raw = raw.strip()
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key.strip(), value
