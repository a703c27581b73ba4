"""
Typed configuration for experiments.

Configuration is split by concern into dataclasses (task, model, training,
sampling) grouped by ExperimentConfig. On disk a config is flat ``key = value``
text; every key belongs to exactly one field of one section. Environment
variables ``SEQDIFF_<KEY>`` override the file.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field, fields, asdict, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterator, Mapping, Optional, Tuple

from src.errors import ConfigError, MissingFileError

ENV_PREFIX = "SEQDIFF_"


class ScheduleKind(Enum):
    """
    Noise schedule family.

    LINEAR: sigma(t) = t
    SQRT: sigma(t) = t ** 0.25
    """

    LINEAR = "linear"
    SQRT = "sqrt"


class SamplerMode(Enum):
    """
    Iterative decoder used at inference.

    DDIM: model timestep follows the trajectory grid
    CEDI: model timestep follows a second grid pinned to large noise scales
    """

    DDIM = "ddim"
    CEDI = "cedi"


class TaskKind(Enum):
    """Synthetic sequence-to-sequence tasks."""

    COPY = "copy"
    REVERSE = "reverse"
    TOY_TRANSLATION = "toy_translation"
    ONE_TO_MANY = "one_to_many"
    MANY_TO_ONE = "many_to_one"


class SelectionKind(Enum):
    """How one hypothesis is chosen from the decoded candidates."""

    MBR = "mbr"
    LENGTH_SCORE = "length_score"


def _key(name: str):
    """Field metadata overriding the flat config key."""
    return {"key": name}


@dataclass(frozen=True)
class TaskSpec:
    """
    Synthetic corpus definition.

    Attributes:
        kind: Which task to generate.
        vocab_size: Content tokens per language.
        min_len: Shortest sentence (content tokens).
        max_len: Longest sentence (content tokens).
        n_train: Training pairs.
        n_valid: Validation pairs.
        n_test: Test pairs.
        languages: Number of sub-languages for the multilingual kinds.
        seed: Generation seed; the corpus is a pure function of these fields.
    """

    kind: TaskKind = field(default=TaskKind.TOY_TRANSLATION, metadata=_key("task"))
    vocab_size: int = 128
    min_len: int = 5
    max_len: int = 24
    n_train: int = 10000
    n_valid: int = 500
    n_test: int = 500
    languages: int = field(default=3)
    seed: int = field(default=1234, metadata=_key("data_seed"))

    def __post_init__(self):
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ConfigError(
                f"need max_len >= min_len >= 1, got min_len={self.min_len} max_len={self.max_len}"
            )
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.languages < 1:
            raise ConfigError(f"languages must be >= 1, got {self.languages}")

    @property
    def is_multilingual(self) -> bool:
        return self.kind in (TaskKind.ONE_TO_MANY, TaskKind.MANY_TO_ONE)


@dataclass(frozen=True)
class ModelConfig:
    """
    Denoiser architecture and target embedding geometry.

    Attributes:
        embed_dim: Diffusion embedding dimension D.
        layers: Encoder and decoder blocks E.
        width: Model width H.
        heads: Attention heads.
        ffn_width: Feed-forward width.
        length_offset_k: Length offsets are predicted in [-K, K].
        dropout: Dropout inside transformer blocks.
        max_positions: Longest sequence the positional tables cover.
    """

    embed_dim: int = 16
    layers: int = 4
    width: int = 256
    heads: int = 4
    ffn_width: int = 1024
    length_offset_k: int = 32
    dropout: float = 0.1
    max_positions: int = 128

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.width % 2 != 0:
            raise ConfigError(f"width must be even for the time embedding, got {self.width}")
        if self.embed_dim < 1 or self.layers < 1 or self.length_offset_k < 0:
            raise ConfigError("embed_dim and layers must be >= 1, length_offset_k >= 0")


@dataclass(frozen=True)
class TrainConfig:
    """
    Training loop settings.

    Attributes:
        schedule: Noise schedule family.
        noise_clipping: Restrict timesteps to sigma(t) >= sigma_min.
        clip_refresh_every: Recompute sigma_min every N steps (1 = every step).
        self_cond_prob: Probability of feeding a detached first-pass estimate.
        steps: Optimizer steps.
        max_tokens: Target tokens per batch.
        lr: Peak learning rate.
        warmup_steps: Linear warmup length.
        weight_decay: Decoupled weight decay.
        grad_clip: Global gradient norm clip.
        length_loss_weight: Weight of the length-offset loss.
        save_every: Checkpoint cadence in steps (0 disables intermediate saves).
        progress: Show a progress bar.
    """

    schedule: ScheduleKind = ScheduleKind.LINEAR
    noise_clipping: bool = True
    clip_refresh_every: int = 100
    self_cond_prob: float = 0.5
    steps: int = 20000
    max_tokens: int = 512
    lr: float = 3e-4
    warmup_steps: int = 1000
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    length_loss_weight: float = 0.1
    save_every: int = 1000
    progress: bool = True

    def __post_init__(self):
        if self.clip_refresh_every < 1:
            raise ConfigError(f"clip_refresh_every must be >= 1, got {self.clip_refresh_every}")
        if not 0.0 <= self.self_cond_prob <= 1.0:
            raise ConfigError(f"self_cond_prob must lie in [0, 1], got {self.self_cond_prob}")


@dataclass(frozen=True)
class SamplerConfig:
    """
    Decoding settings.

    Attributes:
        steps: Number of denoising iterations M.
        mode: DDIM or CeDi.
        tau_sigma: sigma(tau_M), the noise scale the last CeDi model timestep maps to.
        t_terminal: Last trajectory timestep T.
        length_beam: Number of predicted lengths decoded (LB).
        mbr_samples: Samples per length beam (MBR).
        selection: Candidate selection strategy.
        seed: Sampling seed.
    """

    steps: int = field(default=20, metadata=_key("sample_steps"))
    mode: SamplerMode = SamplerMode.CEDI
    tau_sigma: float = 0.99
    t_terminal: float = 0.0
    length_beam: int = 5
    mbr_samples: int = field(default=1, metadata=_key("mbr"))
    selection: SelectionKind = SelectionKind.MBR
    seed: int = field(default=0, metadata=_key("sample_seed"))

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"sample_steps must be >= 1, got {self.steps}")
        if not 0.0 < self.tau_sigma < 1.0:
            raise ConfigError(f"tau_sigma must lie in (0, 1), got {self.tau_sigma}")
        if not 0.0 <= self.t_terminal < 1.0:
            raise ConfigError(f"t_terminal must lie in [0, 1), got {self.t_terminal}")
        if self.length_beam < 1 or self.mbr_samples < 1:
            raise ConfigError("length_beam and mbr must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    """
    Full experiment configuration.

    Attributes:
        task: Synthetic corpus definition.
        model: Denoiser architecture.
        train: Training loop settings.
        sampler: Decoding settings.
        seed: Base seed for model init and training randomness.
    """

    task: TaskSpec = field(default_factory=TaskSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    seed: int = 1

    def to_dict(self) -> Dict[str, Any]:
        return _jsonable(asdict(self))

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExperimentConfig":
        sections = {}
        for name, section_cls in _SECTIONS.items():
            raw = dict(data.get(name, {}))
            sections[name] = section_cls(**{
                f.name: _coerce(f.type, raw[f.name], f.name)
                for f in fields(section_cls) if f.name in raw
            })
        return cls(seed=int(data.get("seed", 1)), **sections)

    def with_overrides(self, values: Mapping[str, str]) -> "ExperimentConfig":
        """Apply flat ``key -> text value`` overrides."""
        if not values:
            return self
        routed: Dict[str, Dict[str, Any]] = {name: {} for name in _SECTIONS}
        seed = self.seed
        for key, text in values.items():
            if key == "seed":
                seed = _coerce(int, text, key)
                continue
            location = _KEY_INDEX.get(key)
            if location is None:
                raise ConfigError(f"unknown config key '{key}'")
            section, f = location
            routed[section][f.name] = _coerce(f.type, text, key)
        updated = {
            name: replace(getattr(self, name), **routed[name]) if routed[name] else getattr(self, name)
            for name in _SECTIONS
        }
        return ExperimentConfig(seed=seed, **updated)


_SECTIONS = {
    "task": TaskSpec,
    "model": ModelConfig,
    "train": TrainConfig,
    "sampler": SamplerConfig,
}


def _flat_key(f) -> str:
    return f.metadata.get("key", f.name)


_KEY_INDEX = {
    _flat_key(f): (section, f)
    for section, section_cls in _SECTIONS.items()
    for f in fields(section_cls)
}


def _jsonable(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _coerce(kind: Any, value: Any, key: str) -> Any:
    """Convert a text (or JSON) value to the field's declared type."""
    if not isinstance(value, str):
        if isinstance(kind, type) and issubclass(kind, Enum):
            return kind(value)
        return value
    text = value.strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if isinstance(kind, type) and issubclass(kind, Enum):
            return kind(text.lower())
        return text
    except ValueError as exc:
        raise ConfigError(f"cannot parse {key} = {text!r} as {getattr(kind, '__name__', kind)}") from exc


def parse_config_text(text: str, source: str = "<string>") -> Dict[str, str]:
    """
    Parse flat ``key = value`` text.

    Blank lines and ``#`` comments are ignored; duplicate keys are an error.
    """
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}'")
        values[key] = value.strip().strip('"')
    return values


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, str]:
    """Collect ``SEQDIFF_<KEY>`` overrides from the environment."""
    environ = os.environ if environ is None else environ
    return {
        name[len(ENV_PREFIX):].lower(): value
        for name, value in environ.items()
        if name.startswith(ENV_PREFIX)
    }


def load_config(
    path: Optional[Path] = None,
    environ: Optional[Mapping[str, str]] = None,
    overrides: Optional[Mapping[str, str]] = None,
) -> ExperimentConfig:
    """
    Build an ExperimentConfig: defaults < file < environment < overrides.

    Args:
        path: Optional key=value config file.
        environ: Environment mapping (defaults to os.environ).
        overrides: Final flat overrides, typically from CLI flags.

    Returns:
        The resolved configuration.
    """
    config = ExperimentConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise MissingFileError(f"config file not found: {path}")
        config = config.with_overrides(parse_config_text(path.read_text(), str(path)))
    config = config.with_overrides(env_overrides(environ))
    return config.with_overrides(dict(overrides or {}))


def describe_keys() -> Iterator[Tuple[str, str, Any]]:
    """Yield (key, type name, default) for every config key."""
    yield "seed", "int", ExperimentConfig().seed
    for section, section_cls in _SECTIONS.items():
        default = section_cls()
        for f in fields(section_cls):
            kind = f.type
            if isinstance(kind, type) and issubclass(kind, Enum):
                type_name = "|".join(member.value for member in kind)
                value = getattr(default, f.name).value
            else:
                type_name = getattr(kind, "__name__", str(kind))
                value = getattr(default, f.name)
            yield _flat_key(f), type_name, value
