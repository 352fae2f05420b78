"""Run configuration (YAML on disk) with defaults from the reference hyperparameters."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .model import ModelConfig, Variant
from .sow import DEFAULT_IGNORED_TAGS, EngineConfig


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    corpus: str | None = None
    embeddings: str | None = None
    data_dir: str = "run/data"
    sow_checkpoint_dir: str = "run/sow"
    reap_checkpoint_dir: str = "run/reap"
    out_dir: str = "run/out"


@dataclass
class EngineKnobs:
    k: int = 10
    abstraction_threshold: float = 0.6
    max_rules: int = 3
    beam: int = 10
    top_k: int = 20
    ignored_tags: list[str] = field(default_factory=lambda: list(DEFAULT_IGNORED_TAGS))
    candidate_limit: int = 10
    decode: str = "topk"

    def engine_config(self) -> EngineConfig:
        return EngineConfig(k=self.k, abstraction_threshold=self.abstraction_threshold,
                            max_rules=self.max_rules, ignored_tags=tuple(self.ignored_tags),
                            candidate_limit=self.candidate_limit)


@dataclass
class FilterKnobs:
    enabled: bool = True
    min_len: int = 8
    para_score_min: float = 0.7
    reorder_score_max: float = 0.9


@dataclass
class TrainKnobs:
    lr: float = 1e-4
    betas: list[float] = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    coverage_schedule: list[list[float]] = field(default_factory=lambda: [[10, 1.0], [20, 0.5]])
    bpe_merges: int = 8000
    valid_fraction: float = 0.05


@dataclass
class EvalKnobs:
    rejection_threshold: float = 0.5
    bootstrap_resamples: int = 1000
    bins: int = 10
    random_orderings: int = 10


def _sow_model():
    return ModelConfig(variant=Variant.SOW.value)


@dataclass
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    sow_model: ModelConfig = field(default_factory=_sow_model)
    reap_model: ModelConfig = field(default_factory=ModelConfig)
    engine: EngineKnobs = field(default_factory=EngineKnobs)
    filter: FilterKnobs = field(default_factory=FilterKnobs)
    train: TrainKnobs = field(default_factory=TrainKnobs)
    eval: EvalKnobs = field(default_factory=EvalKnobs)
    seed: int = 0
    embedding_dim: int = 64

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def from_dict(cls, data: dict | None) -> RunConfig:
        return _build(cls, data or {}, "config")

    @classmethod
    def loads(cls, text: str) -> RunConfig:
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"invalid YAML: {e}") from None
        if data is not None and not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        return cls.loads(text)


def _build(cls, data: dict, where: str, base=None):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    base = base if base is not None else cls()
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {name: getattr(base, name) for name in known}
    for name, value in data.items():
        current = kwargs[name]
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value or {}, f"{where}.{name}", current)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def substream(seed: int, name: str) -> int:
    """Deterministic child seed for a named random stream."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF
