"""Pipeline configuration: one YAML file, strictly validated."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, is_dataclass
from importlib import resources
from pathlib import Path
from typing import Any, get_type_hints

import yaml

from .curriculum import normalize_strategy


class ConfigError(ValueError):
    pass


@dataclass
class CorpusSection:
    paths: list[str] = field(default_factory=list)
    lowercase: bool = False
    max_len: int = 64
    min_len: int = 2


@dataclass
class VocabSection:
    max_size: int = 2000
    min_freq: int = 1
    max_sentinels: int = 40


@dataclass
class MaskingSection:
    lam: float = 3.0
    budget: float = 0.30
    max_span_len: int = 10
    max_spans: int = 40
    hard_cap: float = 0.35
    max_insert_frac: float = 0.2


@dataclass
class NoiseSection:
    p_delete: float = 0.1
    p_replace: float = 0.1
    p_shuffle: float = 0.1
    p_duplicate: float = 0.05


@dataclass
class GeneratorSection:
    kind: str = "ngram"
    order: int = 3
    alpha: float = 0.4
    p: float = 0.9
    max_gen_len: int = 12
    timeout: float = 30.0
    noise: NoiseSection = field(default_factory=NoiseSection)


@dataclass
class CurriculumSection:
    strategy: str = "curriculum"
    k: int = 5
    mix_current: float = 0.8


@dataclass
class ModelSection:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    max_rel_distance: int = 8
    dropout: float = 0.0
    max_decode_len: int = 64


@dataclass
class StageSection:
    steps: int = 500
    batch_size: int = 32
    lr: float = 3e-4
    warmup_steps: int = 100
    grad_clip: float = 1.0
    eval_every: int = 100
    patience: int = 5
    dev_limit: int = 200


@dataclass
class TrainSection:
    infill: StageSection = field(default_factory=StageSection)
    ssr: StageSection = field(default_factory=StageSection)
    distill: StageSection = field(default_factory=StageSection)
    denoise: StageSection = field(default_factory=StageSection)
    finetune: StageSection = field(default_factory=StageSection)
    from_scratch: bool = False


@dataclass
class TaskSection:
    kind: str = "synthetic_gec"
    paths: list[str] = field(default_factory=list)
    n_docs: int = 600
    split: list[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])
    noise: NoiseSection = field(default_factory=lambda: NoiseSection(0.04, 0.04, 0.04, 0.02))


@dataclass
class PipelineConfig:
    seed: int
    output_dir: str = "runs/default"
    corpus: CorpusSection = field(default_factory=CorpusSection)
    vocab: VocabSection = field(default_factory=VocabSection)
    masking: MaskingSection = field(default_factory=MaskingSection)
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    curriculum: CurriculumSection = field(default_factory=CurriculumSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    task: TaskSection = field(default_factory=TaskSection)
    base_dir: str = field(default=".", metadata={"internal": True})

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d

    def digest(self, *sections: str) -> str:
        """Stable hash of the named sections (all when none given)."""
        d = self.to_dict()
        if sections:
            d = {k: d[k] for k in sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config: {where or 'top level'} must be a mapping")
    hints = get_type_hints(cls)
    known = {f.name: f for f in fields(cls) if not f.metadata.get("internal")}
    kwargs = {}
    for key, value in data.items():
        path = f"{where}.{key}" if where else str(key)
        if key not in known:
            raise ConfigError(f"config: unknown key '{path}'")
        typ = hints[key]
        if is_dataclass(typ):
            kwargs[key] = _build(typ, value, path)
        else:
            kwargs[key] = _coerce(value, typ, path)
    missing = [n for n, f in known.items() if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING and n not in kwargs]
    if missing:
        path = f"{where}.{missing[0]}" if where else missing[0]
        raise ConfigError(f"config: missing required key '{path}'")
    return cls(**kwargs)


def _coerce(value, typ, path):
    origin = getattr(typ, "__origin__", None)
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"config: '{path}' must be a boolean")
        return value
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config: '{path}' must be an integer")
        return value
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config: '{path}' must be a number")
        return float(value)
    if typ is str:
        if not isinstance(value, str):
            raise ConfigError(f"config: '{path}' must be a string")
        return value
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"config: '{path}' must be a list")
        (inner,) = typ.__args__
        return [_coerce(v, inner, f"{path}[{i}]") for i, v in enumerate(value)]
    return value


def validate(cfg: PipelineConfig, check_paths: bool = True) -> None:
    if check_paths:
        for p in cfg.corpus.paths + cfg.task.paths:
            if not cfg.resolve(p).exists():
                raise ConfigError(f"config: path does not exist: {p}")
    if not cfg.corpus.paths:
        raise ConfigError("config: 'corpus.paths' must list at least one file")
    kind = cfg.generator.kind
    if kind not in ("ngram", "rule", "identity", "self") and not kind.startswith("external:"):
        raise ConfigError(f"config: 'generator.kind' has unknown value {kind!r}")
    try:
        cfg.curriculum.strategy = normalize_strategy(cfg.curriculum.strategy)
    except ValueError as e:
        raise ConfigError(f"config: 'curriculum.strategy': {e}") from None
    if cfg.model.d_model % cfg.model.n_heads:
        raise ConfigError("config: 'model.d_model' must be divisible by 'model.n_heads'")
    if len(cfg.task.split) != 3:
        raise ConfigError("config: 'task.split' needs three ratios")
    for name in ("infill", "ssr", "distill", "denoise", "finetune"):
        st = getattr(cfg.train, name)
        if st.warmup_steps > st.steps:
            raise ConfigError(f"config: 'train.{name}.warmup_steps' exceeds 'train.{name}.steps'")


def load_config(path: str | Path | None, overrides: dict | None = None, check_paths: bool = True) -> PipelineConfig:
    """Read and validate a pipeline config; ``None`` loads the bundled demo config."""
    if path is None:
        path = Path(str(resources.files("spanrewrite") / "data" / "demo.yaml"))
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config: file not found: {path}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"config: cannot parse {path}: {str(e).splitlines()[0]}") from None
    data = data or {}
    for key, value in (overrides or {}).items():
        node = data
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    cfg = _build(PipelineConfig, data, "")
    cfg.base_dir = str(path.resolve().parent)
    validate(cfg, check_paths)
    return cfg
