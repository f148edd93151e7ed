"""Declarative experiment configuration (YAML or JSON)."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from ..adapter.render import CONDITIONS as RENDER_CONDITIONS
from ..intervention import RHO_SEM_GRID, RHO_STR_GRID

CONDITIONS = (*RENDER_CONDITIONS, "rebalanced")
BACKENDS = ("stub", "replay", "http")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    kind: str = "tiny"  # tiny | hf
    path: str | None = None
    profile: str = "tiny"
    dtype: str = "bfloat16"
    tiny_seed: int = 0


@dataclass
class CorpusConfig:
    templates: str | None = None  # None uses the bundled seed templates
    backend: str = "stub"
    transcript: str | None = None  # replay source; recording goes to the run directory
    max_degree: int = 4
    n_pairs: int = 10
    queries_per_tool: int = 5
    split_fractions: tuple[float, float, float] = (0.4, 0.2, 0.4)


@dataclass
class CounterfactualConfig:
    degree: int = 1
    strategies: tuple[str, ...] = ("substitute", "remove", "add")
    sizes: tuple[int, ...] = (1,)
    cis_strategy: str = "substitute"
    cis_size: int = 1


@dataclass
class AttributionConfig:
    corpus: str = "D1"
    split: str = "train"
    group_size: int = 500
    metrics: tuple[str, ...] = ("m_sem", "m_str")
    k: int | None = None  # None takes head_fraction of the head count
    head_fraction: float = 0.02
    candidate_pool: int = 100
    n_groups: int = 10
    sweep_size: int = 500


@dataclass
class InterventionConfig:
    rho_sem_grid: tuple[float, ...] = RHO_SEM_GRID
    rho_str_grid: tuple[float, ...] = RHO_STR_GRID
    sweep_rhos: tuple[float, ...] = (0.5, 0.75, 1.0, 1.25, 1.5)
    sweep_corpus: str = "D1"
    sweep_size: int = 500
    validation_split: str = "val"


@dataclass
class ExperimentConfig:
    seed: int
    output_dir: str
    name: str = "run"
    model: ModelConfig = field(default_factory=ModelConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    counterfactual: CounterfactualConfig = field(default_factory=CounterfactualConfig)
    attribution: AttributionConfig = field(default_factory=AttributionConfig)
    intervention: InterventionConfig = field(default_factory=InterventionConfig)
    conditions: tuple[str, ...] = ("base",)
    eval_corpora: tuple[str, ...] = ("D0",)
    base_dir: str = field(default=".", repr=False, compare=False)

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path

    @property
    def out(self) -> Path:
        return self.resolve(self.output_dir)

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


_SECTIONS = {
    "model": ModelConfig,
    "corpus": CorpusConfig,
    "counterfactual": CounterfactualConfig,
    "attribution": AttributionConfig,
    "intervention": InterventionConfig,
}


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    out = {}
    for k, v in raw.items():
        out[k] = tuple(v) if isinstance(v, list) else v
    return cls(**out)


def from_dict(raw: dict, base_dir: str | Path = ".") -> ExperimentConfig:
    raw = dict(raw)
    if raw.get("seed") is None:
        raise ConfigError("seed is mandatory")
    if "output_dir" not in raw:
        raise ConfigError("output_dir is mandatory")
    for key, cls in _SECTIONS.items():
        raw[key] = _build(cls, raw.get(key) or {}, key)
    cfg = _build(ExperimentConfig, raw, "config")
    cfg.base_dir = str(base_dir)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    if not isinstance(cfg.seed, int):
        raise ConfigError("seed must be an integer")
    bad = set(cfg.conditions) - set(CONDITIONS)
    if bad:
        raise ConfigError(f"unknown conditions {sorted(bad)}; expected {CONDITIONS}")
    if cfg.corpus.backend not in BACKENDS:
        raise ConfigError(f"unknown backend {cfg.corpus.backend!r}; expected {BACKENDS}")
    if cfg.model.kind not in ("tiny", "hf"):
        raise ConfigError(f"unknown model kind {cfg.model.kind!r}")
    if cfg.model.kind == "hf" and not cfg.model.path:
        raise ConfigError("hf models need model.path")
    if cfg.corpus.backend == "replay" and not cfg.corpus.transcript:
        raise ConfigError("replay backend needs corpus.transcript")
    for label, ref in (("corpus.templates", cfg.corpus.templates), ("corpus.transcript", cfg.corpus.transcript)):
        if ref is not None and not cfg.resolve(ref).exists():
            raise ConfigError(f"{label}: {ref} does not exist")


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    raw = yaml.safe_load(path.read_text("utf-8"))
    return from_dict(raw or {}, base_dir=path.parent)
