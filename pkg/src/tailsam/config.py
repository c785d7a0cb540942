"""Declarative run configuration: JSON file + dotted --set overrides.

Unknown keys are rejected so config typos fail fast. The bundled ``smoke``
profile (50 items, 2,000 sequences, d_emb 8) exercises the whole pipeline in
well under a minute.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .exceptions import InvalidConfigError
from .optimizers import OptimizerConfig
from .weighting import WeightingScheme


@dataclass
class DataSection:
    source: str = "zipf"  # zipf | file
    interactions: str | None = None  # input path when source == file
    dir: str | None = None  # where gen-data output lives; default output_dir/gen-data/<tag>
    n_items: int = 500
    alpha: float = 1.2
    n_sequences: int = 20000
    seq_len_min: int = 2
    seq_len_max: int = 11
    seed: int = 0
    min_count: int | None = None  # default: 5 for file data, 0 for synthetic
    l_max: int = 10


@dataclass
class ModelSection:
    d_emb: int = 32
    init_seed: int = 0


@dataclass
class OptimizerSection:
    variant: str = "eisam"
    rho: float = 0.05
    lam: float = 0.5
    lr: float = 5e-4
    base: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    batch_size: int = 64
    epochs: int = 3
    seed: int = 0
    estimator: str = "unbiased"


@dataclass
class WeightingSection:
    kind: str = "exponential"
    eps: float = 1e-8
    beta: float = 0.9
    gamma: float = 2.0
    normalize: str | None = None


@dataclass
class EvalSection:
    k: int = 10
    seeds: list[int] = field(default_factory=lambda: [0])
    variants: list[str] = field(default_factory=lambda: ["sam", "eisam"])
    timing: bool = True


@dataclass
class AnalysisSection:
    rho: float = 0.05
    n_probes: int = 20
    resolution: int = 11
    half_width: float = 0.5
    scope: str = "tail"
    seed: int = 0
    delta: float = 0.05
    subsample: int = 2000  # cap on examples used by trace probes; 0 disables


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    weighting: WeightingSection = field(default_factory=WeightingSection)
    eval: EvalSection = field(default_factory=EvalSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    output_dir: str = "runs"

    def scheme(self) -> WeightingScheme:
        w = self.weighting
        return WeightingScheme(
            kind=w.kind, eps=w.eps, beta=w.beta, gamma=w.gamma, normalize=w.normalize
        )

    def optimizer_config(self) -> OptimizerConfig:
        o = self.optimizer
        return OptimizerConfig(
            variant=o.variant,
            rho=o.rho,
            lam=o.lam,
            lr=o.lr,
            base=o.base,
            beta1=o.beta1,
            beta2=o.beta2,
            eps_adam=o.eps_adam,
            batch_size=o.batch_size,
            scheme=self.scheme(),
            estimator=o.estimator,
        )

    def min_count(self) -> int:
        if self.data.min_count is not None:
            return self.data.min_count
        return 5 if self.data.source == "file" else 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTION_TYPES = {
    "data": DataSection,
    "model": ModelSection,
    "optimizer": OptimizerSection,
    "weighting": WeightingSection,
    "eval": EvalSection,
    "analysis": AnalysisSection,
}

# accepted spellings for keys whose natural config name is not a valid
# attribute name ("lambda") or differs from the dataclass field
_KEY_ALIASES = {("optimizer", "lambda"): "lam"}

SMOKE_PROFILE = {
    "data": {"n_items": 50, "n_sequences": 2000, "alpha": 1.2, "seq_len_min": 2,
             "seq_len_max": 8},
    "model": {"d_emb": 8},
    "optimizer": {"epochs": 2},
    "analysis": {"n_probes": 5, "resolution": 5},
    "eval": {"seeds": [0], "variants": ["sam", "eisam"]},
}

PROFILES = {"smoke": SMOKE_PROFILE}


def _apply_section(section_obj, section_name: str, values: dict):
    fields = {f.name for f in dataclasses.fields(section_obj)}
    for key, value in values.items():
        key = _KEY_ALIASES.get((section_name, key), key)
        if key not in fields:
            raise InvalidConfigError(f"unknown config key {section_name}.{key}")
        setattr(section_obj, key, value)


def config_from_dict(raw: dict) -> RunConfig:
    cfg = RunConfig()
    for section_name, values in raw.items():
        if section_name == "output_dir":
            cfg.output_dir = str(values)
            continue
        if section_name not in _SECTION_TYPES:
            raise InvalidConfigError(f"unknown config section {section_name!r}")
        if not isinstance(values, dict):
            raise InvalidConfigError(f"section {section_name!r} must be an object")
        _apply_section(getattr(cfg, section_name), section_name, values)
    return cfg


def load_config(path_or_profile: str | None) -> RunConfig:
    """Load a JSON config file, a named profile ('smoke'), or the defaults."""
    if path_or_profile is None:
        return RunConfig()
    if path_or_profile in PROFILES:
        return config_from_dict(PROFILES[path_or_profile])
    try:
        with open(path_or_profile, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise InvalidConfigError(f"cannot read config {path_or_profile}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise InvalidConfigError("config root must be a JSON object")
    return config_from_dict(raw)


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply repeatable ``section.key=value`` strings; values parse as JSON."""
    for item in overrides or []:
        if "=" not in item:
            raise InvalidConfigError(f"--set expects section.key=value, got {item!r}")
        dotted, raw_value = item.split("=", 1)
        try:
            value = json.loads(raw_value)
        except json.JSONDecodeError:
            value = raw_value
        if dotted == "output_dir":
            cfg.output_dir = str(value)
            continue
        if "." not in dotted:
            raise InvalidConfigError(f"--set expects section.key=value, got {item!r}")
        section_name, key = dotted.split(".", 1)
        if section_name not in _SECTION_TYPES:
            raise InvalidConfigError(f"unknown config section {section_name!r}")
        _apply_section(getattr(cfg, section_name), section_name, {key: value})
    return cfg
