"""Run configuration: one TOML file with a table per component.

Unknown keys are rejected so that typos surface as configuration errors.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli

from .features import BackboneConfig
from .head import HeadConfig
from .losses import LossConfig
from .prompts import DEFAULT_TEMPLATE, K_PHRASE, TEXT_DIM

PROTOCOLS = ("FPP", "BHP", "CCP", "COP")


class ConfigError(ValueError):
    pass


@dataclass
class OptimConfig:
    lr: float = 1e-4
    weight_decay: float = 0.05
    batch_size: int = 8
    steps: int = 2000
    hflip: bool = False
    vflip: bool = False
    log_every: int = 50


@dataclass
class DataConfig:
    n: int = 8
    seed: int = 1
    size: int = 64
    figures_per_image: int = 1
    max_instances: int = 8
    unseen_rate: float = 0.0


@dataclass
class TextConfig:
    mode: str = "toy"
    dim: int = TEXT_DIM
    seed: int = 0
    archive: str = ""
    template: str = DEFAULT_TEMPLATE
    k_phrase: int = K_PHRASE


@dataclass
class InferConfig:
    threshold: float = 0.5
    mask_threshold: float = 0.5
    use_ebp: bool = True
    use_ensembles: bool = True
    max_predictions: int = 100


@dataclass
class EvalConfig:
    protocols: tuple[str, ...] = PROTOCOLS
    gammas: tuple[float, ...] = (1.0,)
    unseen: bool = True


def _build(cls, d: dict, section: str):
    if not isinstance(d, dict):
        raise ConfigError(f"[{section}] must be a table")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(unknown)}")
    d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{section}] {e}") from None


_SECTIONS = {
    "backbone": BackboneConfig,
    "head": HeadConfig,
    "loss": LossConfig,
    "optim": OptimConfig,
    "data": DataConfig,
    "text": TextConfig,
    "infer": InferConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    backbone_provider: str = "toy:777"
    resize: int = 64
    timestep: int = 0
    seed: int = 777
    feature_seed: int = 777
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    text: TextConfig = field(default_factory=TextConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.optim.steps < 1:
            raise ConfigError("optim.steps must be positive")
        if self.optim.batch_size < 1:
            raise ConfigError("optim.batch_size must be positive")
        if self.resize < 16:
            raise ConfigError("resize must be >= 16")
        if not 0 <= self.timestep <= self.backbone.max_timestep:
            raise ConfigError(f"timestep {self.timestep} outside [0, {self.backbone.max_timestep}]")
        bad = [p for p in self.eval.protocols if p not in PROTOCOLS]
        if bad:
            raise ConfigError(f"unknown protocols {bad}; expected a subset of {PROTOCOLS}")
        if any(not 0 < g <= 1 for g in self.eval.gammas):
            raise ConfigError("gammas must lie in (0, 1]")
        if self.text.mode not in ("toy", "archive"):
            raise ConfigError(f"text.mode must be 'toy' or 'archive', got {self.text.mode!r}")
        if self.text.template.count("{}") != 1:
            raise ConfigError("text.template needs exactly one '{}' placeholder")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        """Build from nested tables; a top-level ``preset`` supplies defaults the other keys override."""
        d = dict(d)
        preset = d.pop("preset", None)
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
            base = PRESETS[preset]().to_dict()
            for k, v in d.items():
                if isinstance(v, dict) and isinstance(base.get(k), dict):
                    base[k] = {**base[k], **v}
                else:
                    base[k] = v
            d = base
        top = {k: v for k, v in d.items() if k not in _SECTIONS}
        names = {f.name for f in fields(cls)} - set(_SECTIONS)
        unknown = sorted(set(top) - names)
        if unknown:
            raise ConfigError(f"unknown top-level keys: {', '.join(unknown)}")
        sections = {k: _build(c, d.get(k, {}), k) for k, c in _SECTIONS.items()}
        try:
            return cls(**top, **sections)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            with open(path, "rb") as fh:
                raw = tomli.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.to_dict() if hasattr(v, "to_dict") else (asdict(v) if f.name in _SECTIONS else v)
        return json.loads(json.dumps(out))  # tuples -> lists

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def overfit_preset(**overrides) -> RunConfig:
    """Desk-scale overfit recipe: 8 queries, 64x64 inputs, phrase-linked grounding."""
    cfg = RunConfig(
        head=HeadConfig(num_queries=8, dec_layers=3, strides=(8, 4, 2)),
        loss=LossConfig(num_points=2048, link_phrases=True),
        optim=OptimConfig(lr=1e-3, steps=800),
    )
    d = cfg.to_dict()
    for key, value in overrides.items():
        section, _, name = key.rpartition(".")
        (d[section] if section else d)[name] = value
    return RunConfig.from_dict(d)


PRESETS = {"default": RunConfig, "overfit": overfit_preset}
