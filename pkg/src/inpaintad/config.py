"""Run configuration: one structured file drives every command, with
environment variables expanded in path fields and every constant
carrying its full-scale default."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .finetune import FinetuneConfig
from .data import SynthConfig
from .pipeline import config_digest

MVTEC_TEXTURES = ("carpet", "grid", "leather", "tile", "wood")

BACKENDS = ("mock", "oracle", "factory")


@dataclass
class RunConfig:
    data_root: str = ""
    layout: str = "mvtec"
    output_dir: str = "runs/out"
    k: int = 1
    seed: int = 0
    image_size: int = 512
    scales: tuple[int, ...] = (1, 2, 4, 8)
    n_steps: int = 50
    lambda_default: float = 0.4
    lambda_per_category: dict[str, float] = field(default_factory=dict)
    alpha: float = 0.1
    sigma: float = 4.0
    epsilon: float = 1e-8
    pro_fpr_cap: float = 0.3
    normalize_scales: bool = False       # experiment flag; fusion uses raw maps
    schedule_steps: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.012
    schedule_interpolation: str = "scaled_linear"
    backend: str = "mock"
    ports_factory: str = ""              # "module.path:callable" for real adapters
    prompt_library: str = ""             # empty = packaged default
    texture_categories: tuple[str, ...] = MVTEC_TEXTURES
    rotations: tuple[int, ...] = (0, 90, 180, 270)
    workers: int = 1
    cache_dir: str = ""
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def lam_for(self, category: str) -> float:
        return float(self.lambda_per_category.get(category, self.lambda_default))

    @property
    def effective_alpha(self) -> float:
        # zero-shot runs have no prototype bank to blend
        return 0.0 if self.k == 0 else self.alpha

    def validate(self) -> "RunConfig":
        if self.layout not in ("mvtec", "visa", "synthetic"):
            raise ConfigError(f"unknown layout {self.layout!r}")
        if self.backend not in BACKENDS:
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.backend == "factory" and not self.ports_factory:
            raise ConfigError("backend 'factory' needs ports_factory set")
        if self.k < 0:
            raise ConfigError(f"k must be >= 0, got {self.k}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if not 0.0 <= self.lambda_default <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lambda_default}")
        for cat, lam in self.lambda_per_category.items():
            if not 0.0 <= lam <= 1.0:
                raise ConfigError(f"lambda[{cat}] outside [0, 1]: {lam}")
        if not self.scales or min(self.scales) < 1:
            raise ConfigError(f"bad scale set {self.scales}")
        for kk in self.scales:
            if self.image_size % kk != 0:
                raise ConfigError(f"image_size {self.image_size} not divisible by scale {kk}")
        if not 1 <= self.n_steps <= self.schedule_steps:
            raise ConfigError(f"n_steps {self.n_steps} outside [1, {self.schedule_steps}]")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def digest(self) -> str:
        """Hash of the semantic configuration: filesystem locations and
        worker counts do not change what gets computed."""
        payload = self.to_dict()
        for key in ("data_root", "output_dir", "cache_dir", "workers"):
            payload.pop(key, None)
        return config_digest(payload)


_PATH_FIELDS = ("data_root", "output_dir", "prompt_library", "cache_dir", "ports_factory")


def _coerce(cfg: RunConfig) -> RunConfig:
    cfg.scales = tuple(int(s) for s in cfg.scales)
    cfg.rotations = tuple(int(r) for r in cfg.rotations)
    cfg.texture_categories = tuple(cfg.texture_categories)
    if isinstance(cfg.finetune, dict):
        ft = dict(cfg.finetune)
        if "gamma_choices" in ft:
            ft["gamma_choices"] = tuple(float(g) for g in ft["gamma_choices"])
        cfg.finetune = FinetuneConfig(**ft)
    if isinstance(cfg.synth, dict):
        sy = dict(cfg.synth)
        if "defects_per_image" in sy:
            sy["defects_per_image"] = tuple(int(v) for v in sy["defects_per_image"])
        cfg.synth = SynthConfig(**sy)
    return cfg


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from a YAML file plus override pairs; paths get
    environment variables expanded."""
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        with open(p, "r", encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {p} must hold a mapping")
        data.update(loaded)
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    known = {f for f in RunConfig.__dataclass_fields__}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        cfg = _coerce(RunConfig(**data))
    except TypeError as exc:
        raise ConfigError(f"bad config structure: {exc}") from exc
    for name in _PATH_FIELDS:
        value = getattr(cfg, name)
        if value:
            setattr(cfg, name, os.path.expandvars(str(value)))
    return cfg.validate()


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)
