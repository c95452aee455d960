"""Run configuration: dataclasses, YAML loading, and named presets.

A run is fully described by a ``RunConfig``. Data flows defaults ->
preset -> YAML file -> explicit overrides, each layer only touching the
keys it names. The service URL may additionally be overridden by the
``BOOTSPLAT_SERVICE_URL`` environment variable.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, replace

import yaml

ENV_SERVICE_URL = "BOOTSPLAT_SERVICE_URL"

DEFAULT_INTERVALS = (6000, 9000, 15000, 18000, 21000, 24000, 27000, 29000)


@dataclass(frozen=True)
class LossConfig:
    l1_weight: float = 0.8
    dssim_weight: float = 0.2


@dataclass(frozen=True)
class LrConfig:
    position_init: float = 1.6e-4
    position_final: float = 1.6e-6
    position_max_steps: int = 30_000
    rotation: float = 1e-3
    log_scale: float = 5e-3
    opacity: float = 5e-2
    color: float = 2.5e-3
    sh1: float = 1.25e-4


@dataclass(frozen=True)
class DensifySection:
    enabled: bool = True
    clone_grad_threshold: float = 2e-4
    split_scale_frac: float = 0.01  # fraction of the scene extent
    densify_interval: int = 100
    opacity_reset_interval: int = 3000
    prune_alpha: float = 0.005
    direction_consistency_ratio: float = 0.5
    start: int = 500
    end: int = 15_000


@dataclass(frozen=True)
class UpscaleSection:
    enabled: bool = False
    iter_range: tuple[int, int] = (6000, 18_000)
    blur_sigma: float = 3.0
    downscale_factor: int = 3
    upscale_factor: int = 4


@dataclass(frozen=True)
class ServiceSection:
    url: str | None = None
    timeout: float = 120.0

    def resolved_url(self) -> str | None:
        return os.environ.get(ENV_SERVICE_URL) or self.url


@dataclass(frozen=True)
class BootstrapSection:
    enabled: bool = False
    mode: str = "random"
    variants_per_camera: int = 2
    qvec_noise_scale: float = 0.1
    tvec_noise_scale: float = 0.2
    intervals: tuple[int, ...] = DEFAULT_INTERVALS
    interval_length: int = 1000
    lambda_boot_schedule: tuple[float, float] = (0.15, 0.05)
    lambda_switch: int = 500
    s_r_start: float = 0.05
    s_r_end: float = 0.01
    sampler_steps: int = 100
    overlap_averaging: bool = False
    predictor: str = "heuristic"  # heuristic | zero | remote
    fallback_on_failure: bool = True
    upscale: UpscaleSection = field(default_factory=UpscaleSection)
    service: ServiceSection = field(default_factory=ServiceSection)


@dataclass(frozen=True)
class DiffusionSection:
    train_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2


@dataclass(frozen=True)
class RunConfig:
    iterations: int = 30_000
    seed: int = 0
    tile: int = 16
    holdout_every: int = 8
    with_sh: bool = True
    checkpoints: tuple[int, ...] = (7000, 30_000)
    eval_interval: int = 0  # 0: evaluate only at the end
    loss: LossConfig = field(default_factory=LossConfig)
    lr: LrConfig = field(default_factory=LrConfig)
    densify: DensifySection = field(default_factory=DensifySection)
    bootstrap: BootstrapSection = field(default_factory=BootstrapSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)


_TUPLE_FIELDS = {"intervals", "checkpoints", "iter_range", "lambda_boot_schedule"}


def _merge_into(obj, data: dict):
    """Overlay a plain dict onto a (possibly nested) config dataclass."""
    if not isinstance(data, dict):
        raise ValueError(f"expected a mapping for {type(obj).__name__}, "
                         f"got {type(data).__name__}")
    valid = {f.name for f in dataclasses.fields(obj)}
    updates = {}
    for key, value in data.items():
        if key not in valid:
            raise ValueError(f"unknown config key {key!r} in "
                             f"{type(obj).__name__}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            updates[key] = _merge_into(current, value)
        elif key in _TUPLE_FIELDS:
            updates[key] = tuple(value)
        else:
            updates[key] = value
    return replace(obj, **updates)


def config_from_dict(data: dict, base: RunConfig | None = None) -> RunConfig:
    return _merge_into(base or RunConfig(), data or {})


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    """Overlay a YAML config file onto ``base`` (or the defaults)."""
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    return config_from_dict(data, base)


def preset(name: str) -> RunConfig:
    """Named training presets.

    ``baseline``  plain splatting: the v1 config with an empty interval
                  list (no bootstrap work ever runs).
    ``v1``        gentle regeneration, strength 0.05 -> 0.01.
    ``v3``        strong regeneration, strength 0.15 -> 0.01.
    ``v4``        v3 plus the upscale path (each batch gains 2 views).
    """
    v1 = RunConfig(bootstrap=BootstrapSection(
        enabled=True, mode="random", s_r_start=0.05, s_r_end=0.01))
    if name == "v1":
        return v1
    if name == "baseline":
        return replace(v1, bootstrap=replace(v1.bootstrap, intervals=()))
    if name == "v3":
        return replace(v1, bootstrap=replace(v1.bootstrap, s_r_start=0.15))
    if name == "v4":
        v3 = preset("v3")
        boot = replace(v3.bootstrap, upscale=UpscaleSection(enabled=True))
        return replace(v3, bootstrap=boot)
    raise ValueError(f"unknown preset {name!r}; expected baseline, v1, v3, or v4")
