"""Layered experiment configuration: defaults <- YAML/JSON file <- ``key=value`` overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    task: str = "lowlight"
    n: int = 160
    size: int = 32
    channels: int = 1
    severity_min: float = 0.3
    severity_max: float = 1.0
    splits: list = field(default_factory=lambda: [0.7, 0.1, 0.2])
    image_folder: str = ""


@dataclass
class ScheduleConfig:
    T: int = 50
    beta_start: float = 2e-3           # the 1e-4..0.02 DDPM range scaled by 1000 / T
    beta_end: float = 0.4
    kind: str = "linear"
    sampling_steps: int = 10         # strided reverse subsequence; 0 means every timestep


@dataclass
class ModelConfig:
    width: int = 16
    depth: int = 2
    emb_dim: int = 16
    dtype: str = "float32"


@dataclass
class SFTConfig:
    steps: int = 1500
    batch_size: int = 16
    lr: float = 2e-3
    optimizer: str = "adam"
    log_every: int = 100


@dataclass
class ScorerSection:
    tasks: list = field(default_factory=lambda: ["lowlight", "rain", "motion_blur", "defocus",
                                                  "exposure", "noise"])
    n_images: int = 120
    n_heldout: int = 40
    severities: list = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0])
    width: int = 12
    epochs: int = 15
    batch_size: int = 64
    lr: float = 2e-3


@dataclass
class RLConfig:
    enabled: bool = True               # False gives the difficulty-weighted SFT control
    iterations: int = 30
    batch_size: int = 32               # rollouts per outer iteration
    rollouts_per_image: int = 4        # batch_size / rollouts_per_image distinct images
    pool_size: int = 0                 # hardest training images kept for this stage; 0 keeps all
    diff_reduction: str = "sum"        # L_diff per sample: squared error "sum" or "mean"
    inner_epochs: int = 2
    lr: float = 2e-4
    optimizer: str = "adam"
    max_grad_norm: float = 1.0
    clip_eps: float = 0.2
    kl_weight: float = 0.1
    old_refresh: int = 1               # refresh theta_old every k outer iterations
    weight_cadence: int = 1            # recompute difficulty weights every k iterations
    reward: str = "proxy"              # proxy | reconstruction | external
    norm: str = "hybrid"               # hybrid | track_only | batch_only
    mix: float = 0.5
    decay: float = 0.9
    eps_var: float = 1e-8
    min_track_count: int = 2
    track_by: str = "image_step"       # image_step | image
    advantage_mode: str = "step"       # step | trajectory
    refine: bool = True
    skip_floor_steps: bool = True      # leave low-variance steps out of the surrogate
    min_step_variance: float = 1e-2    # steps at or below this policy variance count as low
    refine_iterations: int = 1
    uniform_weights: bool = False
    final_step_reward_only: bool = False
    iterative_scorer_refresh: bool = False
    refresh_every: int = 10
    refresh_reference_rmse: float = 0.25
    eval_every: int = 5
    checkpoint_every: int = 10


@dataclass
class EvalConfig:
    split: str = "test"
    seed: int = 12345
    max_images: int = 32


@dataclass
class ExternalSection:
    endpoint: str = ""                 # empty: read RESTORL_SCORER_ENDPOINT
    timeout: float = 10.0
    max_in_flight: int = 4


@dataclass
class PathsConfig:
    data_dir: str = ""                 # empty: <output_dir>/data
    sft_checkpoint: str = ""           # empty: <output_dir>/sft.ckpt
    scorer_checkpoint: str = ""        # empty: <output_dir>/scorer.pt


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    sft: SFTConfig = field(default_factory=SFTConfig)
    scorer: ScorerSection = field(default_factory=ScorerSection)
    rl: RLConfig = field(default_factory=RLConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    external: ExternalSection = field(default_factory=ExternalSection)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def data_dir(self) -> Path:
        return Path(self.paths.data_dir) if self.paths.data_dir else self.out / "data"

    def sft_checkpoint(self) -> Path:
        return Path(self.paths.sft_checkpoint) if self.paths.sft_checkpoint else self.out / "sft.ckpt"

    def scorer_checkpoint(self) -> Path:
        return Path(self.paths.scorer_checkpoint) if self.paths.scorer_checkpoint else self.out / "scorer.pt"


CHOICES = {
    ("data", "task"): {"lowlight", "rain", "motion_blur", "defocus"},
    ("schedule", "kind"): {"linear", "cosine"},
    ("model", "dtype"): {"float32", "float64"},
    ("rl", "reward"): {"proxy", "reconstruction", "external"},
    ("rl", "norm"): {"hybrid", "track_only", "batch_only"},
    ("rl", "track_by"): {"image_step", "image"},
    ("rl", "advantage_mode"): {"step", "trajectory"},
    ("rl", "diff_reduction"): {"sum", "mean"},
    ("eval", "split"): {"train", "val", "test"},
}


def _build(cls, data: dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    default = cls()
    for name, value in data.items():
        current = getattr(default, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{prefix}{name}.")
        else:
            kwargs[name] = _coerce(current, value, prefix + name)
    return cls(**kwargs)


def _coerce(current: Any, value: Any, key: str):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects a boolean, got {value!r}")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, str):
            # YAML 1.1 reads exponent forms without a dot ("1e-3") as strings
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} expects a string, got {value!r}")
        return value
    if isinstance(current, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} expects a list, got {value!r}")
        return list(value)
    return value


def _merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_override(text: str) -> dict:
    """``"rl.clip_eps=0.1"`` -> ``{"rl": {"clip_eps": 0.1}}``; the value is parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw!r}") from exc
    out: dict = {}
    node = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    for (section, name), allowed in CHOICES.items():
        v = getattr(getattr(cfg, section), name)
        if v not in allowed:
            raise ConfigError(f"{section}.{name}={v!r}; expected one of {sorted(allowed)}")
    if not 0 < cfg.rl.clip_eps < 1:
        raise ConfigError("rl.clip_eps must lie in (0, 1)")
    if not 0 <= cfg.rl.mix <= 1:
        raise ConfigError("rl.mix must lie in [0, 1]")
    if not 0 < cfg.rl.decay <= 1:
        raise ConfigError("rl.decay must lie in (0, 1]")
    if cfg.rl.eps_var <= 0:
        raise ConfigError("rl.eps_var must be positive")
    if cfg.rl.min_step_variance < 0:
        raise ConfigError("rl.min_step_variance must be >= 0")
    for section, name in (("rl", "iterations"), ("rl", "batch_size"), ("rl", "inner_epochs"),
                          ("rl", "old_refresh"), ("rl", "rollouts_per_image"), ("rl", "weight_cadence"), ("rl", "refresh_every"),
                          ("sft", "batch_size"), ("data", "n"), ("schedule", "T")):
        if getattr(getattr(cfg, section), name) < 1:
            raise ConfigError(f"{section}.{name} must be >= 1")
    if cfg.rl.pool_size < 0:
        raise ConfigError("rl.pool_size must be >= 0")
    if cfg.rl.batch_size % cfg.rl.rollouts_per_image:
        raise ConfigError("rl.batch_size must be a multiple of rl.rollouts_per_image")
    if len(cfg.data.splits) != 3 or abs(sum(cfg.data.splits) - 1) > 1e-9:
        raise ConfigError("data.splits must be three fractions summing to 1")
    return cfg


def load_config(path: str | Path | None = None, overrides: list[str] | None = None,
                seed: int | None = None, output_dir: str | None = None) -> ExperimentConfig:
    data: dict = {}
    if path:
        text = Path(path).read_text()
        try:
            loaded = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        data = _merge(data, loaded)
    for o in overrides or []:
        data = _merge(data, parse_override(o))
    if seed is not None:
        data["seed"] = seed
    if output_dir is not None:
        data["output_dir"] = output_dir
    return validate(_build(ExperimentConfig, data))


def from_dict(data: dict) -> ExperimentConfig:
    return validate(_build(ExperimentConfig, data))
