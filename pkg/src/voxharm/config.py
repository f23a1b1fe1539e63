"""Run configuration: one JSON document with per-subsystem sections.

Every key has a default; defaults follow the published implementation
constants where those exist (schedule range, gating threshold, histogram
bins, trajectory steps, slice counts, learning rates) and desk-scale choices
elsewhere.  Parsing is fail-closed: unknown keys and out-of-range values
raise named errors, and paths resolve relative to the config file so a
resolved-config echo reproduces the run from anywhere.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import get_args, get_origin


class ConfigError(Exception):
    pass


@dataclass
class DataSection:
    subjects: int = 5
    sites: int = 6
    sequences: int = 2
    dims: tuple[int, ...] = (32, 32, 32)
    train_subjects: tuple[int, ...] = (1, 2, 3)
    val_subjects: tuple[int, ...] = (4,)
    test_subjects: tuple[int, ...] = (5,)
    target_site: int = 1

    def validate(self) -> None:
        if self.subjects < 1 or self.sites < 2 or self.sequences < 1:
            raise ConfigError("data: need subjects >= 1, sites >= 2, sequences >= 1")
        if len(self.dims) != 3 or any(d < 8 for d in self.dims):
            raise ConfigError("data.dims: need three dims, each >= 8")


@dataclass
class ScheduleSection:
    timesteps: int = 1000
    beta_start: float = 0.0015
    beta_end: float = 0.0195

    def validate(self) -> None:
        if self.timesteps < 2:
            raise ConfigError("schedule.timesteps: need >= 2")
        if not 0.0 < self.beta_start < self.beta_end < 1.0:
            raise ConfigError("schedule: need 0 < beta_start < beta_end < 1")


@dataclass
class DenoiserSection:
    channels: tuple[int, ...] = (16, 32, 64)
    res_blocks: int = 1
    emb_width: int = 64
    use_gradient_condition: bool = True
    use_ema_modulation: bool = True

    def validate(self) -> None:
        if len(self.channels) < 2 or any(c < 1 for c in self.channels):
            raise ConfigError("denoiser.channels: need at least two positive entries")
        if self.emb_width % 2:
            raise ConfigError("denoiser.emb_width: must be even")


@dataclass
class Stage1Section:
    epochs: int = 40
    batch_size: int = 4
    lr: float = 1e-4
    w_noise: float = 1.0
    w_gradient: float = 1.0
    w_ema: float = 1.0
    gamma: float = 0.8
    tau: int = 100
    hist_bins: int = 100
    hist_min: float = -1.0
    hist_max: float = 1.0
    grad_delta: float = 1e-8
    grad_q: float = 0.99

    def validate(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("stage1.gamma: must lie in [0, 1)")
        if self.tau < 0:
            raise ConfigError("stage1.tau: must be >= 0")
        if self.hist_bins < 2:
            raise ConfigError("stage1.hist_bins: need >= 2")
        if self.hist_max <= self.hist_min:
            raise ConfigError("stage1.hist_max must exceed hist_min")
        if not 0.0 < self.grad_q <= 1.0:
            raise ConfigError("stage1.grad_q: must lie in (0, 1]")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("stage1: lr, epochs, batch_size must be positive")


@dataclass
class Stage2Section:
    epochs: int = 2
    accumulate: int = 4
    lr: float = 5e-7
    w_style: float = 1.0
    w_consistency: float = 1.0
    w_gradient: float = 1.0
    backprop_steps: int = 1

    def validate(self) -> None:
        if self.lr <= 0 or self.epochs < 1 or self.accumulate < 1:
            raise ConfigError("stage2: lr, epochs, accumulate must be positive")
        if self.backprop_steps < 1:
            raise ConfigError("stage2.backprop_steps: need >= 1")


@dataclass
class TpaSection:
    embed_dim: int = 64
    slices_per_view: int = 24
    margin: float = 0.1
    heads: int = 4
    slice_size: int = 64
    use_positional: bool = True
    fusion_hidden: int = 64
    alpha_init: float = 0.1
    encoder: str = "random-projection"
    encoder_seed: int = 1234

    def validate(self) -> None:
        if self.embed_dim % self.heads:
            raise ConfigError("tpa: heads must divide embed_dim")
        if not 0.0 <= self.margin <= 0.4:
            raise ConfigError("tpa.margin: must lie in [0, 0.4]")
        if self.slices_per_view < 1:
            raise ConfigError("tpa.slices_per_view: need >= 1")


@dataclass
class TrajectorySection:
    t_forward: int = 35
    t_reverse: int = 25

    def validate(self) -> None:
        if self.t_forward < 0 or self.t_reverse < 0:
            raise ConfigError("trajectory: step counts must be >= 0")


@dataclass
class EvalSection:
    ssim_window: int = 7
    wd_bins: int = 100
    feature_seed: int = 17
    probe_seed: int = 5
    probe_lr: float = 0.5
    probe_iters: int = 300
    grid_forward: tuple[int, ...] = (5, 15, 25, 35, 45)
    grid_reverse: tuple[int, ...] = (5, 15, 25, 35, 45)

    def validate(self) -> None:
        if self.ssim_window % 2 == 0 or self.ssim_window < 3:
            raise ConfigError("eval.ssim_window: must be odd and >= 3")
        if self.wd_bins < 2:
            raise ConfigError("eval.wd_bins: need >= 2")


@dataclass
class SeedsSection:
    root: int = 0

    def validate(self) -> None:
        if self.root < 0:
            raise ConfigError("seeds.root: must be >= 0")


@dataclass
class PathsSection:
    data_dir: str = "data"
    runs_dir: str = "runs"

    def validate(self) -> None:
        pass


_SECTIONS = {
    "data": DataSection,
    "schedule": ScheduleSection,
    "denoiser": DenoiserSection,
    "stage1": Stage1Section,
    "stage2": Stage2Section,
    "tpa": TpaSection,
    "trajectory": TrajectorySection,
    "eval": EvalSection,
    "seeds": SeedsSection,
    "paths": PathsSection,
}

PRESETS: dict[str, dict] = {
    # Desk/CI preset: small trajectories, boosted distribution-matching
    # weight so the unified domain forms within a short training budget.
    "tiny": {
        "stage1": {"epochs": 30, "w_ema": 8.0, "w_gradient": 4.0},
        "stage2": {"epochs": 2},
        "trajectory": {"t_forward": 12, "t_reverse": 6},
        "eval": {"grid_forward": (0, 6, 12), "grid_reverse": (0, 6, 12)},
    },
    # Published-scale architecture constants; runtimes far beyond CI.
    "paper": {
        "denoiser": {"channels": (32, 64, 256, 256), "res_blocks": 2},
        "tpa": {"embed_dim": 512, "heads": 8},
        "stage1": {"epochs": 200},
        "stage2": {"epochs": 10},
    },
}


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    stage1: Stage1Section = field(default_factory=Stage1Section)
    stage2: Stage2Section = field(default_factory=Stage2Section)
    tpa: TpaSection = field(default_factory=TpaSection)
    trajectory: TrajectorySection = field(default_factory=TrajectorySection)
    eval: EvalSection = field(default_factory=EvalSection)
    seeds: SeedsSection = field(default_factory=SeedsSection)
    paths: PathsSection = field(default_factory=PathsSection)
    workers: int = 1

    def validate(self) -> "RunConfig":
        for name in _SECTIONS:
            getattr(self, name).validate()
        if self.workers < 1:
            raise ConfigError("workers: need >= 1")
        if self.trajectory.t_forward > self.schedule.timesteps:
            raise ConfigError("trajectory.t_forward exceeds schedule.timesteps")
        if self.trajectory.t_reverse > self.schedule.timesteps:
            raise ConfigError("trajectory.t_reverse exceeds schedule.timesteps")
        return self

    def to_dict(self) -> dict:
        out = {name: asdict(getattr(self, name)) for name in _SECTIONS}
        for section in out.values():
            for key, value in section.items():
                if isinstance(value, tuple):
                    section[key] = list(value)
        out["workers"] = self.workers
        return out

    def data_dir(self) -> Path:
        return Path(self.paths.data_dir)

    def runs_dir(self) -> Path:
        return Path(self.paths.runs_dir)


def _coerce(value, annotation, key):
    origin = get_origin(annotation)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list")
        inner = get_args(annotation)[0]
        return tuple(_coerce(v, inner, key) for v in value)
    if annotation is bool or annotation == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean")
        return value
    if annotation is int or annotation == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer")
        return value
    if annotation is float or annotation == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number")
        return float(value)
    if annotation is str or annotation == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string")
        return value
    raise ConfigError(f"{key}: unsupported config field type {annotation}")


def _build_section(cls, payload: dict, section_name: str):
    by_name = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in payload.items():
        if key not in by_name:
            raise ConfigError(f"unknown key {section_name}.{key}")
        ann = by_name[key].type
        kwargs[key] = _coerce(value, _resolve_annotation(cls, key, ann), f"{section_name}.{key}")
    return cls(**kwargs)


def _resolve_annotation(cls, key, ann):
    if isinstance(ann, str):
        import typing

        return typing.get_type_hints(cls)[key]
    return ann


def build_config(document: dict | None = None, preset: str | None = None) -> RunConfig:
    """Assemble a RunConfig from optional preset overrides plus a document."""
    merged: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        merged = copy.deepcopy(PRESETS[preset])
    for key, value in (document or {}).items():
        if key == "workers":
            merged["workers"] = value
            continue
        if key not in _SECTIONS:
            raise ConfigError(f"unknown config section {key!r}")
        if not isinstance(value, dict):
            raise ConfigError(f"section {key!r} must be an object")
        merged.setdefault(key, {})
        merged[key].update(value)

    sections = {}
    for name, cls in _SECTIONS.items():
        sections[name] = _build_section(cls, merged.get(name, {}), name)
    workers = merged.get("workers", 1)
    if isinstance(workers, bool) or not isinstance(workers, int):
        raise ConfigError("workers: expected an integer")
    return RunConfig(workers=workers, **sections).validate()


def parse_config(path: str | Path | None, preset: str | None = None) -> RunConfig:
    """Load, validate, and path-resolve a config file (or pure defaults)."""
    document = None
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            document = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        base = path.parent.resolve()
    config = build_config(document, preset=preset)
    config.paths.data_dir = str((base / config.paths.data_dir).resolve())
    config.paths.runs_dir = str((base / config.paths.runs_dir).resolve())
    return config


def write_config_echo(config: RunConfig, path: str | Path, extra: dict | None = None) -> None:
    """Persist the fully resolved config (plus seed record) beside run outputs."""
    payload = {"config": config.to_dict(), "seed": config.seeds.root}
    if extra:
        payload.update(extra)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
