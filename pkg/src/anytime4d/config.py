"""Run configuration: one JSON document with a section per stage.

Every field has a default; unknown keys anywhere are rejected. Command-line
overrides use dotted paths, e.g. ``train.steps=200`` or ``model.motion_variant=no_adaln``.

Sections and defaults::

    gen    count 8, seed 0, num_frames 6, resolution [64, 64], resolutions null
           (a list of [H, W] choices, one drawn per sequence), num_objects [1, 3],
           object_speed [0.08, 0.2], camera_speed 0.04, background "plane", static false
    model  see ModelConfig: patch_size 8, embed_dim 128, encoder_layers 6, heads 4,
           motion_layers 4, mlp_ratio 4, head_hidden 256, norm_eps 1e-6,
           time_max_freq 32, prior_fov 60 deg, motion_variant "full",
           output_param "displacement", causal false
    train  see TrainConfig: steps 5000, lr 3e-4, weight_decay 0.05, clip_norm 1.0,
           warmup_steps 0, betas [0.9, 0.999], dense_probability 0.2,
           keep_fraction [0.2, 0.3], gradient_weight 1.0, clip_length null,
           max_stride 5, augment true, seed 0, checkpoint_every 500
    eval   metrics [tracking, pose, depth, recon], align "sim3_ransac",
           depth_align "scale", apd_thresholds [0.05, 0.1, 0.2, 0.4, 0.8],
           ransac_threshold 0.05, ransac_iterations 512, ransac_seed 0, knn 10,
           query null (middle frame)
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .evalmetrics import DEFAULT_APD_THRESHOLDS
from .inference import DEPTH_ALIGNMENTS, METRIC_GROUPS, TRACK_ALIGNMENTS
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _strict(cls, d: dict, section: str):
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be an object")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {section!r} section: {e}") from e


@dataclass
class GenConfig:
    count: int = 8
    seed: int = 0
    num_frames: int = 6
    resolution: tuple[int, int] = (64, 64)
    resolutions: list[tuple[int, int]] | None = None
    num_objects: tuple[int, int] = (1, 3)
    object_speed: tuple[float, float] = (0.08, 0.2)
    camera_speed: float = 0.04
    background: str = "plane"
    static: bool = False

    def __post_init__(self):
        self.resolution = tuple(self.resolution)
        self.num_objects = tuple(self.num_objects)
        self.object_speed = tuple(self.object_speed)
        if self.resolutions is not None:
            self.resolutions = [tuple(r) for r in self.resolutions]
        if self.count < 0:
            raise ValueError("count must be non-negative")
        if self.num_frames < 2:
            raise ValueError("num_frames must be at least 2")
        for H, W in [self.resolution, *(self.resolutions or [])]:
            if H < 8 or W < 8 or H % 2 or W % 2:
                raise ValueError(f"resolution {H}x{W} must be even and at least 8")


@dataclass
class EvalConfig:
    metrics: tuple[str, ...] = METRIC_GROUPS
    align: str = "sim3_ransac"
    depth_align: str = "scale"
    apd_thresholds: tuple[float, ...] = DEFAULT_APD_THRESHOLDS
    ransac_threshold: float = 0.05
    ransac_iterations: int = 512
    ransac_seed: int = 0
    knn: int = 10
    query: int | None = None

    def __post_init__(self):
        self.metrics = tuple(self.metrics)
        self.apd_thresholds = tuple(self.apd_thresholds)
        if set(self.metrics) - set(METRIC_GROUPS):
            raise ValueError(f"metrics must be drawn from {METRIC_GROUPS}")
        if self.align not in TRACK_ALIGNMENTS:
            raise ValueError(f"align must be one of {TRACK_ALIGNMENTS}")
        if self.depth_align not in DEPTH_ALIGNMENTS:
            raise ValueError(f"depth_align must be one of {DEPTH_ALIGNMENTS}")

    def kwargs(self) -> dict:
        return dict(metrics=self.metrics, align=self.align, depth_align=self.depth_align,
                    thresholds=self.apd_thresholds, ransac_threshold=self.ransac_threshold,
                    ransac_iterations=self.ransac_iterations, seed=self.ransac_seed, knn=self.knn)


SECTIONS = {"gen": GenConfig, "model": ModelConfig, "train": TrainConfig, "eval": EvalConfig}


@dataclass
class RunConfig:
    gen: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        return cls(**{name: _strict(kind, d.get(name, {}), name) for name, kind in SECTIONS.items()})

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e

    def dump(self, directory) -> Path:
        path = Path(directory) / "config.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n")
        return path

    def with_overrides(self, assignments: list[str]) -> "RunConfig":
        """Apply ``section.key=value`` strings; values parse as JSON, falling back to plain strings."""
        d = self.to_dict()
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form section.key=value")
            path, raw = item.split("=", 1)
            parts = path.split(".")
            if len(parts) != 2 or parts[0] not in d:
                raise ConfigError(f"override path {path!r} must be <section>.<key>")
            section, key = parts
            if key not in d[section]:
                raise ConfigError(f"unknown key {key!r} in section {section!r}")
            d[section][key] = _parse_value(raw)
        return self.from_dict(d)


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw
