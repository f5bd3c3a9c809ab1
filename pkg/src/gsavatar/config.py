"""Run configuration: dataclasses, JSON round-trip, dotted overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LOSS_PRESETS, LossWeights
from .synthetic import SyntheticBodyConfig


@dataclass
class MotionConfig:
    """Smooth sinusoidal joint curves driving the synthetic sequence."""

    amplitude: float = 0.45        # radians, scales the body joint swings
    hand_amplitude: float = 0.55   # radians, finger curls
    frequency: float = 1.0         # cycles over the whole sequence
    hand_frequency: float = 2.0
    root_sway: float = 0.01        # meters
    color_drift: float = 0.10      # global tint modulation amplitude
    color_frequency: float = 2.0
    bulge_amplitude: float = 0.010  # meters, pose-tracked canonical offsets
    bump_pose_gain: float = 0.6    # hand bump scaling with finger flexion
    shading: float = 0.35          # lambertian shading strength
    pose_jitter: float = 0.0       # radians, noise on training-frame poses
    only_joints: dict[str, float] | None = None  # restrict motion to these joints


@dataclass
class CameraConfig:
    distance: float = 2.6
    height: float = 1.15
    orbit_degrees: float = 50.0
    fov_degrees: float = 40.0
    look_at_height: float = 1.0


@dataclass
class DatasetConfig:
    n_frames: int = 70
    test_every: int = 7
    test_offset: int = 3
    val_count: int = 0
    width: int = 96
    height: int = 128
    gt_points: int = 6000
    body: SyntheticBodyConfig = field(default_factory=SyntheticBodyConfig)
    motion: MotionConfig = field(default_factory=MotionConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)

    def validate(self) -> None:
        if self.n_frames < 1 or self.gt_points < 1:
            raise ValueError("n_frames and gt_points must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("resolution must be positive")
        if self.test_every < 2:
            raise ValueError("test_every must be >= 2")
        self.body.validate()


@dataclass
class ModelConfig:
    n_gaussians: int = 2000
    channels: int = 8
    plane_resolution: int = 64
    face_plane_scale: int = 2
    hidden_dim: int = 32
    joint_hidden_dim: int = 32
    max_disp_body: float = 0.05
    max_disp_detail: float = 0.01
    use_hexplane: bool = True
    use_struct_offset: bool = True
    use_color_offset: bool = True
    use_hand_refine: bool = True
    face_region_weight: float = 4.0   # laplacian multiplier on face/mouth nodes
    knn: int = 6

    def validate(self) -> None:
        for k in ("n_gaussians", "channels", "plane_resolution", "hidden_dim"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be positive")


@dataclass
class TrainSettings:
    iterations: int = 2000
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    group_lr_scale: dict[str, float] = field(default_factory=lambda: {
        "planes": 2.0, "mlps": 1.0, "embeddings": 1.0,
        "gauss_color": 1.0, "gauss_geom": 0.1, "hand": 1.0,
    })
    checkpoint_every: int = 1000
    log_every: int = 50
    loss_preset: str = "sweep-best"
    loss: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> None:
        if self.iterations < 0 or self.lr <= 0:
            raise ValueError("iterations must be >= 0 and lr > 0")
        if self.loss_preset not in LOSS_PRESETS:
            raise ValueError(f"unknown loss preset {self.loss_preset!r}")


@dataclass
class Config:
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSettings = field(default_factory=TrainSettings)

    def validate(self) -> None:
        self.dataset.validate()
        self.model.validate()
        self.train.validate()

    def apply_loss_preset(self) -> None:
        for k, v in LOSS_PRESETS[self.train.loss_preset].items():
            setattr(self.train.loss, k, v)


def paper_scale(cfg: Config) -> Config:
    """Published-scale settings; far too heavy for a CPU run, kept honest."""
    cfg.model.n_gaussians = 170_000
    cfg.model.channels = 32
    cfg.model.plane_resolution = 128
    cfg.model.hidden_dim = 256
    cfg.model.joint_hidden_dim = 256
    return cfg


def _from_dict(cls, data: dict, path: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ValueError(f"unknown config key(s) at {path or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        ftype = fields[name].type
        sub = _NESTED.get((cls, name))
        if sub is not None and isinstance(value, dict):
            kwargs[name] = _from_dict(sub, value, f"{path}{name}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)


_NESTED = {
    (Config, "dataset"): DatasetConfig,
    (Config, "model"): ModelConfig,
    (Config, "train"): TrainSettings,
    (DatasetConfig, "body"): SyntheticBodyConfig,
    (DatasetConfig, "motion"): MotionConfig,
    (DatasetConfig, "camera"): CameraConfig,
    (TrainSettings, "loss"): LossWeights,
}


def config_from_dict(data: dict) -> Config:
    cfg = _from_dict(Config, data, "")
    cfg.apply_loss_preset()
    # explicit loss weights win over the preset
    if "train" in data and "loss" in data["train"]:
        for k, v in data["train"]["loss"].items():
            setattr(cfg.train.loss, k, v)
    cfg.validate()
    return cfg


def config_to_dict(cfg: Config) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path) -> Config:
    return config_from_dict(json.loads(Path(path).read_text()))


def save_config(cfg: Config, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2))


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: Config, overrides: list[str]) -> Config:
    """Apply flat ``a.b.c=value`` strings onto an existing config."""
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        obj = cfg
        for p in parts[:-1]:
            if not hasattr(obj, p):
                raise ValueError(f"unknown config key {key!r}")
            obj = getattr(obj, p)
        leaf = parts[-1]
        if isinstance(obj, dict):
            obj[leaf] = _parse_value(raw)
            continue
        if not hasattr(obj, leaf):
            raise ValueError(f"unknown config key {key!r}")
        current = getattr(obj, leaf)
        value = _parse_value(raw)
        if isinstance(current, bool) and isinstance(value, (int, float)) and not isinstance(value, bool):
            value = bool(value)
        setattr(obj, leaf, value)
    cfg.validate()
    return cfg
