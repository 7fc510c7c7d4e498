"""Run configuration: a YAML file plus ``--set key=value`` overrides (overrides win)."""
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .errors import ConfigurationError

VARIANTS = ("plain", "bn", "residual")
BACKBONES = ("alex", "vgg")
INPUT_MODES = ("rgb", "rgbd")


@dataclass
class SyntheticConfig:
    """Used when no dataset root is given."""
    n: int = 20
    size: int = 64
    seed: int = 0
    ambiguous: bool = False
    max_polyps: int = 2


@dataclass
class CameraConfig:
    focal: float = 64.0
    light_offset: tuple = (0.0, 0.0, 0.0)
    working_distance: float = 1.0


@dataclass
class SfSSection:
    albedo: object = "estimate"
    max_sweeps: int = 1000
    tolerance: float = 1e-4
    boundary: str = "outflow"


@dataclass
class RunConfig:
    command: str = "train"
    # data
    data_root: Optional[str] = None
    layout: Optional[str] = None
    depth_source: str = "dataset"  # dataset | sfs
    resize: Optional[int] = None
    polyp_frames_only: bool = True
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    # network
    variant: str = "plain"
    backbone: str = "alex"
    scale: int = 8
    width: int = 8
    input_mode: str = "rgb"
    learnable_deconv: bool = True
    # optimisation
    lr: float = 3e-3
    momentum: float = 0.99
    batch_size: int = 10
    patch_size: Optional[int] = None
    iterations: int = 1000
    seed: int = 0
    flip: bool = True
    vertical_flip: bool = False
    reduction: str = "mean"
    checkpoint_every: int = 0
    # evaluation
    checkpoint: Optional[str] = None
    prediction: str = "model"  # model | oracle | empty
    detection_rule: str = "centroid"
    # shape from shading
    camera: CameraConfig = field(default_factory=CameraConfig)
    sfs: SfSSection = field(default_factory=SfSSection)
    image_dir: Optional[str] = None
    # report
    run_dir: Optional[str] = None
    panels: int = 4
    out_dir: str = "out"

    def validate(self):
        checks = [
            (self.variant in VARIANTS, f"variant must be one of {VARIANTS}"),
            (self.backbone in BACKBONES, f"backbone must be one of {BACKBONES}"),
            (self.input_mode in INPUT_MODES, f"input_mode must be one of {INPUT_MODES}"),
            (self.depth_source in ("dataset", "sfs"), "depth_source must be dataset or sfs"),
            (self.prediction in ("model", "oracle", "empty"), "prediction must be model, oracle or empty"),
            (self.detection_rule in ("centroid", "overlap"), "detection_rule must be centroid or overlap"),
            (self.reduction in ("mean", "sum"), "reduction must be mean or sum"),
            (self.lr >= 0, "lr must be non-negative"),
            (0 <= self.momentum < 1, "momentum must be in [0, 1)"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.iterations >= 0, "iterations must be >= 0"),
            (self.scale >= 2 and self.scale & (self.scale - 1) == 0, "scale must be a power of two >= 2"),
            (self.camera.focal > 0, "camera.focal must be positive"),
            (self.sfs.boundary in ("outflow", "fixed-value"), "sfs.boundary must be outflow or fixed-value"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigurationError(msg)
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_yaml(self):
        d = self.to_dict()
        d["camera"]["light_offset"] = list(d["camera"]["light_offset"])
        return yaml.safe_dump(d, sort_keys=True)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True, default=list).encode()).hexdigest()[:16]


def _build(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{where or 'config'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ConfigurationError(f"unknown config key(s) {sorted(where + k for k in unknown)}")
    kwargs = {}
    for name, value in raw.items():
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING \
            else fields[name].default
        if dataclasses.is_dataclass(default):
            value = _build(type(default), value, f"{where}{name}.")
        elif isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


def _merge(base, overrides):
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value
    return base


def parse_override(text):
    """``a.b=value`` -> {"a": {"b": value}}, the value parsed as YAML."""
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} is not of the form key=value")
    key, value = text.split("=", 1)
    out = cur = {}
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = yaml.safe_load(value)
    return out


def load_config(path=None, overrides=(), command=None):
    raw = {}
    if path:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    for item in overrides:
        raw = _merge(raw, item if isinstance(item, dict) else parse_override(item))
    if command:
        raw["command"] = command
    try:
        return _build(RunConfig, raw, "").validate()
    except TypeError as exc:
        raise ConfigurationError(f"bad config value: {exc}") from exc
