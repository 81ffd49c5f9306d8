"""Whole-image preprocessing and the pipeline-wide configuration."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Union

import numpy as np

from .dataset import AugmentParams, SplitSpec
from .ellipse import Ellipse, interior_mask
from .fov import DEFAULT_THRESHOLD, detect_fov
from .imaging import crop_to_ellipse_bbox, equalize_color_hue_preserving, mask_outside_ellipse, resize_bilinear
from .model import ModelSpec, TrainConfig


@dataclass(frozen=True)
class FovConfig:
    threshold: Union[int, str] = DEFAULT_THRESHOLD
    trim_fraction: float = 0.1
    iterations: int = 3

    def __post_init__(self):
        if not (self.threshold == "otsu" or (isinstance(self.threshold, int) and 0 <= self.threshold <= 255)):
            raise ValueError("fov threshold must be an integer in [0, 255] or 'otsu'")
        if not 0 <= self.trim_fraction < 0.5:
            raise ValueError("trim_fraction must lie in [0, 0.5)")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


@dataclass(frozen=True)
class EvalConfig:
    threshold: float = 0.5
    ci_level: float = 0.95

    def __post_init__(self):
        if not 0 < self.ci_level < 1:
            raise ValueError("ci_level must lie in (0, 1)")


@dataclass(frozen=True)
class PipelineConfig:
    fov: FovConfig = field(default_factory=FovConfig)
    preprocess_size: int = 299
    synth_size: int = 256
    split: SplitSpec = field(default_factory=SplitSpec)
    augment: AugmentParams = field(default_factory=AugmentParams)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.preprocess_size < 1 or self.synth_size < 16:
            raise ValueError("image sizes out of range")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


_SECTIONS = {
    "fov": FovConfig,
    "split": SplitSpec,
    "augment": AugmentParams,
    "model": ModelSpec,
    "train": TrainConfig,
    "eval": EvalConfig,
}
_TUPLE_FIELDS = {"ratios", "scale_range", "conv_channels"}


def _section(cls, values: dict, name: str):
    if not isinstance(values, dict):
        raise ValueError(f"config section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown keys in config section {name!r}: {sorted(unknown)}")
    values = {k: tuple(v) if k in _TUPLE_FIELDS else v for k, v in values.items()}
    return cls(**values)


def config_from_dict(d: dict) -> PipelineConfig:
    """Build a config from a (possibly partial) JSON object; missing keys keep defaults."""
    if not isinstance(d, dict):
        raise ValueError("config must be a JSON object")
    unknown = set(d) - set(_SECTIONS) - {"preprocess_size", "synth_size"}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {k: _section(cls, d[k], k) for k, cls in _SECTIONS.items() if k in d}
    for k in ("preprocess_size", "synth_size"):
        if k in d:
            kwargs[k] = int(d[k])
    return PipelineConfig(**kwargs)


def load_config(path) -> PipelineConfig:
    with open(path, encoding="utf-8") as fh:
        return config_from_dict(json.load(fh))


def override(obj, **changes):
    """``dataclasses.replace`` that ignores ``None`` values (unset CLI flags)."""
    changes = {k: v for k, v in changes.items() if v is not None}
    return replace(obj, **changes) if changes else obj


def preprocess_image(img: np.ndarray, size: int = 299, fov: FovConfig = FovConfig()) -> tuple[np.ndarray, Ellipse]:
    """Detect the FOV, equalize inside it, black out the rest, crop and resize.

    Returns the ``size x size`` image and the detected FOV ellipse.
    """
    e = detect_fov(img, fov.threshold, fov.trim_fraction, fov.iterations)
    inside = interior_mask(img.shape[0], img.shape[1], e)
    out = equalize_color_hue_preserving(img, inside)
    out = mask_outside_ellipse(out, e)
    out = crop_to_ellipse_bbox(out, e)
    return resize_bilinear(out, size, size), e
