"""Backbone + head assemblies for the two tasks."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .backbone import Backbone, BackboneConfig
from .heads import ClassificationHead, HeadConfig, SegmentationHead
from .nn import Module
from .tensor import Tensor, precision

TASKS = ("classification", "segmentation")


@dataclass
class ModelConfig:
    task: str = "classification"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    precision: str = "float32"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if isinstance(self.head, dict):
            self.head = HeadConfig(**self.head)
        np.dtype(self.precision)

    def to_dict(self) -> dict:
        return asdict(self)


class PointStackClassifier(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        with precision(cfg.precision):
            self.backbone = Backbone(cfg.backbone, rng)
            self.head = ClassificationHead(self.backbone.global_dim, cfg.head, rng)

    def __call__(self, xyz: np.ndarray, rng: np.random.Generator | None = None) -> Tensor:
        out = self.backbone(xyz)
        return self.head(out.global_feature, rng)


class PointStackSegmenter(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        with precision(cfg.precision):
            self.backbone = Backbone(cfg.backbone, rng)
            channels = [s.channels for s in cfg.backbone.stages]
            self.head = SegmentationHead(channels, self.backbone.global_dim, cfg.head, rng)

    def __call__(self, xyz: np.ndarray, object_onehot: np.ndarray | None = None,
                 rng: np.random.Generator | None = None) -> Tensor:
        xyz = np.asarray(xyz)
        if xyz.ndim == 2:
            xyz = xyz[None]
        out = self.backbone(xyz)
        return self.head(out.per_level, out.global_feature, xyz, object_onehot, rng)


def build_model(cfg: ModelConfig, seed: int = 0) -> Module:
    rng = np.random.default_rng(seed)
    if cfg.task == "classification":
        return PointStackClassifier(cfg, rng)
    return PointStackSegmenter(cfg, rng)
