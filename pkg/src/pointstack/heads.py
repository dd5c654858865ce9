"""Task heads: shape classification and part segmentation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Linear, MLPBlock, Module
from .tensor import ShapeError, Tensor, broadcast_to, concat, gather, mul, reshape, sum_

INTERP_EPS = 1e-8


@dataclass
class HeadConfig:
    num_classes: int = 15
    hidden: list[int] = field(default_factory=lambda: [512, 256])
    dropout: float = 0.5
    # segmentation only
    num_parts: int = 50
    num_objects: int = 16
    object_conditioning: bool = True

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("a classification head needs at least 2 classes")
        if not self.hidden:
            raise ValueError("head needs at least one hidden block")


def segmentation_head_config(**kw) -> HeadConfig:
    kw.setdefault("hidden", [1024, 512, 256])
    kw.setdefault("dropout", 0.4)
    return HeadConfig(**kw)


class ClassificationHead(Module):
    def __init__(self, in_dim: int, cfg: HeadConfig, rng: np.random.Generator, dtype=None):
        self.in_dim = in_dim
        self.cfg = cfg
        dims = [in_dim] + list(cfg.hidden)
        self.blocks = [MLPBlock(a, b, cfg.dropout, rng, dtype) for a, b in zip(dims, dims[1:])]
        self.out = Linear(dims[-1], cfg.num_classes, rng, dtype=dtype)

    def __call__(self, g: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        return classify(g, self, rng)


def classify(g: Tensor, head: ClassificationHead, rng: np.random.Generator | None = None) -> Tensor:
    """Class logits ``(B, num_classes)`` from global vectors ``(B, in_dim)``."""
    if g.shape[-1] != head.in_dim:
        raise ShapeError(f"global vector width {g.shape[-1]} does not match head input {head.in_dim}")
    x = g
    for block in head.blocks:
        x = block(x, rng)
    return head.out(x)


def interpolation_weights(anchors: np.ndarray, targets: np.ndarray, k: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-distance weights of the ``k`` nearest anchors of every target.

    Batched ``(B, M, 3)`` anchors and ``(B, N, 3)`` targets give ``(B, N, k)``
    index and weight arrays.  A target that coincides with an anchor takes
    that anchor's feature exactly.
    """
    k = min(k, anchors.shape[1])
    d = np.sqrt(((targets[:, :, None, :] - anchors[:, None, :, :]) ** 2).sum(-1))
    idx = np.argsort(d, axis=-1, kind="stable")[..., :k]
    dk = np.take_along_axis(d, idx, -1)
    w = 1.0 / (dk + INTERP_EPS)
    w /= w.sum(-1, keepdims=True)
    exact = dk[..., 0] == 0
    if exact.any():
        w[exact] = 0.0
        w[exact, 0] = 1.0
    return idx, w


def propagate(features: Tensor, anchors: np.ndarray, targets: np.ndarray, k: int = 3) -> Tensor:
    """Interpolate ``(B, M, C)`` anchored features onto ``(B, N, 3)`` targets."""
    idx, w = interpolation_weights(anchors, targets, k)
    picked = gather(features, idx)  # (B, N, k, C)
    return sum_(mul(picked, w[..., None].astype(features.dtype)), axis=2)


class SegmentationHead(Module):
    def __init__(self, level_channels: list[int], global_dim: int, cfg: HeadConfig,
                 rng: np.random.Generator, dtype=None):
        self.cfg = cfg
        self.level_channels = list(level_channels)
        self.global_dim = global_dim
        in_dim = sum(level_channels) + global_dim + (cfg.num_objects if cfg.object_conditioning else 0)
        dims = [in_dim] + list(cfg.hidden)
        self.blocks = [MLPBlock(a, b, cfg.dropout, rng, dtype) for a, b in zip(dims, dims[1:])]
        self.out = Linear(dims[-1], cfg.num_parts, rng, dtype=dtype)

    def __call__(self, per_level, g: Tensor, xyz: np.ndarray, object_onehot: np.ndarray | None,
                 rng: np.random.Generator | None = None) -> Tensor:
        return segment(per_level, g, xyz, object_onehot, self, rng)


def segment(per_level, g: Tensor, xyz: np.ndarray, object_onehot, head: SegmentationHead,
            rng: np.random.Generator | None = None) -> Tensor:
    """Per-point part logits ``(B, N, num_parts)``.

    Every level is propagated back to the ``N`` input points, then the global
    vector and (optionally) the object one-hot are appended to each point.
    """
    xyz = np.asarray(xyz)
    if xyz.ndim == 2:
        xyz = xyz[None]
    b, n, _ = xyz.shape
    if len(per_level) != len(head.level_channels):
        raise ShapeError(f"head expects {len(head.level_channels)} levels, got {len(per_level)}")
    parts = []
    for pf, c in zip(per_level, head.level_channels):
        if pf.anchors is None:
            raise ValueError(f"level {pf.level} carries no anchors")
        if pf.features.shape[-1] != c or pf.anchors.shape[0] != b:
            raise ShapeError(f"level {pf.level} features {pf.features.shape} do not fit the head")
        parts.append(propagate(pf.features, pf.anchors, xyz))
    if g.shape[-1] != head.global_dim:
        raise ShapeError(f"global vector width {g.shape[-1]} does not match {head.global_dim}")
    parts.append(broadcast_to(reshape(g, (b, 1, g.shape[-1])), (b, n, g.shape[-1])))
    if head.cfg.object_conditioning:
        oh = np.asarray(object_onehot, dtype=g.dtype).reshape(b, 1, -1)
        if oh.shape[-1] != head.cfg.num_objects:
            raise ShapeError(f"object one-hot has length {oh.shape[-1]}, expected {head.cfg.num_objects}")
        parts.append(Tensor(np.broadcast_to(oh, (b, n, oh.shape[-1]))))
    x = concat(parts, axis=-1)
    for block in head.blocks:
        x = block(x, rng)
    return head.out(x)
