"""Multi-resolution feature learning backbone.

``m`` residual stages each downsample the point set and widen the features,
giving per-level feature matrices PF_1..PF_m.  Every level is pooled to a
fixed number of rows, the pooled blocks are stacked, and a final pooling over
the stack yields the global feature vector.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import geometry
from .nn import ConvBNReLU, Linear, Module, ResidualMLP
from .pooling import LearnablePooling, learnable_pool, max_pool
from .tensor import (
    Parameter,
    ShapeError,
    Tensor,
    broadcast_to,
    concat,
    default_dtype,
    gather,
    linear,
    max_,
    reshape,
)


@dataclass
class StageConfig:
    points: int
    channels: int
    k: int = 24


def _default_stages() -> list[StageConfig]:
    return [StageConfig(512, 128), StageConfig(256, 256), StageConfig(128, 512), StageConfig(64, 1024)]


@dataclass
class BackboneConfig:
    """Architecture of the backbone; defaults are the full-size network."""

    embed_dim: int = 64
    stages: list[StageConfig] = field(default_factory=_default_stages)
    pre_blocks: int = 1
    post_blocks: int = 1
    single_queries: int = 64
    d_model: int = 1024
    multi_queries: int = 1
    d_global: int = 4096
    heads: int = 4
    use_xyz: bool = True
    multi_resolution_features: bool = True
    single_resolution_lp: bool = True
    multi_resolution_lp: bool = True

    def __post_init__(self):
        self.stages = [s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages]
        if not self.stages:
            raise ValueError("backbone needs at least one stage")
        pts = [s.points for s in self.stages]
        if any(b >= a for a, b in zip(pts, pts[1:])):
            raise ValueError(f"stage point schedule must strictly decrease, got {pts}")
        if self.d_model % self.heads or self.d_global % self.heads:
            raise ValueError("pooling widths must be divisible by the head count")

    @property
    def m(self) -> int:
        return len(self.stages)

    @property
    def global_dim(self) -> int:
        if self.multi_resolution_lp:
            return self.multi_queries * self.d_global
        return self.d_model

    @property
    def single_pool_mode(self) -> str:
        """'lp', 'max' (global max repeated to the query count) or 'none' (projected rows)."""
        if self.single_resolution_lp:
            return "lp"
        return "none" if self.multi_resolution_lp else "max"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PointFeatureMatrix:
    features: Tensor  # (B, N_i, C_i)
    anchors: np.ndarray  # (B, N_i, 3)
    level: int

    @property
    def n_points(self) -> int:
        return self.features.shape[-2]


@dataclass
class StackedPooledFeatures:
    matrix: Tensor  # (B, sum of pooled rows, d_model)
    levels: np.ndarray  # level tag of every row


@dataclass
class BackboneOutput:
    global_feature: Tensor  # (B, global_dim)
    per_level: list[PointFeatureMatrix]
    pooled: list[Tensor]
    stacked: StackedPooledFeatures
    embedding: Optional[Tensor] = None


class ResidualStage(Module):
    """Sample keypoints, group neighbors, normalize, then residual point-wise MLPs."""

    def __init__(self, in_dim: int, cfg: StageConfig, pre_blocks: int, post_blocks: int,
                 rng: np.random.Generator, use_xyz: bool = True, dtype=None):
        dtype = dtype or default_dtype()
        self.cfg = cfg
        self.use_xyz = use_xyz
        grouped_dim = in_dim + (3 if use_xyz else 0)
        self.alpha = Parameter(np.ones((1, grouped_dim)), dtype=dtype)
        self.beta = Parameter(np.zeros((1, grouped_dim)), dtype=dtype)
        self.transfer = ConvBNReLU(grouped_dim + in_dim, cfg.channels, rng, dtype=dtype)
        self.pre = [ResidualMLP(cfg.channels, rng, dtype=dtype) for _ in range(pre_blocks)]
        self.post = [ResidualMLP(cfg.channels, rng, dtype=dtype) for _ in range(post_blocks)]

    def __call__(self, feats: Tensor, xyz: np.ndarray) -> tuple[Tensor, np.ndarray]:
        s, k = self.cfg.points, self.cfg.k
        n = xyz.shape[1]
        if s > n:
            raise ShapeError(f"stage asks for {s} keypoints but only {n} points are available")
        idx = geometry.farthest_point_sample(xyz, s)
        new_xyz = np.take_along_axis(xyz, idx[..., None], axis=1)
        nbr = geometry.knn_indices(xyz, new_xyz, min(k, n))
        src = concat([feats, Tensor(xyz.astype(feats.dtype))], axis=-1) if self.use_xyz else feats
        grouped = gather(src, nbr)
        anchor = gather(src, idx)
        normed = geometry.geometric_affine(grouped, anchor, self.alpha, self.beta)
        centre = gather(feats, idx)
        b, _, kk, _ = grouped.shape
        centre = broadcast_to(reshape(centre, (b, s, 1, centre.shape[-1])), (b, s, kk, centre.shape[-1]))
        x = self.transfer(concat([normed, centre], axis=-1))
        for block in self.pre:
            x = block(x)
        x = max_(x, axis=2)
        for block in self.post:
            x = block(x)
        return x, new_xyz


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, dtype=None):
        dtype = dtype or default_dtype()
        self.cfg = cfg
        self.stem = ConvBNReLU(3, cfg.embed_dim, rng, dtype=dtype)
        self.stages = []
        in_dim = cfg.embed_dim
        for sc in cfg.stages:
            self.stages.append(ResidualStage(in_dim, sc, cfg.pre_blocks, cfg.post_blocks, rng, cfg.use_xyz, dtype))
            in_dim = sc.channels
        # one pooling module per level that feeds the stack
        self.single_pools = []
        for sc in self._pooled_stage_configs():
            if cfg.single_pool_mode == "lp":
                self.single_pools.append(
                    LearnablePooling(sc.channels, cfg.d_model, cfg.single_queries, cfg.heads, rng, dtype)
                )
            else:
                self.single_pools.append(Linear(sc.channels, cfg.d_model, rng, bias=False, dtype=dtype))
        self.multi_pool = (
            LearnablePooling(cfg.d_model, cfg.d_global, cfg.multi_queries, cfg.heads, rng, dtype)
            if cfg.multi_resolution_lp
            else None
        )

    def _pooled_stage_configs(self) -> list[StageConfig]:
        cfg = self.cfg
        return list(cfg.stages) if cfg.multi_resolution_features else [cfg.stages[-1]]

    @property
    def global_dim(self) -> int:
        return self.cfg.global_dim

    def features(self, xyz: np.ndarray) -> tuple[Tensor, list[PointFeatureMatrix]]:
        """Run the stem and the residual stages; ``xyz`` is ``(B, N, 3)``."""
        dtype = self.stem.fc.weight.dtype
        xyz = np.asarray(xyz)
        if xyz.ndim == 2:
            xyz = xyz[None]
        first = self.cfg.stages[0].points
        if xyz.shape[1] < first:
            raise ShapeError(f"cloud has {xyz.shape[1]} points, first stage needs {first}")
        x = self.stem(Tensor(xyz.astype(dtype, copy=False)))
        emb = x
        levels = []
        pts = xyz
        for i, stage in enumerate(self.stages, start=1):
            x, pts = stage(x, pts)
            levels.append(PointFeatureMatrix(x, pts, i))
        return emb, levels

    def single_resolution_pool(self, pf: PointFeatureMatrix, slot: int) -> Tensor:
        """Pool one level to ``single_queries`` rows (projected rows in 'none' mode)."""
        pool = self.single_pools[slot]
        expected = self._pooled_stage_configs()[slot].channels
        if pf.features.shape[-1] != expected:
            raise ShapeError(f"level {pf.level} has {pf.features.shape[-1]} channels, pool slot {slot} expects {expected}")
        mode = self.cfg.single_pool_mode
        if mode == "lp":
            return learnable_pool(pf.features, pool)
        proj = pool(pf.features)
        if mode == "max":
            return max_pool(proj, self.cfg.single_queries)
        return proj

    def stack_and_pool(self, pooled: list[Tensor]) -> tuple[Tensor, StackedPooledFeatures]:
        """Concatenate pooled levels (level 1 first) and pool the stack to the global vector."""
        n_expected = len(self.single_pools)
        if len(pooled) != n_expected:
            raise ValueError(f"expected {n_expected} pooled levels, got {len(pooled)}")
        if len({p.shape[-1] for p in pooled}) != 1:
            raise ShapeError("pooled levels must share the channel width")
        levels = np.concatenate([np.full(p.shape[-2], lv) for p, lv in zip(pooled, self.pooled_level_ids())])
        stacked = concat(pooled, axis=-2) if len(pooled) > 1 else pooled[0]
        if self.multi_pool is not None:
            g = learnable_pool(stacked, self.multi_pool)
            g = reshape(g, g.shape[:-2] + (g.shape[-2] * g.shape[-1],))
        else:
            g = max_(stacked, axis=-2)
        return g, StackedPooledFeatures(stacked, levels)

    def pooled_level_ids(self) -> list[int]:
        first = 1 if self.cfg.multi_resolution_features else self.cfg.m
        return [first + i for i in range(len(self.single_pools))]

    def __call__(self, xyz: np.ndarray) -> BackboneOutput:
        emb, levels = self.features(xyz)
        used = levels if self.cfg.multi_resolution_features else levels[-1:]
        pooled = [self.single_resolution_pool(pf, i) for i, pf in enumerate(used)]
        g, stacked = self.stack_and_pool(pooled)
        return BackboneOutput(g, levels, pooled, stacked, emb)


def backbone_forward(cloud, cfg: BackboneConfig, params: Backbone) -> BackboneOutput:
    """Functional entry point: run ``params`` (built from ``cfg``) on a cloud or batch."""
    if params.cfg is not cfg and params.cfg != cfg:
        raise ValueError("parameters were built for a different backbone configuration")
    pts = cloud.points if isinstance(cloud, geometry.PointCloud) else np.asarray(cloud)
    return params(pts)
