"""Finite-difference gradient check suites for the ops, pooling and the full model.

Each check builds a small float64 problem, reduces the op output to a scalar
with a fixed random weighting, and compares tape gradients against central
differences (see :func:`pointstack.training.grad_check`).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, StageConfig
from .geometry import geometric_affine
from .heads import HeadConfig
from .model import ModelConfig, build_model
from .pooling import LearnablePooling, learnable_pool, max_pool
from .tensor import BatchNormState, Tensor, precision
from .training import grad_check, smoothed_cross_entropy

TOLERANCE = 1e-4
STEP = 1e-5
# Relative-error denominator floors.  Whole-network losses carry ~1e-10 of
# finite-difference roundoff, which would swamp structurally zero gradients
# (e.g. a bias feeding straight into batch norm) under the 1e-8 op floor.
FLOOR = {"tensor": 1e-8, "pooling": 1e-8, "backbone": 1e-5}
SUITES = ("tensor", "pooling", "backbone")


@dataclass
class CheckOutcome:
    suite: str
    name: str
    max_rel_error: float
    checked: int
    excluded_kinks: int

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error <= TOLERANCE

    def to_record(self) -> dict:
        return {"kind": "gradcheck", "suite": self.suite, "check": self.name,
                "max_rel_error": float(self.max_rel_error), "checked": int(self.checked),
                "excluded_kinks": int(self.excluded_kinks), "passed": bool(self.passed)}


def _leaf(rng, *shape, name=None, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0, scale, shape), requires_grad=True, dtype=np.float64, name=name)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    """Scalar ``sum(out * w)`` so every output element carries a distinct weight."""
    return T.sum_(T.mul(out, w))


def _unary(op, shape=(4, 5), **kw):
    def build(rng):
        x = _leaf(rng, *shape, name="x")
        w = rng.normal(size=op(x, **kw).shape)
        return (lambda: _weighted(op(x, **kw), w)), [x]
    return build


def _binary(op, sa=(3, 4), sb=(3, 4)):
    def build(rng):
        a, b = _leaf(rng, *sa, name="a"), _leaf(rng, *sb, name="b")
        w = rng.normal(size=op(a, b).shape)
        return (lambda: _weighted(op(a, b), w)), [a, b]
    return build


def _dropout(rng):
    x = _leaf(rng, 6, 5, name="x")
    w = rng.normal(size=x.shape)
    # a fresh generator per call replays the same mask for every evaluation
    return (lambda: _weighted(T.dropout(x, 0.3, True, np.random.default_rng(7)), w)), [x]


def _gather(rng):
    x = _leaf(rng, 2, 6, 3, name="x")
    idx = rng.integers(0, 6, size=(2, 4, 3))  # repeated rows exercise the scatter-add
    w = rng.normal(size=(2, 4, 3, 3))
    return (lambda: _weighted(T.gather(x, idx), w)), [x]


def _batch_norm(rng):
    x = _leaf(rng, 3, 5, 4, name="x")
    gamma, beta = _leaf(rng, 4, name="gamma"), _leaf(rng, 4, name="beta")
    w = rng.normal(size=x.shape)

    def fn():
        # fresh running statistics so repeated evaluations are identical
        return _weighted(T.batch_norm(x, gamma, beta, BatchNormState(4, np.float64), True), w)
    return fn, [x, gamma, beta]


def _linear(rng):
    x, wt, b = _leaf(rng, 2, 5, 4, name="x"), _leaf(rng, 4, 3, name="w"), _leaf(rng, 1, 3, name="b")
    w = rng.normal(size=(2, 5, 3))
    return (lambda: _weighted(T.linear(x, wt, b), w)), [x, wt, b]


def _geometric_affine(rng):
    g = _leaf(rng, 2, 4, 5, 3, name="grouped")
    a = _leaf(rng, 2, 4, 3, name="anchor")
    alpha, beta = _leaf(rng, 3, name="alpha"), _leaf(rng, 3, name="beta")
    w = rng.normal(size=g.shape)
    return (lambda: _weighted(geometric_affine(g, a, alpha, beta), w)), [g, a, alpha, beta]


def _cross_entropy(rng):
    z = _leaf(rng, 6, 4, name="logits")
    t = rng.integers(0, 4, 6)
    return (lambda: smoothed_cross_entropy(z, t, 0.1)), [z]


TENSOR_CHECKS: dict[str, Callable] = {
    "add": _binary(T.add, (3, 4), (1, 4)),
    "sub": _binary(T.sub, (3, 4), (3, 1)),
    "mul": _binary(T.mul, (2, 3, 4), (3, 4)),
    "matmul": _binary(T.matmul, (2, 3, 4), (4, 5)),
    "relu": _unary(T.relu),
    "dropout": _dropout,
    "reshape": _unary(lambda x: T.reshape(x, (2, 12)), shape=(4, 6)),
    "transpose": _unary(lambda x: T.transpose(x, (1, 0))),
    "broadcast_to": _unary(lambda x: T.broadcast_to(x, (3, 4, 5)), shape=(1, 4, 5)),
    "sum": _unary(lambda x: T.sum_(x, axis=0, keepdims=True)),
    "mean": _unary(lambda x: T.mean(x, axis=1)),
    "max": _unary(lambda x: T.max_(x, axis=-2), shape=(2, 6, 3)),
    "concat": _binary(lambda a, b: T.concat([a, b], axis=-1), (3, 2), (3, 4)),
    "gather": _gather,
    "softmax_rows": _unary(T.softmax_rows, shape=(3, 7)),
    "linear": _linear,
    "batch_norm": _batch_norm,
    "geometric_affine": _geometric_affine,
    "smoothed_cross_entropy": _cross_entropy,
}


def _lp(batched: bool):
    def build(rng):
        with precision(np.float64):
            lp = LearnablePooling(6, 8, 3, 2, rng)
        f = _leaf(rng, *((2, 5, 6) if batched else (5, 6)), name="features")
        w = rng.normal(size=learnable_pool(f, lp).shape)
        return (lambda: _weighted(learnable_pool(f, lp), w)), [f, *lp.parameters()]
    return build


def _max_pool(rng):
    f = _leaf(rng, 2, 7, 4, name="features")
    w = rng.normal(size=(2, 3, 4))
    return (lambda: _weighted(max_pool(f, 3), w)), [f]


POOLING_CHECKS: dict[str, Callable] = {
    "learnable_pool": _lp(False),
    "learnable_pool_batched": _lp(True),
    "max_pool_repeated": _max_pool,
}


def tiny_model_config(task: str = "classification", **flags) -> ModelConfig:
    bb = BackboneConfig(embed_dim=8, stages=[StageConfig(16, 8, 4), StageConfig(8, 16, 4)], pre_blocks=1,
                        post_blocks=1, single_queries=4, d_model=8, multi_queries=1, d_global=16, heads=2, **flags)
    if task == "classification":
        head = HeadConfig(num_classes=3, hidden=[8], dropout=0.5)
    else:
        head = HeadConfig(hidden=[8], dropout=0.4, num_parts=4, num_objects=2)
    return ModelConfig(task, bb, head, precision="float64")


def _end_to_end(task: str, **flags):
    def build(rng):
        model = build_model(tiny_model_config(task, **flags), seed=int(rng.integers(1 << 31)))
        model.train()
        xyz = rng.normal(size=(3, 32, 3))
        if task == "classification":
            targets = np.array([0, 1, 2])
            args = ()
        else:
            targets = rng.integers(0, 4, size=(3, 32))
            args = (np.eye(2)[[0, 1, 1]],)

        def fn():
            logits = model(xyz, *args, np.random.default_rng(3))
            return smoothed_cross_entropy(logits, targets, 0.1)
        return fn, model.parameters()
    return build


BACKBONE_CHECKS: dict[str, Callable] = {
    "classification_loss": _end_to_end("classification"),
    "classification_loss_max_variants": _end_to_end("classification", single_resolution_lp=False,
                                                    multi_resolution_lp=False),
    "classification_loss_single_level": _end_to_end("classification", multi_resolution_features=False),
    "segmentation_loss": _end_to_end("segmentation"),
}

_ALL = {"tensor": TENSOR_CHECKS, "pooling": POOLING_CHECKS, "backbone": BACKBONE_CHECKS}


def run_suite(module: str = "all", seed: int = 0, max_per_tensor: int = 12) -> list[CheckOutcome]:
    """Run one suite (``tensor``, ``pooling``, ``backbone``) or ``all``."""
    if module != "all" and module not in _ALL:
        raise ValueError(f"unknown gradcheck module {module!r}; choose all, {', '.join(SUITES)}")
    suites = SUITES if module == "all" else (module,)
    out = []
    for suite in suites:
        for name, build in _ALL[suite].items():
            rng = np.random.default_rng([seed, len(out)])
            with precision(np.float64):
                fn, inputs = build(rng)
            res = grad_check(fn, inputs, h=STEP, max_per_tensor=max_per_tensor, floor=FLOOR[suite],
                             rng=np.random.default_rng([seed, len(out), 1]))
            out.append(CheckOutcome(suite, name, res.max_rel_error, res.checked, res.excluded_kinks))
    return out
