"""Loss, optimizer, learning-rate schedule, augmentation and the epoch loop."""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .data import Dataset, batch_points, rotate_z
from .geometry import PointCloud
from .nn import Module
from .tensor import Parameter, Tape, Tensor, backward_passes, custom_op, no_grad, reshape


class StaleGradientWarning(UserWarning):
    pass


@dataclass
class TrainConfig:
    lr_max: float = 0.01
    lr_min: float = 0.0001
    epochs: int = 200
    batch_size: int = 16
    momentum: float = 0.9
    weight_decay: float = 2e-4
    label_smoothing: float = 0.1
    translate: bool = True
    translate_range: float = 0.2
    rotate: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label smoothing must lie in [0, 1)")
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must not exceed lr_max")
        if self.epochs < 1:
            raise ValueError("need at least one epoch")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------------- loss


def smoothed_cross_entropy(logits: Tensor, targets, epsilon: float = 0.0) -> Tensor:
    """Mean cross-entropy against ``(1 - eps) * onehot + eps / C``.

    ``logits`` is ``(M, C)``; any leading axes are flattened first.
    """
    if not 0 <= epsilon < 1:
        raise ValueError("epsilon must lie in [0, 1)")
    c = logits.shape[-1]
    if logits.ndim != 2:
        logits = reshape(logits, (-1, c))
    z = logits.data
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != z.shape[0]:
        raise ValueError(f"{t.shape[0]} targets for {z.shape[0]} rows of logits")
    if t.min() < 0 or t.max() >= c:
        raise ValueError(f"targets must lie in 0..{c - 1}")
    m = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    q = np.full_like(z, epsilon / c)
    q[np.arange(m), t] += 1 - epsilon
    loss = -(q * logp).sum() / m
    probs = np.exp(logp)
    return custom_op(np.asarray(loss, dtype=z.dtype), (logits,), lambda g: ((probs - q) * (g / m),))


# --------------------------------------------------------------- optimization


def cosine_lr(t: float, cfg: TrainConfig) -> float:
    """Cosine annealing from ``lr_max`` at t=0 to ``lr_min`` at t=T, no restarts."""
    if t < 0:
        raise ValueError("epoch index must be non-negative")
    if t >= cfg.epochs:
        return cfg.lr_min
    c = math.cos(math.pi * t / cfg.epochs)
    return cfg.lr_max * (1 + c) / 2 + cfg.lr_min * (1 - c) / 2


class SGD:
    """SGD with momentum and L2 weight decay folded into the gradient."""

    def __init__(self, params: Sequence[Parameter], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = [p for p in params if p.trainable]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]
        self._seen_passes = None

    def step(self, lr: float) -> None:
        passes = backward_passes()
        if passes == self._seen_passes:
            warnings.warn("optimizer step without a backward pass since the last step", StaleGradientWarning)
        self._seen_passes = passes
        sgd_step(self.params, lr, self.momentum, self.weight_decay, self.velocity)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def sgd_step(params, lr: float, momentum: float, weight_decay: float, velocity: list[np.ndarray]) -> None:
    """``v = momentum * v + grad + wd * value``; ``value -= lr * v``."""
    for p, v in zip(params, velocity):
        if p.grad is None:
            warnings.warn(f"parameter {p.name or ''} has no gradient", StaleGradientWarning)
            continue
        v *= momentum
        v += p.grad
        if weight_decay:
            v += weight_decay * p.data
        p.data -= (lr * v).astype(p.dtype, copy=False)


# --------------------------------------------------------------- augmentation


def augment_translate(cloud: PointCloud, rng: np.random.Generator, range: float = 0.2) -> PointCloud:
    shift = rng.uniform(-range, range, 3) if range > 0 else np.zeros(3)
    return cloud.with_points(cloud.points + shift)


def augment_rotate(cloud: PointCloud, rng: np.random.Generator) -> PointCloud:
    """Uniform random rotation about the up (z) axis."""
    return cloud.with_points(rotate_z(cloud.points, rng.uniform(0, 2 * np.pi)))


def augment(cloud: PointCloud, cfg: TrainConfig, rng: np.random.Generator) -> PointCloud:
    if cfg.rotate:
        cloud = augment_rotate(cloud, rng)
    if cfg.translate:
        cloud = augment_translate(cloud, rng, cfg.translate_range)
    return cloud


# ------------------------------------------------------------------ epoch loop


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    running_loss: float = float("nan")
    best_metric: float = float("-inf")
    history: list[dict] = field(default_factory=list)
    optimizer: Optional[SGD] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "step": self.step, "running_loss": self.running_loss,
                "best_metric": self.best_metric}


def _object_onehot(clouds: list[PointCloud], n_objects: int) -> np.ndarray:
    oh = np.zeros((len(clouds), n_objects))
    for i, c in enumerate(clouds):
        oh[i, c.class_label] = 1
    return oh


def forward_batch(model: Module, clouds: list[PointCloud], rng=None) -> Tensor:
    xyz = batch_points(clouds)
    if model.cfg.task == "segmentation":
        return model(xyz, _object_onehot(clouds, model.cfg.head.num_objects), rng)
    return model(xyz, rng)


def batch_targets(model: Module, clouds: list[PointCloud]) -> np.ndarray:
    if model.cfg.task == "segmentation":
        return np.stack([c.point_labels for c in clouds])
    return np.array([c.class_label for c in clouds])


def make_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled mini-batches; a trailing batch of one is padded with a random extra sample
    because batch statistics need at least two samples."""
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches[-1]) == 1:
        batches[-1] = np.append(batches[-1], rng.integers(n))
    return batches


def train_epoch(model: Module, dataset: Dataset, cfg: TrainConfig, state: TrainState,
                log: Callable[[dict], None] | None = None) -> tuple[TrainState, dict]:
    """One pass over ``dataset``: shuffle, augment, forward, loss, backward, SGD step.

    All randomness is keyed by (seed, epoch[, index]) so a resumed run sees
    the same stream as an uninterrupted one.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if state.optimizer is None:
        state.optimizer = SGD(model.parameters(), cfg.momentum, cfg.weight_decay)
    opt = state.optimizer
    epoch = state.epoch
    lr = cosine_lr(epoch, cfg)
    model.train()
    shuffle_rng = np.random.default_rng([cfg.seed, epoch, 0])
    losses, correct, total = [], 0, 0
    for bi, idx in enumerate(make_batches(len(dataset), cfg.batch_size, shuffle_rng)):
        clouds = [augment(dataset.samples[i], cfg, np.random.default_rng([cfg.seed, epoch, 1, int(i)]))
                  for i in idx]
        drop_rng = np.random.default_rng([cfg.seed, epoch, 2, bi])
        opt.zero_grad()
        with Tape() as tape:
            logits = forward_batch(model, clouds, drop_rng)
            targets = batch_targets(model, clouds)
            loss = smoothed_cross_entropy(logits, targets, cfg.label_smoothing)
        tape.backward(loss)
        opt.step(lr)
        state.step += 1
        losses.append(loss.item())
        pred = np.argmax(logits.data, axis=-1)
        correct += int((pred == targets).sum())
        total += targets.size
    state.running_loss = float(np.mean(losses))
    metrics = {"epoch": epoch, "lr": lr, "loss": state.running_loss, "train_acc": correct / total}
    state.history.append(metrics)
    state.epoch += 1
    if log is not None:
        log(metrics)
    return state, metrics


def predict(model: Module, clouds: list[PointCloud], batch_size: int = 32) -> np.ndarray:
    """Eval-mode logits for a list of same-size clouds."""
    model.eval()
    outs = []
    with no_grad():
        for i in range(0, len(clouds), batch_size):
            outs.append(forward_batch(model, clouds[i:i + batch_size]).data)
    return np.concatenate(outs)


# --------------------------------------------------------------- grad check


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    excluded_kinks: int
    per_tensor: dict = field(default_factory=dict)

    def passed(self, tol: float) -> bool:
        return self.checked > 0 and self.max_rel_error <= tol


def grad_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
               max_per_tensor: Optional[int] = None, rng: np.random.Generator | None = None,
               kink_tol: float = 1e-4, floor: float = 1e-8) -> GradCheckResult:
    """Compare tape gradients of ``fn()`` against central differences.

    ``fn`` must rebuild the scalar loss from the current values of
    ``inputs`` (leaf tensors with ``requires_grad``).  Coordinates where the
    one-sided slopes disagree by more than ``kink_tol`` (relative) sit on a
    kink such as a max tie and are excluded from the comparison; a kink that
    escapes detection biases the central estimate by at most ``kink_tol / 2``.

    The relative error is ``|a - n| / max(|a|, |n|, floor)``.  For deep
    compositions raise ``floor`` above the central-difference roundoff (about
    ``eps * |f| / h`` times the evaluation's error growth) so an exactly-zero
    analytic gradient is not scored against pure noise.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradient checks need float64 tensors")
    for t in inputs:
        t.grad = np.zeros_like(t.data)
    with Tape() as tape:
        loss = fn()
    if loss.data.size != 1:
        raise ValueError(f"grad_check needs a scalar loss, got shape {loss.shape}")
    tape.backward(loss)
    analytic = [t.grad.copy() for t in inputs]
    rng = rng or np.random.default_rng(0)

    def value() -> float:
        with no_grad():
            return float(fn().data)

    f0 = value()
    worst, checked, kinks = 0.0, 0, 0
    per = {}
    for ti, (t, ga) in enumerate(zip(inputs, analytic)):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_per_tensor is not None and flat.size > max_per_tensor:
            coords = rng.choice(flat.size, max_per_tensor, replace=False)
        tw = 0.0
        for j in coords:
            orig = flat[j]
            flat[j] = orig + h
            fp = value()
            flat[j] = orig - h
            fm = value()
            flat[j] = orig
            right, left = (fp - f0) / h, (f0 - fm) / h
            if abs(right - left) > kink_tol * max(abs(right), abs(left), 1e-6) + 1e-7:
                kinks += 1
                continue
            num = (fp - fm) / (2 * h)
            a = ga.reshape(-1)[j]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            tw = max(tw, err)
            checked += 1
        per[t.name or f"input{ti}"] = tw
        worst = max(worst, tw)
    return GradCheckResult(worst, checked, kinks, per)
