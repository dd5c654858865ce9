"""Experiment configuration and the train / eval / permtest / ablation runners.

Config files are INI (``configparser``) with sections ``[model]``,
``[backbone]``, ``[head]``, ``[train]`` and ``[data]``.  Every key is
optional; see ``configs/`` in the repository for complete examples.
Lists are comma separated and stages are written ``points x channels x k``::

    [backbone]
    stages = 128x32x12, 64x64x12, 32x128x12, 16x128x12
"""
from __future__ import annotations

import configparser
import copy
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .backbone import BackboneConfig, StageConfig
from .checkpoint import load_into, read_checkpoint, save_checkpoint
from .data import Dataset, SyntheticSpec, generate_synthetic_dataset, load_dataset_dir, resample
from .geometry import Permutation
from .heads import HeadConfig
from .metrics import MetricReport, classification_report, instance_miou, masked_part_prediction, per_class_accuracy
from .model import ModelConfig, build_model
from .nn import Module
from .training import TrainConfig, TrainState, predict, train_epoch


@dataclass
class DataConfig:
    source: str = "synthetic"  # "synthetic" or a dataset directory
    n_points: int = 1024
    seed: int = 0
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval_every: int = 0  # 0: evaluate the test split only after the last epoch
    target_train_oa: Optional[float] = None  # stop once clean train accuracy reaches this
    target_test_miou: Optional[float] = None  # segmentation: stop once test mIoU reaches this

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        data = d.get("data", {})
        data["synthetic"] = SyntheticSpec(**data.get("synthetic", {}))
        return cls(
            model=ModelConfig(**d.get("model", {})),
            train=TrainConfig(**d.get("train", {})),
            data=DataConfig(**data),
            eval_every=d.get("eval_every", 0),
            target_train_oa=d.get("target_train_oa"),
            target_test_miou=d.get("target_test_miou"),
        )


# ------------------------------------------------------------- config parsing


def _convert(raw: str, like):
    raw = raw.strip()
    if isinstance(like, bool):
        low = raw.lower()
        if low not in ("true", "false", "yes", "no", "1", "0"):
            raise ValueError(f"expected a boolean, got {raw!r}")
        return low in ("true", "yes", "1")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float) or like is None:
        return float(raw) if raw.lower() != "none" else None
    if isinstance(like, list):
        items = [x.strip() for x in raw.split(",") if x.strip()]
        if like and isinstance(like[0], int):
            return [int(x) for x in items]
        return items
    return raw


def _parse_stages(raw: str) -> list[StageConfig]:
    stages = []
    for item in raw.split(","):
        parts = [int(x) for x in item.strip().lower().split("x")]
        if len(parts) not in (2, 3):
            raise ValueError(f"stage must be 'points x channels [x k]', got {item!r}")
        stages.append(StageConfig(*parts))
    return stages


def _apply(obj, section, name: str):
    known = {f.name: f for f in fields(obj)}
    updates = {}
    for key, raw in section.items():
        if key not in known:
            raise ValueError(f"unknown key {key!r} in [{name}]")
        if name == "backbone" and key == "stages":
            updates[key] = _parse_stages(raw)
        elif name == "head" and key == "hidden":
            updates[key] = [int(x) for x in raw.split(",")]
        else:
            updates[key] = _convert(raw, getattr(obj, key))
    return replace(obj, **updates)


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.read_string(text)
    allowed = {"model", "backbone", "head", "train", "data", "experiment"}
    unknown = set(cp.sections()) - allowed
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    task = cp.get("model", "task", fallback="classification")
    prec = cp.get("model", "precision", fallback="float32")
    backbone = _apply(BackboneConfig(), cp["backbone"], "backbone") if cp.has_section("backbone") else BackboneConfig()
    head = HeadConfig() if task == "classification" else HeadConfig(hidden=[1024, 512, 256], dropout=0.4)
    if cp.has_section("head"):
        head = _apply(head, cp["head"], "head")
    train = _apply(TrainConfig(), cp["train"], "train") if cp.has_section("train") else TrainConfig()
    data = DataConfig()
    spec = SyntheticSpec(task=task)
    if cp.has_section("data"):
        sec = dict(cp["data"])
        top = {k: sec.pop(k) for k in ("source", "n_points", "seed") if k in sec}
        data = _apply(data, top, "data")
        spec = _apply(spec, sec, "data")
    spec = replace(spec, task=task, n_points=data.n_points)
    data = replace(data, synthetic=spec)
    exp = ExperimentConfig(ModelConfig(task, backbone, head, prec), train, data)
    if cp.has_section("experiment"):
        exp = _apply(exp, {k: v for k, v in cp["experiment"].items()}, "experiment")
    return exp


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


# -------------------------------------------------------------------- datasets


def build_dataset(cfg: DataConfig) -> Dataset:
    if cfg.source == "synthetic":
        ds = generate_synthetic_dataset(cfg.synthetic, np.random.default_rng(cfg.seed))
    else:
        ds = load_dataset_dir(cfg.source)
    samples = [resample(s, cfg.n_points) for s in ds.samples]
    return Dataset(samples, ds.splits, ds.class_names, ds.task, ds.num_parts, ds.parts_of_class)


def fit_model_config(cfg: ModelConfig, ds: Dataset) -> ModelConfig:
    """Fill the head's class / part / object counts from the dataset."""
    if ds.task != cfg.task:
        raise ValueError(f"dataset task {ds.task!r} does not match model task {cfg.task!r}")
    if cfg.task == "classification":
        head = replace(cfg.head, num_classes=ds.num_classes)
    else:
        head = replace(cfg.head, num_parts=ds.num_parts, num_objects=ds.num_classes)
    return replace(cfg, head=head)


# ------------------------------------------------------------------ evaluation


def evaluate(model: Module, dataset: Dataset, batch_size: int = 32) -> MetricReport:
    """OA / mAcc (classification) or point OA / part mAcc / instance mIoU (segmentation)."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if model.cfg.task != dataset.task:
        raise ValueError(f"model task {model.cfg.task!r} does not match dataset task {dataset.task!r}")
    logits = predict(model, dataset.samples, batch_size)
    if dataset.task == "classification":
        return classification_report(np.argmax(logits, -1), dataset.labels(), dataset.num_classes)
    preds, targets, objs = [], [], []
    for lg, s in zip(logits, dataset.samples):
        preds.append(masked_part_prediction(lg, dataset.parts_of_class[s.class_label]))
        targets.append(s.point_labels)
        objs.append(s.class_label)
    flat_p, flat_t = np.concatenate(preds), np.concatenate(targets)
    acc = per_class_accuracy(flat_p, flat_t, dataset.num_parts)
    present = acc[~np.isnan(acc)]
    miou = instance_miou(preds, targets, objs, dataset.parts_of_class)
    return MetricReport(float((flat_p == flat_t).mean()), float(present.mean()),
                        [float(a) for a in present], len(dataset), instance_miou=miou)


@dataclass
class PermutationReport:
    oas: list[float]
    mean: float
    std: float


def run_permutation_test(model: Module, dataset: Dataset, n_perms: int, rng: np.random.Generator,
                         identity: bool = False) -> PermutationReport:
    """OA under ``n_perms`` independent random reorderings of every cloud's points."""
    if n_perms < 2:
        raise ValueError("need at least two permutations for a spread estimate")
    oas = []
    for _ in range(n_perms):
        clouds = []
        for s in dataset.samples:
            p = Permutation.identity(len(s)) if identity else Permutation.random(len(s), rng)
            labels = None if s.point_labels is None else s.point_labels[p.indices]
            clouds.append(type(s)(s.points[p.indices], labels, s.class_label))
        oas.append(evaluate(model, Dataset(clouds, dataset.splits, dataset.class_names, dataset.task,
                                           dataset.num_parts, dataset.parts_of_class)).oa)
    return PermutationReport(oas, float(np.mean(oas)), float(np.std(oas)))


# -------------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: Module
    state: TrainState
    records: list[dict]
    final: Optional[MetricReport]
    config: ExperimentConfig


def _json_line(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True)


def _train_split(ds: Dataset) -> Dataset:
    tr = ds.split("train")
    return tr if len(tr) else ds


def run_training(exp: ExperimentConfig, seed: Optional[int] = None, out_dir=None,
                 dataset: Optional[Dataset] = None, emit: Callable[[dict], None] | None = None) -> TrainResult:
    """Train a model per ``exp``; write ``metrics.jsonl`` and ``model.ckpt`` under ``out_dir``."""
    if seed is not None:
        exp = replace(exp, train=replace(exp.train, seed=seed))
    ds = dataset if dataset is not None else build_dataset(exp.data)
    exp = replace(exp, model=fit_model_config(exp.model, ds))
    train_ds, test_ds = _train_split(ds), ds.split("test")
    model = build_model(exp.model, exp.train.seed)
    state = TrainState()
    records: list[dict] = []
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "metrics.jsonl", "w")

    def record(rec: dict):
        records.append(rec)
        if log_fh is not None:
            log_fh.write(_json_line(rec) + "\n")
            log_fh.flush()
        if emit is not None:
            emit(rec)

    final = None
    try:
        for epoch in range(exp.train.epochs):
            _, metrics = train_epoch(model, train_ds, exp.train, state)
            rec = {"kind": "epoch", **metrics}
            last = epoch == exp.train.epochs - 1
            stop = False
            if exp.target_train_oa is not None:
                tr = evaluate(model, train_ds)
                rec["train_oa"] = tr.oa
                stop = tr.oa >= exp.target_train_oa
            if len(test_ds) and ((exp.eval_every and (epoch + 1) % exp.eval_every == 0) or last or stop
                                 or exp.target_test_miou is not None):
                rep = evaluate(model, test_ds)
                rec.update(_report_fields(rep))
                if exp.target_test_miou is not None and rep.instance_miou is not None:
                    stop = stop or rep.instance_miou >= exp.target_test_miou
            record(rec)
            if stop:
                break
        final = evaluate(model, test_ds) if len(test_ds) else evaluate(model, train_ds)
        record({"kind": "final", "epochs_run": state.epoch, "split": "test" if len(test_ds) else "train",
                **_report_fields(final)})
        if out_dir is not None:
            save_checkpoint(out_dir / "model.ckpt", model, exp.to_dict(), exp.train.seed)
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(model, state, records, final, exp)


def _report_fields(rep: MetricReport) -> dict:
    out = {"oa": rep.oa, "macc": rep.macc}
    if rep.instance_miou is not None:
        out["miou"] = rep.instance_miou
    return out


def load_model(path) -> tuple[Module, ExperimentConfig]:
    cfg, seed, tensors = read_checkpoint(path)
    exp = ExperimentConfig.from_dict(cfg)
    model = build_model(exp.model, seed)
    load_into(model, tensors)
    model.eval()
    return model, exp


# -------------------------------------------------------------------- ablation

# (multi-resolution features, single-resolution LP, multi-resolution LP)
ABLATION_ROWS = [
    ("baseline", False, False, False),
    ("multires_max", True, False, False),
    ("multires_single_lp", True, True, False),
    ("pointstack", True, True, True),
    ("multires_multi_lp_only", True, False, True),
]


def ablation_config(base: ExperimentConfig, multires: bool, single_lp: bool, multi_lp: bool) -> ExperimentConfig:
    bb = replace(base.model.backbone, multi_resolution_features=multires,
                 single_resolution_lp=single_lp, multi_resolution_lp=multi_lp)
    return replace(base, model=replace(base.model, backbone=bb))


def run_ablation(dataset: Dataset, base_cfg: ExperimentConfig, seeds, emit: Callable[[dict], None] | None = None,
                 rows=ABLATION_ROWS) -> list[dict]:
    """Train every ablation row for every seed; report mean and std of test OA / mAcc."""
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ValueError("ablation needs at least two seeds")
    table = []
    for name, mr, sl, ml in rows:
        cfg = ablation_config(base_cfg, mr, sl, ml)
        oas, maccs = [], []
        for s in seeds:
            res = run_training(cfg, seed=s, dataset=dataset)
            oas.append(res.final.oa)
            maccs.append(res.final.macc)
            if emit is not None:
                emit({"kind": "ablation_run", "row": name, "seed": s, "oa": res.final.oa, "macc": res.final.macc})
        row = {"kind": "ablation_row", "row": name, "multi_resolution_features": mr, "single_resolution_lp": sl,
               "multi_resolution_lp": ml, "oa_mean": float(np.mean(oas)), "oa_std": float(np.std(oas)),
               "macc_mean": float(np.mean(maccs)), "macc_std": float(np.std(maccs)), "oas": oas}
        table.append(row)
        if emit is not None:
            emit(row)
    return table
