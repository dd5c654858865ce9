"""Command-line entry point: ``pointstack {train,eval,ablate,permtest,gradcheck}``.

Every result is printed to stdout as one JSON object per line.  On failure a
single ``{"kind": "error", ...}`` line goes to stderr and the exit status is
nonzero (2 for usage errors, 1 otherwise).
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from typing import Sequence

import numpy as np

from . import experiments as ex
from .data import load_dataset_dir, resample
from .gradcheck import run_suite


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # keep usage errors machine-readable
        _emit_error("UsageError", message)
        sys.exit(2)


def _emit(rec: dict) -> None:
    print(json.dumps(rec, sort_keys=True), flush=True)


def _emit_error(kind: str, message: str) -> None:
    print(json.dumps({"kind": "error", "error": kind, "message": message}, sort_keys=True), file=sys.stderr, flush=True)


def _report_record(rep, **extra) -> dict:
    rec = {"kind": "eval", "oa": rep.oa, "macc": rep.macc, "n_samples": rep.n_samples,
           "per_class_acc": rep.per_class_acc, **extra}
    if rep.instance_miou is not None:
        rec["miou"] = rep.instance_miou
    return rec


def _dataset_for(model_exp: ex.ExperimentConfig, data_dir: str | None):
    if data_dir is None:
        ds = ex.build_dataset(model_exp.data)
        test = ds.split("test")
        return test if len(test) else ds
    ds = load_dataset_dir(data_dir)
    n = model_exp.data.n_points
    return replace(ds, samples=[resample(s, n) for s in ds.samples])


def cmd_train(args) -> None:
    exp = ex.load_config(args.config)
    ex.run_training(exp, seed=args.seed, out_dir=args.out, emit=_emit)


def cmd_eval(args) -> None:
    model, exp = ex.load_model(args.checkpoint)
    ds = _dataset_for(exp, args.data)
    if args.split != "all":
        ds = ds.split(args.split)
    _emit(_report_record(ex.evaluate(model, ds), split=args.split))


def cmd_ablate(args) -> None:
    if args.seeds < 2:
        raise CLIError("ablation needs --seeds >= 2")
    exp = ex.load_config(args.config)
    ds = ex.build_dataset(exp.data)
    ex.run_ablation(ds, exp, range(args.seed0, args.seed0 + args.seeds), emit=_emit)


def cmd_permtest(args) -> None:
    model, exp = ex.load_model(args.checkpoint)
    ds = _dataset_for(exp, args.data)
    rep = ex.run_permutation_test(model, ds, args.n, np.random.default_rng(args.seed))
    _emit({"kind": "permtest", "n_perms": args.n, "oas": rep.oas, "oa_mean": rep.mean, "oa_std": rep.std})


def cmd_gradcheck(args) -> None:
    outcomes = run_suite(args.module, seed=args.seed)
    for o in outcomes:
        _emit(o.to_record())
    failed = [o.name for o in outcomes if not o.passed]
    _emit({"kind": "gradcheck_summary", "module": args.module, "checks": len(outcomes),
           "failed": failed, "max_rel_error": max(float(o.max_rel_error) for o in outcomes)})
    if failed:
        raise CLIError(f"gradient check failed: {', '.join(failed)}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pointstack", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=None, help="overrides [train] seed")
    t.add_argument("--out", default=None, help="directory for metrics.jsonl and model.ckpt")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", default=None, help="dataset directory (default: the checkpoint's data config)")
    e.add_argument("--split", default="all", choices=["all", "train", "test"])
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train the five ablation configurations over several seeds")
    a.add_argument("--config", required=True)
    a.add_argument("--seeds", type=int, default=3, help="number of seeds")
    a.add_argument("--seed0", type=int, default=0, help="first seed")
    a.set_defaults(func=cmd_ablate)

    pt = sub.add_parser("permtest", help="accuracy spread under random point reorderings")
    pt.add_argument("--checkpoint", required=True)
    pt.add_argument("--n", type=int, default=10)
    pt.add_argument("--data", default=None)
    pt.add_argument("--seed", type=int, default=0)
    pt.set_defaults(func=cmd_permtest)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--module", default="all", choices=["all", "tensor", "pooling", "backbone"])
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one error record
        _emit_error(type(exc).__name__, str(exc))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
